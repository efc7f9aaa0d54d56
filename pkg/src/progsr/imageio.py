"""PNG in/out. Images are float CHW arrays; [-1, 1] for training, [0, 1] for metrics."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


def to_uint8(img: np.ndarray, value_range=(-1.0, 1.0)) -> np.ndarray:
    lo, hi = value_range
    x = (np.asarray(img, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray, value_range=(-1.0, 1.0)) -> None:
    """Write a CHW (3 channels) or HW image."""
    arr = to_uint8(img, value_range)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG as a float64 CHW array in [0, 1]; alpha is dropped."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ValueError(f"{path}: not a PNG ({im.format})")
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def list_pngs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def iter_pngs(directory, skip_unreadable: bool = False):
    """Yield ``(path, image)`` one decoded file at a time."""
    for p in list_pngs(directory):
        try:
            img = load_png(p)
        except Exception as exc:
            if not skip_unreadable:
                raise
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        yield p, img


def load_png_dir(directory, skip_unreadable: bool = False) -> tuple[list[Path], list[np.ndarray]]:
    pairs = list(iter_pngs(directory, skip_unreadable))
    return [p for p, _ in pairs], [img for _, img in pairs]


def save_grid(path, images: np.ndarray, cols: int | None = None, value_range=(-1.0, 1.0)) -> None:
    """Tile a batch (B, 3, H, W) into one PNG."""
    b, c, h, w = images.shape
    cols = cols or int(np.ceil(np.sqrt(b)))
    rows = int(np.ceil(b / cols))
    grid = np.full((c, rows * h, cols * w), value_range[0], dtype=np.float64)
    for i in range(b):
        r, q = divmod(i, cols)
        grid[:, r * h : (r + 1) * h, q * w : (q + 1) * w] = images[i]
    save_png(path, grid, value_range)
