"""Procedural stand-in datasets and PNG-directory ingestion."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import list_pngs, load_png, save_png
from .resample import bicubic_resize

KINDS = ("smooth-blob", "gradient-stripe")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    count: int
    resolution: int
    kind: str = "smooth-blob"
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        r = self.resolution
        if r < 16 or r & (r - 1):
            raise ValueError(f"resolution must be a power of 2 >= 16, got {r}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")


def _grid(res: int):
    c = (np.arange(res) + 0.5) / res
    return np.meshgrid(c, c, indexing="ij")


def render_blobs(rng: np.random.Generator, res: int, n_blobs: int | None = None) -> np.ndarray:
    yy, xx = _grid(res)
    img = np.empty((3, res, res))
    img[:] = rng.uniform(0.0, 0.35, size=3)[:, None, None]
    n = int(rng.integers(1, 5)) if n_blobs is None else n_blobs
    for _ in range(n):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        sigma = rng.uniform(0.08, 0.2)
        color = rng.uniform(0.2, 0.8, size=3)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        img += color[:, None, None] * bump
    return np.clip(img, 0.0, 1.0)


def render_stripes(rng: np.random.Generator, res: int, angle: float | None = None) -> np.ndarray:
    yy, xx = _grid(res)
    theta = rng.uniform(0, np.pi) if angle is None else angle
    freq = rng.uniform(1.0, 3.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    lo = rng.uniform(0.0, 0.4, size=3)
    hi = rng.uniform(0.6, 1.0, size=3)
    return lo[:, None, None] + (hi - lo)[:, None, None] * wave


def render_dataset(spec: SyntheticDatasetSpec) -> np.ndarray:
    """(count, 3, R, R) float64 images in [0, 1]."""
    rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind)])
    render = render_blobs if spec.kind == "smooth-blob" else render_stripes
    out = np.empty((spec.count, 3, spec.resolution, spec.resolution))
    for i in range(spec.count):
        out[i] = render(rng, spec.resolution)
    return out


def synth_dataset(spec: SyntheticDatasetSpec, out_dir) -> Path:
    """Write ``spec.count`` seeded PNGs to ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    images = render_dataset(spec)
    width = max(4, len(str(spec.count)))
    for i, img in enumerate(images):
        save_png(out / f"{spec.kind}_{i:0{width}d}.png", img, value_range=(0.0, 1.0))
    return out


def stage_resolutions(max_resolution: int) -> list[int]:
    res, out = 4, []
    while res <= max_resolution:
        out.append(res)
        res *= 2
    return out


@dataclass
class Dataset:
    """Images normalised to [-1, 1] plus bicubic copies at every stage resolution."""

    paths: list[Path]
    images: np.ndarray
    pyramid: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def unit_range(self, resolution: int) -> np.ndarray:
        """Pyramid level mapped back to [0, 1] for metrics."""
        return np.clip((self.pyramid[resolution] + 1.0) / 2.0, 0.0, 1.0)


def ingest_dataset(directory, max_resolution: int, dtype=np.float32) -> Dataset:
    """Load every PNG in ``directory`` (sorted by filename) and build the pyramid."""
    paths = list_pngs(directory)
    if not paths:
        raise ValueError(f"no PNG images in {directory}")
    images = [load_png(p) for p in paths]
    sizes = {}
    for p, img in zip(paths, images):
        sizes.setdefault(img.shape[1:], []).append(p.name)
    if len(sizes) > 1:
        common = max(sizes, key=lambda s: len(sizes[s]))
        offenders = sorted(n for s, names in sizes.items() if s != common for n in names)
        raise ValueError(f"mixed resolutions in {directory}; majority is {common}, offenders: {offenders}")
    h, w = images[0].shape[1:]
    if h != w or h < max_resolution:
        raise ValueError(f"images are {h}x{w}; need square images of at least {max_resolution}")
    stack = np.stack(images) * 2.0 - 1.0
    pyramid = {}
    for res in stage_resolutions(max_resolution):
        level = stack if res == h else bicubic_resize(stack, res)
        pyramid[res] = np.ascontiguousarray(level, dtype=dtype)
    return Dataset(paths=paths, images=np.ascontiguousarray(stack, dtype=dtype), pyramid=pyramid)
