"""Image-quality metrics: sliced Wasserstein distance, MS-SSIM, inception score.

Images handed to these functions are float arrays in [0, 1], CHW or NCHW.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import convolve1d, correlate1d
from scipy.special import rel_entr

from .imageio import load_png_dir

# -- Laplacian pyramid -------------------------------------------------------

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur(x: np.ndarray, gain: float = 1.0) -> np.ndarray:
    k = _BINOMIAL * gain
    return convolve1d(convolve1d(x, k, axis=-1, mode="mirror"), k, axis=-2, mode="mirror")


def pyr_down(x: np.ndarray) -> np.ndarray:
    return _blur(x)[..., ::2, ::2]


def pyr_up(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    up = np.zeros(x.shape[:-2] + (2 * h, 2 * w), dtype=x.dtype)
    up[..., ::2, ::2] = x
    return _blur(up, 2.0)


def laplacian_pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    """Band-pass levels (finest first) followed by the low-pass residual."""
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[-2:]
    if levels < 0:
        raise ValueError("levels must be >= 0")
    if h % (2**levels) or w % (2**levels):
        raise ValueError(f"extents {h}x{w} are not divisible by 2**{levels}")
    bands = []
    for _ in range(levels):
        low = pyr_down(x)
        bands.append(x - pyr_up(low))
        x = low
    bands.append(x)
    return bands


def reconstruct_pyramid(pyramid: list[np.ndarray]) -> np.ndarray:
    x = pyramid[-1]
    for band in reversed(pyramid[:-1]):
        x = pyr_up(x) + band
    return x


# -- sliced Wasserstein distance ---------------------------------------------


@dataclass
class PatchSet:
    patches: np.ndarray  # (count, channels * patch_size**2)
    level: int = 0
    normalized: bool = False

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim == 1:
            self.patches = self.patches[:, None]
        if self.patches.ndim != 2:
            raise ValueError("patches must be a 2-D (count, length) array")

    def __len__(self):
        return len(self.patches)


def extract_patches(
    images: np.ndarray, patch_size: int, max_patches: int, rng, level: int = 0, normalize: bool = True
) -> PatchSet:
    """Random ``patch_size`` neighbourhoods from an (N, C, H, W) stack.

    With ``normalize`` each channel is shifted and scaled to zero mean and
    unit std over the whole set.
    """
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    if h < patch_size or w < patch_size:
        raise ValueError(f"level {h}x{w} smaller than patch size {patch_size}")
    per_image = max(1, int(math.ceil(max_patches / n)))
    img = np.repeat(np.arange(n), per_image)
    ys = rng.integers(0, h - patch_size + 1, size=img.size)
    xs = rng.integers(0, w - patch_size + 1, size=img.size)
    off = np.arange(patch_size)
    desc = images[
        img[:, None, None, None],
        np.arange(c)[None, :, None, None],
        (ys[:, None] + off)[:, None, :, None],
        (xs[:, None] + off)[:, None, None, :],
    ][:max_patches]
    if normalize:
        desc = desc - desc.mean(axis=(0, 2, 3), keepdims=True)
        std = desc.std(axis=(0, 2, 3), keepdims=True)
        desc = desc / np.where(std > 0, std, 1.0)
    return PatchSet(desc.reshape(len(desc), -1), level=level, normalized=normalize)


def random_directions(dim: int, count: int, rng) -> np.ndarray:
    d = rng.standard_normal((dim, count))
    return d / np.linalg.norm(d, axis=0, keepdims=True)


def swd(a, b, n_projections: int = 256, seed=0, directions: np.ndarray | None = None) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit projections.

    The larger set is subsampled (seeded) to the size of the smaller.
    Pass ``directions`` (dim, k) to fix the projections explicitly.
    """
    pa = a.patches if isinstance(a, PatchSet) else PatchSet(a).patches
    pb = b.patches if isinstance(b, PatchSet) else PatchSet(b).patches
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("swd needs non-empty patch sets")
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"descriptor lengths differ: {pa.shape[1]} vs {pb.shape[1]}")
    rng = np.random.default_rng(seed)
    if len(pa) != len(pb):
        k = min(len(pa), len(pb))
        if len(pa) > k:
            pa = pa[np.sort(rng.choice(len(pa), k, replace=False))]
        else:
            pb = pb[np.sort(rng.choice(len(pb), k, replace=False))]
    if directions is None:
        directions = random_directions(pa.shape[1], n_projections, rng)
    else:
        directions = np.asarray(directions, dtype=np.float64).reshape(pa.shape[1], -1)
    proj_a = np.sort(pa @ directions, axis=0)
    proj_b = np.sort(pb @ directions, axis=0)
    return float(np.mean(np.abs(proj_a - proj_b)))


def swd_levels(real: np.ndarray, fake: np.ndarray, patch_size: int = 7, max_patches: int = 2048,
               n_projections: int = 256, seed=0) -> list[float]:
    """SWD per Laplacian level for two (N, C, H, W) stacks in [0, 1]."""
    real, fake = np.asarray(real, dtype=np.float64), np.asarray(fake, dtype=np.float64)
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError(f"resolution mismatch: real {real.shape[1:]} vs fake {fake.shape[1:]}")
    h = real.shape[-1]
    levels = 0
    while (h // 2 ** (levels + 1)) >= max(patch_size, 8) and h % 2 ** (levels + 1) == 0:
        levels += 1
    rng = np.random.default_rng(seed)
    pyr_r = laplacian_pyramid(real, levels)
    pyr_f = laplacian_pyramid(fake, levels)
    out = []
    for lvl, (lr, lf) in enumerate(zip(pyr_r, pyr_f)):
        if lr.shape[-1] < patch_size:
            break
        # both sets share one stream of patch locations, so a set compared
        # with itself yields identical descriptors
        loc_seed = rng.integers(2**32)
        a = extract_patches(lr, patch_size, max_patches, np.random.default_rng(loc_seed), level=lvl)
        b = extract_patches(lf, patch_size, max_patches, np.random.default_rng(loc_seed), level=lvl)
        out.append(swd(a, b, n_projections, seed=rng.integers(2**32)))
    return out


# -- MS-SSIM -----------------------------------------------------------------

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
C1 = 0.01**2
C2 = 0.03**2


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    c = np.arange(size) - size // 2
    g = np.exp(-(c**2) / (2 * sigma**2))
    return g / g.sum()


def _local_mean(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(x, win, axis=-1, mode="reflect"), win, axis=-2, mode="reflect")


@dataclass
class SsimComponents:
    luminance: float
    contrast: float
    structure: float


def ssim_components(a: np.ndarray, b: np.ndarray, win=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel luminance, contrast and structure maps (C3 = C2 / 2)."""
    win = _gaussian_window() if win is None else win
    mu_a, mu_b = _local_mean(a, win), _local_mean(b, win)
    var_a = np.maximum(_local_mean(a * a, win) - mu_a**2, 0.0)
    var_b = np.maximum(_local_mean(b * b, win) - mu_b**2, 0.0)
    cov = _local_mean(a * b, win) - mu_a * mu_b
    sa, sb = np.sqrt(var_a), np.sqrt(var_b)
    lum = (2 * mu_a * mu_b + C1) / (mu_a**2 + mu_b**2 + C1)
    con = (2 * sa * sb + C2) / (var_a + var_b + C2)
    struct = (cov + C2 / 2) / (sa * sb + C2 / 2)
    return lum, con, struct


def ssim_summary(a, b) -> SsimComponents:
    lum, con, struct = ssim_components(np.asarray(a, float), np.asarray(b, float))
    return SsimComponents(float(lum.mean()), float(con.mean()), float(struct.mean()))


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    x = x[..., : h - h % 2, : w - w % 2]
    return 0.25 * (x[..., ::2, ::2] + x[..., 1::2, ::2] + x[..., ::2, 1::2] + x[..., 1::2, 1::2])


def ms_ssim(a, b, scale_weights=MS_SSIM_WEIGHTS) -> float:
    """Multi-scale SSIM of two images (CHW or HW) in [0, 1].

    Contrast-structure terms at every scale, luminance at the coarsest
    only, combined as a weighted geometric product. Fewer than five
    weights are renormalised to sum to 1. Negative per-scale terms are
    clamped to 0 so the product stays real.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    weights = np.asarray(scale_weights, dtype=np.float64)
    weights = weights / weights.sum()
    scales = len(weights)
    h, w = a.shape[-2:]
    if min(h, w) < 2 ** (scales - 1):
        raise ValueError(f"{h}x{w} images cannot be halved {scales - 1} times")
    win = _gaussian_window()
    terms = []
    for s in range(scales):
        lum, con, struct = ssim_components(a, b, win)
        cs = float(np.mean(con * struct))
        if s == scales - 1:
            terms.append(max(float(np.mean(lum * con * struct)), 0.0))
        else:
            terms.append(max(cs, 0.0))
            a, b = _downsample2(a), _downsample2(b)
    return float(np.prod(np.power(terms, weights)))


# -- inception score ---------------------------------------------------------


def inception_score(class_probs, splits: int = 1) -> tuple[float, float]:
    """``exp(E_x KL(p(y|x) || p(y)))`` per split; returns (mean, std) across splits."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("class_probs must be (samples, classes)")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("rows of class_probs must be probability vectors")
    s = len(p)
    if splits < 1 or s % splits:
        raise ValueError(f"{s} samples cannot be divided into {splits} equal splits")
    scores = []
    for part in np.split(p, splits):
        marginal = part.mean(axis=0, keepdims=True)
        kl = rel_entr(part, marginal).sum(axis=1)
        scores.append(math.exp(float(np.mean(kl))))
    return float(np.mean(scores)), float(np.std(scores))


# -- evaluation --------------------------------------------------------------

REPORT_NOTE = (
    "inception score uses a small classifier trained on the synthetic label set; "
    "values are comparable between runs of this toolkit only, not with Inception-v3 scores"
)
ROW_LABELS = {"swd": "Sliced Wasserstein Distance", "msssim": "MSSSIM", "is": "Inception Score"}


@dataclass
class EvalConfig:
    metrics: tuple[str, ...] = ("swd", "msssim", "is")
    patch_size: int = 7
    max_patches: int = 2048
    n_projections: int = 256
    msssim_pairs: int = 64
    is_splits: int = 4
    seed: int = 0
    classifier: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)


@dataclass
class MetricReport:
    swd: float | None = None
    swd_levels: list[float] = field(default_factory=list)
    ms_ssim: float | None = None
    ms_ssim_std: float | None = None
    inception_mean: float | None = None
    inception_std: float | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def swd_x1e3(self) -> float | None:
        return None if self.swd is None else self.swd * 1e3

    def rows(self) -> list[tuple[str, float | None, float | None, str]]:
        md = self.metadata
        out = []
        if self.swd is not None:
            out.append(("swd", self.swd, None, md.get("swd_params", "")))
        if self.ms_ssim is not None:
            out.append(("msssim", self.ms_ssim, self.ms_ssim_std, md.get("msssim_params", "")))
        if self.inception_mean is not None:
            out.append(("is", self.inception_mean, self.inception_std, md.get("is_params", "")))
        return out


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"


def write_report_csv(report: MetricReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "std", "params"])
        for name, value, std, params in report.rows():
            w.writerow([name, _fmt(value), _fmt(std), params])


def format_table(columns: dict[str, MetricReport]) -> str:
    """Plain-text table, one row per metric and one column per report."""
    names = list(columns)
    lines = [" | ".join(["Metric"] + names)]
    for key, label in ROW_LABELS.items():
        cells = []
        for rep in columns.values():
            if key == "swd":
                cells.append(_fmt(rep.swd_x1e3) + " (x1e3)" if rep.swd is not None else "-")
            elif key == "msssim":
                cells.append(_fmt(rep.ms_ssim) if rep.ms_ssim is not None else "-")
            else:
                cells.append(f"{rep.inception_mean:.3f} ± {rep.inception_std:.3f}"
                             if rep.inception_mean is not None else "-")
        lines.append(" | ".join([label] + cells))
    lines.append(f"note: {REPORT_NOTE}")
    return "\n".join(lines)


def evaluate_arrays(real: np.ndarray, fake: np.ndarray, config: EvalConfig | None = None,
                    metadata: dict[str, str] | None = None) -> MetricReport:
    """Metrics of a fake (N, 3, H, W) stack against a real one, both in [0, 1]."""
    cfg = config or EvalConfig()
    real, fake = np.asarray(real, dtype=np.float64), np.asarray(fake, dtype=np.float64)
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError(f"resolution mismatch: real {real.shape[1:]} vs fake {fake.shape[1:]}")
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("both image sets must be non-empty")
    rep = MetricReport(metadata=dict(metadata or {}))
    rep.metadata["seed"] = str(cfg.seed)
    rep.metadata["resolution"] = f"{real.shape[-2]}x{real.shape[-1]}"
    rng = np.random.default_rng(cfg.seed)
    if "swd" in cfg.metrics:
        levels = swd_levels(real, fake, cfg.patch_size, cfg.max_patches, cfg.n_projections, seed=cfg.seed)
        rep.swd_levels = levels
        rep.swd = float(np.mean(levels))
        rep.metadata["swd_params"] = (
            f"patch={cfg.patch_size};max_patches={cfg.max_patches};"
            f"projections={cfg.n_projections};levels={len(levels)}"
        )
    if "msssim" in cfg.metrics:
        # one shared index draw: fakes are independent of the reals, so
        # position-wise pairs are random pairs, and identical sets pair up
        n = min(cfg.msssim_pairs, len(real), len(fake))
        ri = fi = rng.choice(min(len(real), len(fake)), n, replace=False)
        h = real.shape[-1]
        scales = max(1, min(5, int(math.log2(h)) + 1))
        weights = MS_SSIM_WEIGHTS[:scales]
        vals = [ms_ssim(real[i], fake[j], weights) for i, j in zip(ri, fi)]
        rep.ms_ssim, rep.ms_ssim_std = float(np.mean(vals)), float(np.std(vals))
        rep.metadata["msssim_params"] = f"pairs={n};scales={scales}"
    if "is" in cfg.metrics:
        from .classifier import default_classifier

        clf = cfg.classifier or default_classifier()
        probs = np.asarray(clf(fake))
        splits = max(1, min(cfg.is_splits, len(probs)))
        usable = len(probs) - len(probs) % splits
        rep.inception_mean, rep.inception_std = inception_score(probs[:usable], splits)
        rep.metadata["is_params"] = f"splits={splits};samples={usable};classes={probs.shape[1]}"
        rep.metadata["note"] = REPORT_NOTE
    return rep


def evaluate(real_dir, fake_dir, config: EvalConfig | None = None) -> MetricReport:
    _, real = load_png_dir(real_dir)
    _, fake = load_png_dir(fake_dir)
    if not real or not fake:
        raise ValueError("both directories must contain PNG images")
    shapes = {x.shape for x in real} | {x.shape for x in fake}
    if len(shapes) != 1:
        raise ValueError(f"resolution mismatch between/within directories: {sorted(shapes)}")
    meta = {"real_dir": str(real_dir), "fake_dir": str(fake_dir)}
    return evaluate_arrays(np.stack(real), np.stack(fake), config, meta)


def report_dict(report: MetricReport) -> dict:
    return asdict(report)
