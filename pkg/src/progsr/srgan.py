"""4x super-resolution GAN: residual generator over a bicubic skip path.

The generator predicts a correction that is added to a fixed bicubic x4
upsampling of its input. Its last convolution starts at zero, so an
untrained network reproduces the bicubic baseline exactly, and content
pretraining can only start from there. Content loss is pixel MSE; the
adversarial term reuses the WGAN-GP critic loss of the progressive GAN.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, save_checkpoint
from .layers import Adam, EqualizedConv2d, EqualizedLinear, Module
from .numerics import Tensor
from .progan import NonFiniteLossError, wgan_gp_loss
from .resample import resample, resample_matrix

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

log = logging.getLogger(__name__)

SCALE = 4
LOSS_HEADER = ("phase", "step", "g_loss", "content", "d_loss")


@dataclass
class SrConfig:
    scale_factor: int = SCALE
    residual_blocks: int = 4
    content_weight: float = 1.0
    adversarial_weight: float = 1e-3
    pretrain_steps: int = 1000
    train_steps: int = 200
    seed: int = 0
    channels: int = 32
    critic_channels: int = 16
    batch_size: int = 8
    learning_rate: float = 1e-3
    gp_lambda: float = 10.0
    conv_mode: str = "vanilla"
    dtype: str = "float32"

    def __post_init__(self):
        if self.scale_factor != SCALE:
            raise ValueError(f"scale_factor is fixed at {SCALE}, got {self.scale_factor}")
        if self.content_weight < 0 or self.adversarial_weight < 0:
            raise ValueError("loss weights must be >= 0")
        for name in ("pretrain_steps", "train_steps", "residual_blocks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("channels", "critic_channels", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.conv_mode not in ("vanilla", "dsep"):
            raise ValueError(f"conv_mode must be 'vanilla' or 'dsep', got {self.conv_mode!r}")


@dataclass
class SrPair:
    lr_image: np.ndarray
    hr_image: np.ndarray

    def __post_init__(self):
        lr, hr = np.shape(self.lr_image), np.shape(self.hr_image)
        if len(lr) != 4 or len(hr) != 4 or lr[:2] != hr[:2]:
            raise ValueError(f"expected matching B x 3 x H x W batches, got {lr} and {hr}")
        if hr[2] != SCALE * lr[2] or hr[3] != SCALE * lr[3]:
            raise ValueError(f"hr extents {hr[2:]} are not {SCALE}x lr extents {lr[2:]}")

    @classmethod
    def from_hr(cls, hr: np.ndarray) -> "SrPair":
        """Pair each high-resolution image with its bicubic downsample."""
        hr = np.asarray(hr)
        h, w = hr.shape[-2:]
        if h % SCALE or w % SCALE:
            raise ValueError(f"hr extents {h}x{w} are not divisible by {SCALE}")
        lr = resample(hr, "bicubic", (h // SCALE, w // SCALE))
        return cls(lr.astype(hr.dtype), hr)


@functools.lru_cache(maxsize=32)
def _upsample_matrix(n: int) -> np.ndarray:
    return resample_matrix(n, SCALE * n, "bicubic")


def bicubic_upsample(x) -> Tensor:
    """Differentiable bicubic x4 upsampling (the generator's skip path)."""
    x = nx.as_tensor(x)
    h, w = x.shape[-2:]
    return nx.resize_linear(x, _upsample_matrix(h), _upsample_matrix(w))


class _ResBlock(Module):
    def __init__(self, c: int, rng, mode: str, dtype):
        self.conv1 = EqualizedConv2d(c, c, 3, rng, mode=mode, dtype=dtype)
        self.conv2 = EqualizedConv2d(c, c, 3, rng, mode=mode, dtype=dtype)

    def forward(self, h: Tensor) -> Tensor:
        return h + self.conv2(nx.leaky_relu(self.conv1(h)))


class _UpBlock(Module):
    def __init__(self, c: int, rng, mode: str, dtype):
        self.conv = EqualizedConv2d(c, c, 3, rng, mode=mode, dtype=dtype)

    def forward(self, h: Tensor) -> Tensor:
        return nx.leaky_relu(self.conv(nx.upsample_nearest(h, 2)))


class SrGenerator(Module):
    """Head conv, residual trunk with a long skip, two x2 upsampling blocks,
    zero-initialised output conv, plus the bicubic skip path."""

    def __init__(self, config: SrConfig):
        rng = np.random.default_rng([config.seed, 2000])
        c, mode, dt = config.channels, config.conv_mode, np.dtype(config.dtype)
        self.head = EqualizedConv2d(3, c, 3, rng, dtype=dt)
        self.blocks = [_ResBlock(c, rng, mode, dt) for _ in range(config.residual_blocks)]
        self.trunk = EqualizedConv2d(c, c, 3, rng, mode=mode, dtype=dt)
        # log2(4) = 2 doublings; fixed here so a bad factor fails at construction
        n_up = int(round(math.log2(config.scale_factor)))
        if 2**n_up != config.scale_factor:
            raise ValueError(f"scale factor {config.scale_factor} is not a power of 2")
        self.up = [_UpBlock(c, rng, mode, dt) for _ in range(n_up)]
        self.out = EqualizedConv2d(c, 3, 3, rng, gain=1.0, dtype=dt)
        self.out.weight.data[...] = 0.0

    def forward(self, x) -> Tensor:
        x = nx.as_tensor(x)
        h = nx.leaky_relu(self.head(x))
        t = h
        for blk in self.blocks:
            t = blk(t)
        h = h + self.trunk(t)
        for up in self.up:
            h = up(h)
        return bicubic_upsample(x) + self.out(h)


def sr_generate(generator: SrGenerator, lr_image) -> Tensor:
    """Upscale a B x 3 x R x R batch to B x 3 x 4R x 4R."""
    x = nx.as_tensor(lr_image)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected a B x 3 x H x W batch, got {x.shape}")
    if min(x.shape[-2:]) < 4:
        raise ValueError(f"input extents must be >= 4, got {x.shape[-2:]}")
    return generator(x)


class SrCritic(Module):
    """Small WGAN critic: conv + avg-pool stages, global mean, linear output."""

    def __init__(self, config: SrConfig, stages: int = 3):
        rng = np.random.default_rng([config.seed, 2001])
        c, dt = config.critic_channels, np.dtype(config.dtype)
        self.from_rgb = EqualizedConv2d(3, c, 1, rng, dtype=dt)
        self.convs = [EqualizedConv2d(c, c, 3, rng, mode=config.conv_mode, dtype=dt) for _ in range(stages)]
        self.out = EqualizedLinear(c, 1, rng, gain=1.0, dtype=dt)

    def forward(self, x) -> Tensor:
        h = nx.leaky_relu(self.from_rgb(nx.as_tensor(x)))
        for conv in self.convs:
            h = nx.leaky_relu(conv(h))
            if min(h.shape[-2:]) >= 2 and h.shape[-1] % 2 == 0 and h.shape[-2] % 2 == 0:
                h = nx.avg_pool(h, 2)
        return self.out(h.mean(axis=(2, 3)))


def content_loss(sr, hr) -> Tensor:
    sr, hr = nx.as_tensor(sr), nx.as_tensor(hr)
    d = sr - hr
    return (d * d).mean()


def srgan_loss(discriminator, sr_output, hr_target, content_weight: float, adversarial_weight: float,
               gp_lambda: float = 10.0, seed=None) -> tuple[Tensor, Tensor]:
    """``(g_loss, d_loss)``: weighted pixel MSE plus WGAN generator term, and
    the WGAN-GP critic loss separating ``hr_target`` from ``sr_output``."""
    sr, hr = nx.as_tensor(sr_output), nx.as_tensor(hr_target)
    if sr.shape != hr.shape:
        raise ValueError(f"sr {sr.shape} and hr {hr.shape} differ in shape")
    g_loss = content_loss(sr, hr) * content_weight
    if adversarial_weight > 0:
        g_loss = g_loss - discriminator(sr).mean() * adversarial_weight
    d_loss, _, _ = wgan_gp_loss(discriminator, hr.data, sr.data, gp_lambda, seed)
    return g_loss, d_loss


@dataclass
class SrResult:
    generator: SrGenerator
    critic: SrCritic
    losses: list[tuple[str, int, float, float, float]] = field(default_factory=list)
    checkpoint: Path | None = None


def sr_meta(config: SrConfig) -> dict[str, str]:
    meta = {"kind": "srgan"}
    meta.update({f"srgan.{k}": str(v) for k, v in asdict(config).items()})
    return meta


def save_srgan(path, g: SrGenerator, d: SrCritic, config: SrConfig) -> Path:
    params = {f"G.{k}": v for k, v in g.state_dict().items()}
    params.update({f"D.{k}": v for k, v in d.state_dict().items()})
    return save_checkpoint(path, params, None, sr_meta(config))


def config_from_meta(meta: dict[str, str]) -> SrConfig:
    """Rebuild the architecture-relevant config stored in a checkpoint."""
    kinds = {f.name: f.type for f in SrConfig.__dataclass_fields__.values()}
    kw = {}
    for key, value in meta.items():
        if not key.startswith("srgan."):
            continue
        name = key[len("srgan."):]
        if name not in kinds:
            continue
        t = str(kinds[name])
        kw[name] = int(value) if t == "int" else float(value) if t == "float" else value
    return SrConfig(**kw)


def restore_srgan(ckpt: Checkpoint, config: SrConfig | None = None) -> tuple[SrGenerator, SrCritic, SrConfig]:
    if ckpt.meta.get("kind") != "srgan":
        raise ValueError(f"checkpoint holds a {ckpt.meta.get('kind', 'unknown')!r} model, not srgan")
    config = config or config_from_meta(ckpt.meta)
    g, d = SrGenerator(config), SrCritic(config)
    g.load_state_dict({k[2:]: v for k, v in ckpt.params.items() if k.startswith("G.")})
    d.load_state_dict({k[2:]: v for k, v in ckpt.params.items() if k.startswith("D.")})
    return g, d, config


def upscale(generator: SrGenerator, lr_images: np.ndarray, batch: int = 16) -> np.ndarray:
    out = []
    with nx.no_grad():
        for i in range(0, len(lr_images), batch):
            out.append(sr_generate(generator, lr_images[i : i + batch]).data)
    if not out:
        return np.empty((0, 3, 0, 0))
    return np.concatenate(out)


def write_loss_csv(path, losses) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_HEADER)
        for phase, step, gl, cl, dl in losses:
            w.writerow([phase, step, repr(gl), repr(cl), "" if dl is None else repr(dl)])


def train_srgan(config: SrConfig, hr_dataset, out_dir=None) -> SrResult:
    """Content-only pretraining, then joint adversarial training.

    ``hr_dataset`` is an (N, 3, H, W) array in [-1, 1] with H, W divisible
    by 4; low-resolution inputs are its bicubic downsamples. With ``out_dir``
    set, writes ``srgan.ckpt`` and ``srgan_losses.csv``.
    """
    hr = np.asarray(hr_dataset)
    if hr.ndim != 4 or len(hr) == 0:
        raise ValueError("hr_dataset must be a non-empty (N, 3, H, W) array")
    dt = np.dtype(config.dtype)
    pair = SrPair.from_hr(hr.astype(dt))
    lr_all, hr_all = pair.lr_image.astype(dt), pair.hr_image
    n = len(hr_all)
    bsz = min(config.batch_size, n)
    g, d = SrGenerator(config), SrCritic(config)
    opt_g = Adam(g.parameters(), config.learning_rate, (0.9, 0.99))
    opt_d = Adam(d.parameters(), config.learning_rate, (0.0, 0.99))
    rng = np.random.default_rng([config.seed, 2002])
    result = SrResult(g, d)

    limiter = threadpool_limits(limits=1) if threadpool_limits else None
    try:
        total = config.pretrain_steps + config.train_steps
        for step in range(total):
            idx = rng.choice(n, bsz, replace=False)
            lr_b, hr_b = lr_all[idx], hr_all[idx]
            if step < config.pretrain_steps:
                phase = "pretrain"
                sr = sr_generate(g, lr_b)
                closs = content_loss(sr, hr_b)
                g_loss, dl = closs * config.content_weight, None
            else:
                phase = "joint"
                with nx.no_grad():
                    sr_fixed = sr_generate(g, lr_b).data
                d_loss, _, _ = wgan_gp_loss(d, hr_b, sr_fixed, config.gp_lambda, rng)
                opt_d.zero_grad()
                nx.backward(d_loss)
                opt_d.step()
                dl = d_loss.item()
                sr = sr_generate(g, lr_b)
                closs = content_loss(sr, hr_b)
                g_loss = closs * config.content_weight - d(sr).mean() * config.adversarial_weight
            opt_g.zero_grad()
            nx.backward(g_loss)
            opt_g.step()
            gl, cl = g_loss.item(), closs.item()
            if not (math.isfinite(gl) and (dl is None or math.isfinite(dl))):
                raise NonFiniteLossError(f"non-finite srgan loss at step {step}: g={gl}, d={dl}")
            result.losses.append((phase, step, gl, cl, dl))
    finally:
        if limiter is not None:
            limiter.restore_original_limits()

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_srgan(out / "srgan.ckpt", g, d, config)
        write_loss_csv(out / "srgan_losses.csv", result.losses)
    log.info("srgan: %d pretrain + %d joint steps", config.pretrain_steps, config.train_steps)
    return result
