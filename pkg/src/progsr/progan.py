"""Progressive GAN with switchable dense / depthwise-separable convolutions.

Resolution starts at 4x4 and doubles per stage. New blocks are faded in
on both networks, the discriminator sees a minibatch-stddev feature map
before its final block, all layers use equalized learning rate, and the
loss is WGAN-GP.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .checkpoint import GrowthState, save_checkpoint
from .imageio import save_grid
from .layers import Adam, EqualizedConv2d, EqualizedLinear, Module, pixel_norm
from .numerics import Tensor, make_rng

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

log = logging.getLogger(__name__)

TIMING_HEADER = ("stage", "resolution", "conv_mode", "seconds")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    latent_dim: int = 64
    base_channels: int = 64
    max_stage: int = 2
    epochs_per_stage: int = 50
    fade_fraction: float = 0.5
    batch_size: int = 16
    learning_rate: float = 1e-3
    d_learning_rate: float | None = None
    gp_lambda: float = 10.0
    conv_mode: str = "dsep"
    seed: int = 0
    beta1: float = 0.0
    beta2: float = 0.99
    min_channels: int = 8
    n_samples: int = 16
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("latent_dim", "base_channels", "epochs_per_stage", "batch_size", "min_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_stage < 0:
            raise ValueError("max_stage must be >= 0")
        if not 0.0 < self.fade_fraction <= 1.0:
            raise ValueError("fade_fraction must lie in (0, 1]")
        if self.conv_mode not in ("vanilla", "dsep"):
            raise ValueError(f"conv_mode must be 'vanilla' or 'dsep', got {self.conv_mode!r}")
        if self.gp_lambda < 0:
            raise ValueError("gp_lambda must be >= 0")
        if self.learning_rate <= 0 or (self.d_learning_rate is not None and self.d_learning_rate <= 0):
            raise ValueError("learning rates must be positive")

    @property
    def critic_lr(self) -> float:
        """Critic step size; defaults to the generator's."""
        return self.learning_rate if self.d_learning_rate is None else self.d_learning_rate

    def channels(self, stage: int) -> int:
        return max(self.min_channels, self.base_channels >> stage)


# -- growth schedule ---------------------------------------------------------


def fade_alpha(stage: int, epochs_done: float, config: TrainConfig) -> float:
    """Fade-in coefficient after ``epochs_done`` (possibly fractional) epochs of a stage."""
    if stage == 0:
        return 1.0
    ramp = config.fade_fraction * config.epochs_per_stage
    return float(min(1.0, epochs_done / ramp))


def schedule_step(state: GrowthState, config: TrainConfig) -> GrowthState:
    """Advance the schedule by one completed epoch."""
    epochs = state.epochs_in_stage + 1
    if epochs >= config.epochs_per_stage and state.stage < config.max_stage:
        return GrowthState(stage=state.stage + 1, alpha=0.0, epochs_in_stage=0, phase="fading",
                           images_seen=state.images_seen)
    alpha = fade_alpha(state.stage, epochs, config)
    return GrowthState(stage=state.stage, alpha=alpha, epochs_in_stage=epochs,
                       phase="stable" if alpha >= 1.0 else "fading", images_seen=state.images_seen)


def initial_state() -> GrowthState:
    return GrowthState(stage=0, alpha=1.0, epochs_in_stage=0, phase="stable")


# -- building blocks ---------------------------------------------------------


def minibatch_stddev(x: Tensor) -> Tensor:
    """Append the batch-averaged population stddev as one constant feature map."""
    b, _, h, w = x.shape
    mu = x.mean(axis=0, keepdims=True)
    var = ((x - mu) * (x - mu)).mean(axis=0)
    s = nx.sqrt(var).mean().reshape(1, 1, 1, 1)
    return nx.concat([x, nx.broadcast_to(s, (b, 1, h, w))], axis=1)


def fade_blend(coarse_path, fine_path, alpha: float):
    """``(1 - alpha) * coarse + alpha * fine``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    coarse_path, fine_path = nx.as_tensor(coarse_path), nx.as_tensor(fine_path)
    if coarse_path.shape != fine_path.shape:
        raise ValueError(f"fade paths differ in shape: {coarse_path.shape} vs {fine_path.shape}")
    return coarse_path * (1.0 - alpha) + fine_path * alpha


def _block_rng(config: TrainConfig, role: int, stage: int) -> np.random.Generator:
    # per-block streams so a grown network equals one built directly at that stage
    return np.random.default_rng([config.seed, role, stage])


class _GenBase(Module):
    def __init__(self, config: TrainConfig, rng):
        c = config.channels(0)
        dt = np.dtype(config.dtype)
        self.dense = EqualizedLinear(config.latent_dim, c * 16, rng, gain=math.sqrt(2) / 4, dtype=dt)
        self.conv = EqualizedConv2d(c, c, 3, rng, mode=config.conv_mode, dtype=dt)
        self._c = c

    def forward(self, z: Tensor) -> Tensor:
        h = self.dense(z).reshape(z.shape[0], self._c, 4, 4)
        h = pixel_norm(nx.leaky_relu(h))
        return pixel_norm(nx.leaky_relu(self.conv(h)))


class _GenBlock(Module):
    def __init__(self, config: TrainConfig, stage: int, rng):
        cin, cout = config.channels(stage - 1), config.channels(stage)
        dt = np.dtype(config.dtype)
        self.conv1 = EqualizedConv2d(cin, cout, 3, rng, mode=config.conv_mode, dtype=dt)
        self.conv2 = EqualizedConv2d(cout, cout, 3, rng, mode=config.conv_mode, dtype=dt)

    def forward(self, h: Tensor) -> Tensor:
        h = nx.upsample_nearest(h, 2)
        h = pixel_norm(nx.leaky_relu(self.conv1(h)))
        return pixel_norm(nx.leaky_relu(self.conv2(h)))


class Generator(Module):
    def __init__(self, config: TrainConfig):
        self._config = config
        rng = _block_rng(config, 0, 0)
        self.blocks = [_GenBase(config, rng)]
        self.to_rgb = [EqualizedConv2d(config.channels(0), 3, 1, rng, gain=1.0, dtype=np.dtype(config.dtype))]

    @property
    def stage(self) -> int:
        return len(self.blocks) - 1

    def grow(self) -> None:
        cfg = self._config
        s = self.stage + 1
        if s > cfg.max_stage:
            raise ValueError(f"cannot grow past max_stage={cfg.max_stage}")
        rng = _block_rng(cfg, 0, s)
        self.blocks.append(_GenBlock(cfg, s, rng))
        self.to_rgb.append(EqualizedConv2d(cfg.channels(s), 3, 1, rng, gain=1.0, dtype=np.dtype(cfg.dtype)))

    def forward(self, z, alpha: float = 1.0) -> Tensor:
        z = nx.as_tensor(z)
        z = z / nx.sqrt((z * z).sum(axis=1, keepdims=True) + 1e-12)
        h = self.blocks[0](z)
        prev = h
        for blk in self.blocks[1:]:
            prev = h
            h = blk(h)
        out = self.to_rgb[-1](h)
        if self.stage > 0 and alpha < 1.0:
            coarse = nx.upsample_nearest(self.to_rgb[-2](prev), 2)
            out = fade_blend(coarse, out, alpha)
        return out


class _DiscHead(Module):
    def __init__(self, config: TrainConfig, rng):
        c = config.channels(0)
        dt = np.dtype(config.dtype)
        self.conv = EqualizedConv2d(c + 1, c, 3, rng, mode=config.conv_mode, dtype=dt)
        self.dense = EqualizedLinear(c * 16, c, rng, dtype=dt)
        self.out = EqualizedLinear(c, 1, rng, gain=1.0, dtype=dt)

    def forward(self, h: Tensor) -> Tensor:
        h = minibatch_stddev(h)
        h = nx.leaky_relu(self.conv(h))
        h = nx.leaky_relu(self.dense(h.reshape(h.shape[0], -1)))
        return self.out(h)


class _DiscBlock(Module):
    def __init__(self, config: TrainConfig, stage: int, rng):
        cin, cout = config.channels(stage), config.channels(stage - 1)
        dt = np.dtype(config.dtype)
        self.conv1 = EqualizedConv2d(cin, cin, 3, rng, mode=config.conv_mode, dtype=dt)
        self.conv2 = EqualizedConv2d(cin, cout, 3, rng, mode=config.conv_mode, dtype=dt)

    def forward(self, h: Tensor) -> Tensor:
        h = nx.leaky_relu(self.conv1(h))
        h = nx.leaky_relu(self.conv2(h))
        return nx.avg_pool(h, 2)


class Discriminator(Module):
    def __init__(self, config: TrainConfig):
        self._config = config
        rng = _block_rng(config, 1, 0)
        self.head = _DiscHead(config, rng)
        self.blocks = [None]
        self.from_rgb = [EqualizedConv2d(3, config.channels(0), 1, rng, dtype=np.dtype(config.dtype))]

    @property
    def stage(self) -> int:
        return len(self.from_rgb) - 1

    def grow(self) -> None:
        cfg = self._config
        s = self.stage + 1
        if s > cfg.max_stage:
            raise ValueError(f"cannot grow past max_stage={cfg.max_stage}")
        rng = _block_rng(cfg, 1, s)
        self.blocks.append(_DiscBlock(cfg, s, rng))
        self.from_rgb.append(EqualizedConv2d(3, cfg.channels(s), 1, rng, dtype=np.dtype(cfg.dtype)))

    def forward(self, x, alpha: float = 1.0) -> Tensor:
        x = nx.as_tensor(x)
        s = self.stage
        res = 4 * 2**s
        if x.shape[1:] != (3, res, res):
            raise ValueError(f"discriminator at stage {s} expects (B, 3, {res}, {res}), got {x.shape}")
        h = nx.leaky_relu(self.from_rgb[s](x))
        if s > 0:
            h = self.blocks[s](h)
            if alpha < 1.0:
                coarse = nx.leaky_relu(self.from_rgb[s - 1](nx.avg_pool(x, 2)))
                h = fade_blend(coarse, h, alpha)
            for t in range(s - 1, 0, -1):
                h = self.blocks[t](h)
        return self.head(h)


def build_generator(config: TrainConfig, state: GrowthState, previous: Generator | None = None) -> Generator:
    """Generator at ``state.stage``; grows ``previous`` in place when given."""
    if state.stage > config.max_stage:
        raise ValueError(f"stage {state.stage} exceeds max_stage {config.max_stage}")
    net = previous if previous is not None else Generator(config)
    if net.stage > state.stage:
        raise ValueError("cannot shrink a generator")
    while net.stage < state.stage:
        net.grow()
    return net


def build_discriminator(config: TrainConfig, state: GrowthState,
                        previous: Discriminator | None = None) -> Discriminator:
    if state.stage > config.max_stage:
        raise ValueError(f"stage {state.stage} exceeds max_stage {config.max_stage}")
    net = previous if previous is not None else Discriminator(config)
    if net.stage > state.stage:
        raise ValueError("cannot shrink a discriminator")
    while net.stage < state.stage:
        net.grow()
    return net


# -- loss --------------------------------------------------------------------


def wgan_gp_loss(discriminator: Callable, real_batch, fake_batch, gp_lambda: float, seed=None):
    """Critic loss with gradient penalty on random real/fake interpolates.

    Returns ``(d_loss, g_loss, gp_term)``; ``gp_term`` already includes
    ``gp_lambda``. The penalty differentiates through the critic, so
    ``d_loss`` is differentiable with respect to the critic's parameters.
    """
    real, fake = nx.as_tensor(real_batch), nx.as_tensor(fake_batch)
    if real.shape != fake.shape:
        raise ValueError(f"real {real.shape} and fake {fake.shape} batches differ in shape")
    if gp_lambda < 0:
        raise ValueError("gp_lambda must be >= 0")
    d_real = discriminator(real)
    d_fake = discriminator(fake)
    d_loss = d_fake.mean() - d_real.mean()
    g_loss = -d_fake.mean()
    if gp_lambda > 0:
        rng = make_rng(seed)
        b = real.shape[0]
        eps = rng.uniform(size=(b,) + (1,) * (real.ndim - 1)).astype(real.dtype)
        x_hat = Tensor(eps * real.data + (1.0 - eps) * fake.data, requires_grad=True)
        with nx.enable_grad():
            d_hat = discriminator(x_hat)
            (g,) = nx.grad(d_hat.sum(), [x_hat], create_graph=True)
            norms = nx.sqrt((g * g).reshape(b, -1).sum(axis=1))
            gp_term = ((norms - 1.0) * (norms - 1.0)).mean() * gp_lambda
        d_loss = d_loss + gp_term
    else:
        gp_term = Tensor(np.zeros((), dtype=d_loss.dtype))
    return d_loss, g_loss, gp_term


# -- training ----------------------------------------------------------------


@dataclass
class StageTiming:
    stage: int
    resolution: int
    conv_mode: str
    seconds: float


@dataclass
class ProganResult:
    generator: Generator
    discriminator: Discriminator
    state: GrowthState
    timings: list[StageTiming] = field(default_factory=list)
    losses: list[tuple[int, int, float, float]] = field(default_factory=list)


def sample_latents(config: TrainConfig, n: int, rng) -> np.ndarray:
    return make_rng(rng).standard_normal((n, config.latent_dim)).astype(np.dtype(config.dtype))


def fixed_latents(config: TrainConfig, n: int | None = None) -> np.ndarray:
    return sample_latents(config, n or config.n_samples, np.random.default_rng([config.seed, 7]))


def generate(generator: Generator, latents: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    with nx.no_grad():
        for i in range(0, len(latents), batch):
            out.append(generator(latents[i : i + batch]).data)
    return np.concatenate(out, axis=0)


def stage_images(dataset, resolution: int) -> np.ndarray:
    """Images of ``dataset`` at one resolution.

    ``dataset`` may expose ``pyramid`` (res -> array), be such a mapping, or
    be a plain (N, 3, H, W) array, which is bicubic-downsampled on demand.
    """
    pyramid = getattr(dataset, "pyramid", dataset)
    if isinstance(pyramid, dict):
        if resolution not in pyramid:
            raise KeyError(f"dataset has no {resolution}x{resolution} level")
        return pyramid[resolution]
    arr = np.asarray(dataset)
    if arr.shape[-1] == resolution:
        return arr
    from .resample import bicubic_resize

    return bicubic_resize(arr, resolution)


def _single_thread():
    if threadpool_limits is None:  # pragma: no cover
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def _params_state(g: Generator, d: Discriminator) -> dict[str, np.ndarray]:
    out = {f"G.{k}": v for k, v in g.state_dict().items()}
    out.update({f"D.{k}": v for k, v in d.state_dict().items()})
    return out


def config_meta(config: TrainConfig, kind: str = "progan") -> dict[str, str]:
    meta = {"kind": kind}
    meta.update({f"progan.{k}": str(v) for k, v in asdict(config).items()})
    return meta


def save_progan(path, g: Generator, d: Discriminator, state: GrowthState, config: TrainConfig) -> Path:
    return save_checkpoint(path, _params_state(g, d), state, config_meta(config))


def restore_progan(ckpt, config: TrainConfig) -> tuple[Generator, Discriminator, GrowthState]:
    state = ckpt.growth_state
    g = build_generator(config, state)
    d = build_discriminator(config, state)
    g.load_state_dict({k[2:]: v for k, v in ckpt.params.items() if k.startswith("G.")})
    d.load_state_dict({k[2:]: v for k, v in ckpt.params.items() if k.startswith("D.")})
    return g, d, state


def append_timing(path: Path, row: StageTiming) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(TIMING_HEADER)
        w.writerow([row.stage, row.resolution, row.conv_mode, f"{row.seconds:.6f}"])


def train_progan(
    config: TrainConfig,
    dataset,
    out_dir=None,
    *,
    resume=None,
    on_stage_done: Callable[[int, "ProganResult"], None] | None = None,
) -> ProganResult:
    """Run the whole growth schedule, one stage at a time.

    Each stage has its own RNG stream and fresh optimizer state, so training
    resumed from a completed-stage checkpoint (``resume=(G, D, state)``)
    reproduces an uninterrupted run bitwise. With ``out_dir`` set, each stage
    writes ``stage<k>.ckpt``, ``samples_stage<k>.png`` and a ``timing.csv`` row.
    ``on_stage_done(stage, result)`` runs after every completed stage.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        g, d, state = resume
        start = state.stage + 1
    else:
        state = initial_state()
        g, d = build_generator(config, state), build_discriminator(config, state)
        start = 0
    result = ProganResult(g, d, state)
    dt = np.dtype(config.dtype)
    bsz = config.batch_size

    for stage in range(start, config.max_stage + 1):
        res = 4 * 2**stage
        images = np.asarray(stage_images(dataset, res), dtype=dt)
        n = len(images)
        if n < bsz:
            raise ValueError(f"dataset has {n} images, fewer than batch_size={bsz}")
        if images.shape[1:] != (3, res, res):
            raise ValueError(f"stage {stage} images have shape {images.shape[1:]}, expected (3, {res}, {res})")
        state = GrowthState(stage=stage, alpha=fade_alpha(stage, 0, config), epochs_in_stage=0,
                            phase="stable" if stage == 0 else "fading", images_seen=state.images_seen)
        g = build_generator(config, state, g)
        d = build_discriminator(config, state, d)
        opt_g = Adam(g.parameters(), config.learning_rate, (config.beta1, config.beta2))
        opt_d = Adam(d.parameters(), config.critic_lr, (config.beta1, config.beta2))
        rng = np.random.default_rng([config.seed, 1000 + stage])
        steps = n // bsz

        with _single_thread():
            t0 = time.monotonic()
            for epoch in range(config.epochs_per_stage):
                perm = rng.permutation(n)
                for i in range(steps):
                    alpha = fade_alpha(stage, epoch + i / steps, config)
                    real = images[perm[i * bsz : (i + 1) * bsz]]

                    with nx.no_grad():
                        fake = g(sample_latents(config, bsz, rng), alpha).data
                    d_loss, _, _ = wgan_gp_loss(lambda x: d(x, alpha), real, fake, config.gp_lambda, rng)
                    opt_d.zero_grad()
                    nx.backward(d_loss)
                    opt_d.step()

                    g_loss = -d(g(sample_latents(config, bsz, rng), alpha), alpha).mean()
                    opt_g.zero_grad()
                    nx.backward(g_loss)
                    opt_g.step()

                    dl, gl = d_loss.item(), g_loss.item()
                    if not (math.isfinite(dl) and math.isfinite(gl)):
                        if out is not None:
                            save_progan(out / f"diverged_stage{stage}.ckpt", g, d, state, config)
                        raise NonFiniteLossError(
                            f"non-finite loss at stage {stage}, epoch {epoch}, step {i}: d={dl}, g={gl}"
                        )
                    result.losses.append((stage, epoch, dl, gl))
                state.images_seen += steps * bsz
                state = schedule_step(state, config) if epoch + 1 < config.epochs_per_stage else state
            seconds = time.monotonic() - t0

        state = GrowthState(stage=stage, alpha=1.0, epochs_in_stage=config.epochs_per_stage,
                            phase="stable", images_seen=state.images_seen)
        timing = StageTiming(stage, res, config.conv_mode, seconds)
        result.timings.append(timing)
        log.info("stage %d (%dx%d, %s) done in %.2fs", stage, res, res, config.conv_mode, seconds)
        if out is not None:
            save_progan(out / f"stage{stage}.ckpt", g, d, state, config)
            save_grid(out / f"samples_stage{stage}.png", generate(g, fixed_latents(config)))
            append_timing(out / "timing.csv", timing)
        result.generator, result.discriminator, result.state = g, d, state
        if on_stage_done is not None:
            on_stage_done(stage, result)

    return result
