"""Dense and depthwise-separable 2-D convolution plus their multiplication cost model.

Both convolution flavours are exposed as differentiable ops on
:class:`~progsr.numerics.Tensor`. Each is implemented as a closed triple of
numpy kernels (forward, adjoint in the input, adjoint in the weights) whose
backward rules refer only to each other, which keeps second derivatives
available for gradient penalties.

Layout is NCHW; kernels are cross-correlated (no flip).
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import Tensor, as_tensor, make_rng, no_grad

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


@dataclass(frozen=True)
class ConvGeometry:
    """Square convolution geometry.

    ``d_f`` input extent, ``d_k`` kernel extent, ``d_g`` output extent,
    ``m`` input channels, ``n`` output channels. ``d_g`` is derived when
    omitted and validated when given.
    """

    d_f: int
    d_k: int
    m: int
    n: int
    stride: int = 1
    padding: int = 0
    d_g: int = field(default=None)

    def __post_init__(self):
        for name in ("d_f", "d_k", "m", "n", "stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        expect = (self.d_f + 2 * self.padding - self.d_k) // self.stride + 1
        if expect < 1:
            raise ValueError(f"kernel {self.d_k} does not fit input {self.d_f} with padding {self.padding}")
        if self.d_g is None:
            object.__setattr__(self, "d_g", expect)
        elif self.d_g != expect:
            raise ValueError(f"d_g={self.d_g} inconsistent with geometry (expected {expect})")

    @classmethod
    def same(cls, m: int, n: int, d_k: int, d_f: int) -> "ConvGeometry":
        """Stride-1 geometry padded so that ``d_g == d_f`` (odd ``d_k`` only)."""
        if d_k % 2 == 0:
            raise ValueError("same padding needs an odd kernel size")
        return cls(d_f=d_f, d_k=d_k, m=m, n=n, stride=1, padding=d_k // 2)


# -- numpy kernels: dense ----------------------------------------------------


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_size(h: int, k: int, s: int, p: int) -> int:
    return (h + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, k: int, s: int, p: int) -> tuple[np.ndarray, int, int]:
    b, c, h, w = x.shape
    ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
    win = sliding_window_view(_pad(x, p), (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def _is_pointwise(k: int, s: int, p: int) -> bool:
    return k == 1 and s == 1 and p == 0


def _np_conv(x, w, s, p):
    n, c, k, _ = w.shape
    b = x.shape[0]
    if _is_pointwise(k, s, p):
        y = np.tensordot(w.reshape(n, c), x, axes=([1], [1]))
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    cols, ho, wo = _im2col(x, k, s, p)
    y = cols @ w.reshape(n, -1).T
    return np.ascontiguousarray(y.reshape(b, ho, wo, n).transpose(0, 3, 1, 2))


def _np_conv_bx(g, w, x_shape, s, p):
    n, c, k, _ = w.shape
    if _is_pointwise(k, s, p):
        gx = np.tensordot(w.reshape(n, c), g, axes=([0], [1]))
        return np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
    b, _, ho, wo = g.shape
    h, wd = x_shape[2], x_shape[3]
    if s == 1 and p <= k - 1:
        # stride-1 adjoint is a full correlation with the flipped, transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _np_conv(g, wt, 1, k - 1 - p)
    gcols = g.transpose(0, 2, 3, 1).reshape(-1, n) @ w.reshape(n, -1)
    gcols = np.ascontiguousarray(gcols.reshape(b, ho, wo, c, k, k).transpose(4, 5, 0, 3, 1, 2))
    gxp = np.zeros((b, c, h + 2 * p, wd + 2 * p), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += gcols[i, j]
    return np.ascontiguousarray(gxp[:, :, p : p + h, p : p + wd])


def _np_conv_bw(x, g, w_shape, s, p):
    n, c, k, _ = w_shape
    if _is_pointwise(k, s, p):
        gw = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))
        return gw.reshape(w_shape)
    cols, _, _ = _im2col(x, k, s, p)
    gw = g.transpose(1, 0, 2, 3).reshape(n, -1) @ cols
    return gw.reshape(w_shape)


# -- numpy kernels: depthwise ------------------------------------------------


def _np_dw(x, kern, s, p):
    b, c, h, w = x.shape
    k = kern.shape[-1]
    ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
    xp = _pad(x, p)
    y = np.zeros((b, c, ho, wo), dtype=np.result_type(x, kern))
    tmp = np.empty_like(y)
    for i in range(k):
        for j in range(k):
            np.multiply(
                xp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s],
                kern[:, 0, i, j][None, :, None, None],
                out=tmp,
            )
            y += tmp
    return y


def _np_dw_bx(g, kern, x_shape, s, p):
    b, c, ho, wo = g.shape
    k = kern.shape[-1]
    h, w = x_shape[2], x_shape[3]
    gxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += (
                g * kern[:, 0, i, j][None, :, None, None]
            )
    return np.ascontiguousarray(gxp[:, :, p : p + h, p : p + w])


def _np_dw_bk(x, g, k_shape, s, p):
    _, _, ho, wo = g.shape
    k = k_shape[-1]
    xp = _pad(x, p)
    gk = np.empty(k_shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gk[:, 0, i, j] = np.einsum(
                "bchw,bchw->c",
                xp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s],
                g,
            )
    return gk


# -- differentiable ops ------------------------------------------------------


def _conv_op(x: Tensor, w: Tensor, s: int, p: int) -> Tensor:
    def back(g):
        gx = _conv_bx_op(g, w, x.shape, s, p) if x.requires_grad else None
        gw = _conv_bw_op(x, g, w.shape, s, p) if w.requires_grad else None
        return gx, gw

    return Tensor._make(_np_conv(x.data, w.data, s, p), (x, w), back, "conv2d")


def _conv_bx_op(g: Tensor, w: Tensor, x_shape, s, p) -> Tensor:
    def back(u):
        gg = _conv_op(u, w, s, p) if g.requires_grad else None
        gw = _conv_bw_op(u, g, w.shape, s, p) if w.requires_grad else None
        return gg, gw

    return Tensor._make(_np_conv_bx(g.data, w.data, x_shape, s, p), (g, w), back, "conv2d_bx")


def _conv_bw_op(x: Tensor, g: Tensor, w_shape, s, p) -> Tensor:
    def back(v):
        gx = _conv_bx_op(g, v, x.shape, s, p) if x.requires_grad else None
        gg = _conv_op(x, v, s, p) if g.requires_grad else None
        return gx, gg

    return Tensor._make(_np_conv_bw(x.data, g.data, w_shape, s, p), (x, g), back, "conv2d_bw")


def _dw_op(x: Tensor, kern: Tensor, s: int, p: int) -> Tensor:
    def back(g):
        gx = _dw_bx_op(g, kern, x.shape, s, p) if x.requires_grad else None
        gk = _dw_bk_op(x, g, kern.shape, s, p) if kern.requires_grad else None
        return gx, gk

    return Tensor._make(_np_dw(x.data, kern.data, s, p), (x, kern), back, "depthwise")


def _dw_bx_op(g: Tensor, kern: Tensor, x_shape, s, p) -> Tensor:
    def back(u):
        gg = _dw_op(u, kern, s, p) if g.requires_grad else None
        gk = _dw_bk_op(u, g, kern.shape, s, p) if kern.requires_grad else None
        return gg, gk

    return Tensor._make(_np_dw_bx(g.data, kern.data, x_shape, s, p), (g, kern), back, "depthwise_bx")


def _dw_bk_op(x: Tensor, g: Tensor, k_shape, s, p) -> Tensor:
    def back(v):
        gx = _dw_bx_op(g, v, x.shape, s, p) if x.requires_grad else None
        gg = _dw_op(x, v, s, p) if g.requires_grad else None
        return gx, gg

    return Tensor._make(_np_dw_bk(x.data, g.data, k_shape, s, p), (x, g), back, "depthwise_bk")


def _resolve(x: Tensor, geometry, stride, padding, k: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {x.shape}")
    if geometry is None:
        return stride, padding
    if x.shape[1] != geometry.m:
        raise ValueError(f"input has {x.shape[1]} channels, geometry says m={geometry.m}")
    if x.shape[2] != geometry.d_f or x.shape[3] != geometry.d_f:
        raise ValueError(f"input extent {x.shape[2:]} != d_f={geometry.d_f}")
    if k != geometry.d_k:
        raise ValueError(f"kernel extent {k} != d_k={geometry.d_k}")
    return geometry.stride, geometry.padding


def conv2d(x, kernel, geometry: ConvGeometry | None = None, *, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense cross-correlation of ``x`` (B, M, H, W) with ``kernel`` (N, M, K, K)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be N x M x K x K, got {kernel.shape}")
    s, p = _resolve(x, geometry, stride, padding, kernel.shape[2])
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"input channels {x.shape[1]} != kernel channels {kernel.shape[1]}")
    if geometry is not None and kernel.shape[0] != geometry.n:
        raise ValueError(f"kernel has {kernel.shape[0]} filters, geometry says n={geometry.n}")
    if _out_size(x.shape[2], kernel.shape[2], s, p) < 1:
        raise ValueError("kernel larger than padded input")
    return _conv_op(x, kernel, s, p)


def depthwise_conv2d(x, kernel, *, stride: int = 1, padding: int = 0) -> Tensor:
    """One K x K filter per input channel; ``kernel`` is (M, 1, K, K)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[1] != 1 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"depthwise kernel must be M x 1 x K x K, got {kernel.shape}")
    if x.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise ValueError(f"input {x.shape} does not match depthwise kernel {kernel.shape}")
    return _dw_op(x, kernel, stride, padding)


def dsep_conv2d(
    x,
    depthwise_kernel,
    pointwise_kernel,
    geometry: ConvGeometry | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Depthwise stage (carries stride/padding) followed by a 1x1 channel mix."""
    x = as_tensor(x)
    depthwise_kernel, pointwise_kernel = as_tensor(depthwise_kernel), as_tensor(pointwise_kernel)
    s, p = _resolve(x, geometry, stride, padding, depthwise_kernel.shape[-1])
    if pointwise_kernel.ndim != 4 or pointwise_kernel.shape[2:] != (1, 1):
        raise ValueError(f"pointwise kernel must be N x M x 1 x 1, got {pointwise_kernel.shape}")
    if pointwise_kernel.shape[1] != depthwise_kernel.shape[0]:
        raise ValueError("pointwise kernel input channels must match depthwise channels")
    if geometry is not None and pointwise_kernel.shape[0] != geometry.n:
        raise ValueError(f"pointwise kernel has {pointwise_kernel.shape[0]} filters, geometry says n={geometry.n}")
    mid = depthwise_conv2d(x, depthwise_kernel, stride=s, padding=p)
    return _conv_op(mid, pointwise_kernel, 1, 0)


# -- cost model --------------------------------------------------------------


def mult_count(geometry: ConvGeometry, mode: str, *, corrected: bool = False) -> int:
    """Multiplications for one image.

    ``vanilla`` is ``N*K^2*F^2*M`` as printed (input extent), or with
    ``corrected=True`` the true count ``N*K^2*G^2*M`` over output sites; the
    two agree whenever ``d_g == d_f``. ``dsep`` is ``M*G^2*(K^2 + N)``.
    """
    g = geometry
    if mode == "vanilla":
        extent = g.d_g if corrected else g.d_f
        return g.n * g.d_k * g.d_k * extent * extent * g.m
    if mode == "dsep":
        return g.m * g.d_g * g.d_g * (g.d_k * g.d_k + g.n)
    raise ValueError(f"unknown mode {mode!r}; expected 'vanilla' or 'dsep'")


def speedup_ratio(geometry: ConvGeometry) -> float:
    """Separable-to-dense multiplication ratio, ``1/N + 1/K^2``."""
    if geometry.d_f != geometry.d_g:
        raise ValueError(
            "the ratio 1/N + 1/K^2 cancels the spatial terms, which only holds for "
            f"same-padded geometry (d_f == d_g); got d_f={geometry.d_f}, d_g={geometry.d_g}"
        )
    return 1.0 / geometry.n + 1.0 / (geometry.d_k * geometry.d_k)


@dataclass
class CostBreakdown:
    vanilla_mults: int
    dsep_mults: int
    ratio: float
    vanilla_mults_corrected: int


def cost_breakdown(geometry: ConvGeometry) -> CostBreakdown:
    vanilla = mult_count(geometry, "vanilla")
    dsep = mult_count(geometry, "dsep")
    return CostBreakdown(
        vanilla_mults=vanilla,
        dsep_mults=dsep,
        ratio=dsep / vanilla,
        vanilla_mults_corrected=mult_count(geometry, "vanilla", corrected=True),
    )


def format_cost_table(geometry: ConvGeometry) -> str:
    cb = cost_breakdown(geometry)
    rows = [("quantity", "formula", "value"),
            ("vanilla_mults", "N*K*K*F*F*M", str(cb.vanilla_mults)),
            ("dsep_mults", "M*G*G*(K*K+N)", str(cb.dsep_mults))]
    if geometry.d_f == geometry.d_g:
        rows.append(("ratio", "1/N + 1/(K*K)", f"{speedup_ratio(geometry):.6f}"))
    else:
        rows.append(("ratio", "dsep/vanilla (G != F)", f"{cb.ratio:.6f}"))
        rows.append(("vanilla_mults_corrected", "N*K*K*G*G*M", str(cb.vanilla_mults_corrected)))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join("  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in rows)


# -- micro-benchmark ---------------------------------------------------------


@dataclass
class ConvBench:
    geometry: ConvGeometry
    vanilla_median: float
    dsep_median: float
    repeats: int


def bench_conv(geometry: ConvGeometry, repeats: int = 10, seed=0, batch: int = 1, warmup: int = 2) -> ConvBench:
    """Median forward wall-clock of both convolution modes on identical inputs.

    BLAS is pinned to one thread while timing.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    rng = make_rng(seed)
    g = geometry
    x = rng.standard_normal((batch, g.m, g.d_f, g.d_f)).astype(np.float32)
    w = rng.standard_normal((g.n, g.m, g.d_k, g.d_k)).astype(np.float32)
    dw = rng.standard_normal((g.m, 1, g.d_k, g.d_k)).astype(np.float32)
    pw = rng.standard_normal((g.n, g.m, 1, 1)).astype(np.float32)

    def run_vanilla():
        conv2d(x, w, g)

    def run_dsep():
        dsep_conv2d(x, dw, pw, g)

    def timed(fn):
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        return statistics.median(samples)

    with no_grad(), _single_thread():
        vanilla = timed(run_vanilla)
        dsep = timed(run_dsep)
    return ConvBench(geometry=g, vanilla_median=vanilla, dsep_median=dsep, repeats=repeats)


def _single_thread():
    if threadpool_limits is None:  # pragma: no cover
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=1)
