"""Dense tensors with reverse-mode differentiation.

Every backward rule is written in terms of other differentiable ops, so
gradients can themselves be differentiated (``grad(..., create_graph=True)``).
The gradient penalty in the WGAN-GP loss depends on this.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_state = {"grad_enabled": True}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = enabled
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def enable_grad():
    return _grad_mode(True)


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


def make_rng(seed) -> np.random.Generator:
    """The one sanctioned way to obtain randomness: an explicit, seeded generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- construction helpers ------------------------------------------------

    @classmethod
    def _make(cls, data, parents: Sequence["Tensor"], backward, op: str = "") -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- array protocol ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# -- broadcasting ------------------------------------------------------------


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"shapes {a} and {b} cannot be broadcast together") from None


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    data = np.broadcast_to(a.data, shape)
    return Tensor._make(data, (a,), lambda g: (sum_to(g, src),), "broadcast_to")


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum ``a`` down to ``shape``; the adjoint of broadcasting."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    data = a.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = a.shape
    return Tensor._make(data, (a,), lambda g: (broadcast_to(g, src),), "sum_to")


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)), "add"
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(-g, sb)), "sub"
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def back(g):
        ga = sum_to(g * b, a.shape) if a.requires_grad else None
        gb = sum_to(g * a, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), back, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def back(g):
        ga = sum_to(g / b, a.shape) if a.requires_grad else None
        gb = sum_to(-(g * a) / (b * b), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data / b.data, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    if p == 1:
        return a

    def back(g):
        return (g * (power(a, p - 1) * p),)

    return Tensor._make(a.data**p, (a,), back, "pow")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        return (g * out,)

    out = Tensor._make(out_data, (a,), back, "exp")
    return out


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a,), "log")


def safe_reciprocal(a: Tensor) -> Tensor:
    """1/a, with 0 mapped to 0 (used where the true derivative is a removable singularity)."""
    nz = a.data != 0
    data = np.zeros_like(a.data)
    np.divide(1, a.data, out=data, where=nz)

    def back(g):
        return (-(g * out * out),)

    out = Tensor._make(data, (a,), back, "safe_reciprocal")
    return out


def sqrt(a: Tensor) -> Tensor:
    """Square root whose derivative at exactly 0 is taken as 0 rather than inf."""
    out_data = np.sqrt(a.data)

    def back(g):
        return (g * safe_reciprocal(out) * 0.5,)

    out = Tensor._make(out_data, (a,), back, "sqrt")
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    m = Tensor(mask)
    return Tensor._make(a.data * mask, (a,), lambda g: (g * m,), "leaky_relu")


def where_const(cond: np.ndarray, a: Tensor, fill: float = 0.0) -> Tensor:
    """Select ``a`` where ``cond`` holds, else a constant."""
    m = Tensor(cond.astype(a.dtype))
    return a * m + Tensor(np.where(cond, 0.0, fill).astype(a.dtype))


# -- reductions & shape ------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def back(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, src),)

    return Tensor._make(np.asarray(data), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    data = a.data.reshape(shape)
    return Tensor._make(data, (a,), lambda g: (reshape(g, src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(
        a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),), "transpose"
    )


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape
    return Tensor._make(
        a.data[idx], (a,), lambda g: (scatter(g, idx, src),), "getitem"
    )


def scatter(g: Tensor, idx, shape: tuple) -> Tensor:
    """Place ``g`` into a zero array of ``shape`` at ``idx`` (adjoint of indexing)."""
    data = np.zeros(shape, dtype=g.dtype)
    if _is_fancy(idx):
        np.add.at(data, idx, g.data)
    else:
        data[idx] = g.data
    return Tensor._make(data, (g,), lambda gg: (getitem(gg, idx),), "scatter")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return Tensor._make(data, tensors, back, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), back, "matmul")


# -- image-shaped primitives -------------------------------------------------


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """NCHW nearest-neighbour upsampling by an integer factor."""
    b, c, h, w = a.shape
    data = np.broadcast_to(
        a.data[:, :, :, None, :, None], (b, c, h, factor, w, factor)
    ).reshape(b, c, h * factor, w * factor)
    return Tensor._make(data, (a,), lambda g: (sum_pool(g, factor),), "upsample")


def sum_pool(a: Tensor, factor: int = 2) -> Tensor:
    b, c, h, w = a.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial extents {h}x{w} not divisible by {factor}")
    data = a.data.reshape(b, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))
    return Tensor._make(data, (a,), lambda g: (upsample_nearest(g, factor),), "sum_pool")


def avg_pool(a: Tensor, factor: int = 2) -> Tensor:
    return sum_pool(a, factor) * (1.0 / (factor * factor))


def resize_linear(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply fixed matrices on both spatial axes: ``rows @ x @ cols.T``.

    Any separable linear resampler (bicubic, bilinear, ...) can be expressed
    this way; the matrices come from :mod:`progsr.resample`.
    """
    rows = np.asarray(rows, dtype=a.dtype)
    cols = np.asarray(cols, dtype=a.dtype)
    data = np.matmul(np.matmul(rows, a.data), cols.T)
    return Tensor._make(
        data, (a,), lambda g: (resize_linear(g, rows.T, cols.T),), "resize_linear"
    )


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    z = a - shift
    return z - log(tsum(exp(z), axis=axis, keepdims=True))


# -- differentiation ---------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(output: Tensor, seed: Tensor, create_graph: bool) -> dict[int, Tensor]:
    grads: dict[int, Tensor] = {id(output): seed}
    with _grad_mode(create_graph):
        for node in reversed(_toposort(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{node._op}: gradient shape {pg.shape} != input shape {parent.shape}"
                    )
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return grads


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """d(output)/d(inputs). Inputs the output does not depend on get zeros."""
    if grad_output is None:
        if output.size != 1:
            raise ValueError("grad of a non-scalar output needs grad_output")
        grad_output = Tensor(np.ones(output.shape, dtype=output.dtype))
    if not output.requires_grad:
        return [Tensor(np.zeros_like(x.data)) for x in inputs]
    grads = _propagate(output, grad_output, create_graph)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        result.append(g if g is not None else Tensor(np.zeros_like(x.data)))
    return result


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every participating leaf and return the mapping.

    Grads are overwritten on each call, never accumulated. Leaves that do not
    participate (detached or not requiring grad) are absent from the map.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    leaves = [n for n in _toposort(loss) if n._backward is None]
    seed = Tensor(np.ones(loss.shape, dtype=loss.dtype))
    grads = _propagate(loss, seed, create_graph=False)
    out = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            continue
        leaf.grad = np.array(g.data, copy=True)
        out[leaf] = leaf.grad
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class GradReport:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> GradReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    y = f(probe)
    if not np.all(np.isfinite(y.data)):
        raise ValueError("f(x) is not finite")
    if y.size != 1:
        raise ValueError("grad_check needs a scalar-valued f")
    (g,) = grad(y, [probe])
    analytic = np.asarray(g.data, dtype=np.float64).ravel()

    # f may differentiate internally (gradient penalties), so grad mode stays on
    numeric = np.empty(base.size)
    flat = base.ravel()
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * h)

    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradReport(
        max_rel_error=float(rel[worst]) if rel.size else 0.0,
        worst_index=worst,
        analytic=float(analytic[worst]) if rel.size else 0.0,
        numeric=float(numeric[worst]) if rel.size else 0.0,
    )
