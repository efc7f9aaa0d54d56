"""Equalized-learning-rate layers, a minimal module tree and Adam."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import numerics as nx
from .convkit import conv2d, dsep_conv2d
from .numerics import Tensor

HE_GAIN = math.sqrt(2.0)


def equalized_scale(fan_in: int, gain: float = HE_GAIN) -> float:
    """Runtime multiplier for unit-variance raw weights: ``gain / sqrt(fan_in)``."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return gain / math.sqrt(fan_in)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Parameters are Tensor attributes with ``requires_grad``; children are
    Module attributes or lists of Modules. Attribute order fixes naming order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing}")
        for k, p in own.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class EqualizedLinear(Module):
    def __init__(self, in_features: int, out_features: int, rng, gain: float = HE_GAIN, dtype=np.float32):
        self.weight = parameter(rng.standard_normal((in_features, out_features)).astype(dtype))
        self.bias = parameter(np.zeros(out_features, dtype=dtype))
        self._scale = equalized_scale(in_features, gain)

    def forward(self, x: Tensor) -> Tensor:
        return x @ (self.weight * self._scale) + self.bias


class EqualizedConv2d(Module):
    """Same-padded stride-1 convolution, dense or depthwise-separable.

    In separable mode the depthwise stage is scaled with unit gain (it is
    linear and feeds straight into the pointwise stage); the layer's gain is
    applied once, on the pointwise stage.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng,
        mode: str = "vanilla",
        gain: float = HE_GAIN,
        dtype=np.float32,
    ):
        if mode not in ("vanilla", "dsep"):
            raise ValueError(f"unknown conv mode {mode!r}")
        self.mode = mode if kernel > 1 else "vanilla"
        self._padding = kernel // 2
        if self.mode == "vanilla":
            self.weight = parameter(rng.standard_normal((out_ch, in_ch, kernel, kernel)).astype(dtype))
            self._scale = equalized_scale(in_ch * kernel * kernel, gain)
        else:
            self.depthwise = parameter(rng.standard_normal((in_ch, 1, kernel, kernel)).astype(dtype))
            self.pointwise = parameter(rng.standard_normal((out_ch, in_ch, 1, 1)).astype(dtype))
            self._dw_scale = equalized_scale(kernel * kernel, 1.0)
            self._pw_scale = equalized_scale(in_ch, gain)
        self.bias = parameter(np.zeros(out_ch, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "vanilla":
            y = conv2d(x, self.weight * self._scale, padding=self._padding)
        else:
            y = dsep_conv2d(
                x, self.depthwise * self._dw_scale, self.pointwise * self._pw_scale, padding=self._padding
            )
        return y + self.bias.reshape(1, -1, 1, 1)


def pixel_norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize each pixel's feature vector to unit RMS over channels."""
    return x / nx.sqrt((x * x).mean(axis=1, keepdims=True) + eps)


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.0, 0.99), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        nx.zero_grad(self.params)
