"""Default class-probability model for the inception score.

A two-conv network trained on four procedurally labelled image families
(one blob, many blobs, near-horizontal stripes, near-vertical stripes).
Any callable mapping (N, 3, H, W) images in [0, 1] to (N, K) probabilities
can replace it.
"""

from __future__ import annotations

import functools

import numpy as np

from . import numerics as nx
from .datasets import render_blobs, render_stripes
from .layers import Adam, EqualizedConv2d, EqualizedLinear, Module
from .resample import bicubic_resize

CLASSES = ("one-blob", "many-blobs", "horizontal-stripes", "vertical-stripes")
INPUT_RES = 16


def labelled_images(count: int, seed: int = 0, res: int = INPUT_RES) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 99])
    labels = np.arange(count) % len(CLASSES)
    images = np.empty((count, 3, res, res))
    for i, y in enumerate(labels):
        if y == 0:
            images[i] = render_blobs(rng, res, n_blobs=1)
        elif y == 1:
            images[i] = render_blobs(rng, res, n_blobs=int(rng.integers(4, 7)))
        elif y == 2:
            images[i] = render_stripes(rng, res, angle=rng.uniform(-0.3, 0.3))
        else:
            images[i] = render_stripes(rng, res, angle=np.pi / 2 + rng.uniform(-0.3, 0.3))
    return images, labels


class SmallConvNet(Module):
    def __init__(self, n_classes: int, rng, width: int = 8):
        self.conv1 = EqualizedConv2d(3, width, 3, rng)
        self.conv2 = EqualizedConv2d(width, 2 * width, 3, rng)
        self.fc = EqualizedLinear(2 * width * 16, n_classes, rng, gain=1.0)

    def forward(self, x):
        h = nx.avg_pool(nx.leaky_relu(self.conv1(x)), 2)
        h = nx.avg_pool(nx.leaky_relu(self.conv2(h)), 2)
        return self.fc(h.reshape(h.shape[0], -1))


class SyntheticClassifier:
    def __init__(self, net: SmallConvNet):
        self.net = net

    def logits(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.shape[-1] != INPUT_RES or x.shape[-2] != INPUT_RES:
            x = bicubic_resize(x, INPUT_RES)
        x = (x * 2.0 - 1.0).astype(np.float32)
        with nx.no_grad():
            return self.net(x).data.astype(np.float64)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        z = self.logits(images)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)


def train_classifier(seed: int = 0, steps: int = 300, batch: int = 32, n_train: int = 512) -> SyntheticClassifier:
    images, labels = labelled_images(n_train, seed)
    x_all = (images * 2.0 - 1.0).astype(np.float32)
    onehot = np.eye(len(CLASSES), dtype=np.float32)[labels]
    rng = np.random.default_rng([seed, 100])
    net = SmallConvNet(len(CLASSES), rng)
    opt = Adam(net.parameters(), lr=3e-3, betas=(0.9, 0.99))
    for _ in range(steps):
        idx = rng.choice(n_train, batch, replace=False)
        logp = nx.log_softmax(net(x_all[idx]), axis=1)
        loss = -(logp * onehot[idx]).sum(axis=1).mean()
        opt.zero_grad()
        nx.backward(loss)
        opt.step()
    return SyntheticClassifier(net)


@functools.lru_cache(maxsize=4)
def default_classifier(seed: int = 0) -> SyntheticClassifier:
    return train_classifier(seed)
