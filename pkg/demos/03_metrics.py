"""Sliced Wasserstein distance, MS-SSIM and inception score on toy sets.

Run: python demos/03_metrics.py
"""
# %%
import numpy as np

from progsr.datasets import SyntheticDatasetSpec, render_dataset
from progsr.metrics import EvalConfig, evaluate_arrays, format_table, inception_score, ms_ssim

# %%
blobs = render_dataset(SyntheticDatasetSpec(64, 32, seed=0))
more_blobs = render_dataset(SyntheticDatasetSpec(64, 32, seed=1))
stripes = render_dataset(SyntheticDatasetSpec(64, 32, kind="gradient-stripe", seed=0))
noise = np.random.default_rng(0).random((64, 3, 32, 32))

# %%
# SWD is small between two draws of the same distribution and grows as
# the distributions drift apart
cfg = EvalConfig(metrics=("swd", "msssim"), max_patches=1024, n_projections=128)
columns = {
    "same blobs": evaluate_arrays(blobs, blobs, cfg),
    "other blobs": evaluate_arrays(blobs, more_blobs, cfg),
    "stripes": evaluate_arrays(blobs, stripes, cfg),
    "noise": evaluate_arrays(blobs, noise, cfg),
}
print(format_table(columns))

# %%
# MS-SSIM of constant images reduces to the luminance term at the coarsest scale
print("constant 0.2 vs 0.6:", ms_ssim(np.full((1, 32, 32), 0.2), np.full((1, 32, 32), 0.6)))

# %%
# inception score lies between 1 (no confidence or no diversity) and K
print("uniform rows  :", inception_score(np.full((40, 4), 0.25), 4))
print("one class     :", inception_score(np.tile([1.0, 0, 0, 0], (40, 1)), 4))
print("4 even classes:", inception_score(np.tile(np.eye(4), (10, 1)), 2))
