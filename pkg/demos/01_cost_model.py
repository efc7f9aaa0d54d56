"""Multiplication counts of dense vs depthwise-separable convolution.

Run: python demos/01_cost_model.py
"""
# %%
import numpy as np

from progsr.convkit import ConvGeometry, bench_conv, cost_breakdown, format_cost_table

# %% [markdown]
# One 3x3 layer, 64 -> 128 channels on a 32x32 map. The separable
# factorisation pays K^2 per input channel plus one 1x1 mix, so the
# ratio is 1/N + 1/K^2.

# %%
geo = ConvGeometry.same(m=64, n=128, d_k=3, d_f=32)
print(format_cost_table(geo))

# %%
# the ratio is set by N and K only; input channels and map size cancel
for n in (1, 8, 64, 512):
    for k in (1, 3, 5):
        cb = cost_breakdown(ConvGeometry.same(16, n, k, 16))
        print(f"N={n:4d} K={k}  ratio={cb.ratio:.4f}  1/N+1/K^2={1 / n + 1 / k**2:.4f}")

# %%
# counts are not wall-clock: time both forms on this machine
b = bench_conv(ConvGeometry.same(64, 64, 3, 32), repeats=7)
print(f"vanilla {b.vanilla_median * 1e3:.2f} ms, separable {b.dsep_median * 1e3:.2f} ms, "
      f"measured speedup {b.vanilla_median / b.dsep_median:.2f}x")
