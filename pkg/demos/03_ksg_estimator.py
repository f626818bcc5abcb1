"""Kraskov k-NN mutual information against closed-form Gaussian values, and on the spiral.

Run: python demos/03_ksg_estimator.py
"""
# %%
import math

import numpy as np

from stib.data import SpiralConfig, gen_spiral
from stib.miest import KsgConfig, gaussian_mi_closed_form, ksg_mi

rng = np.random.default_rng(1)
for rho in (0.0, 0.3, 0.6, 0.9):
    a = rng.standard_normal(5000)
    b = rho * a + math.sqrt(1 - rho**2) * rng.standard_normal(5000)
    est = ksg_mi(a[:, None], b[:, None], KsgConfig(k=3))
    print(f"rho={rho:.1f}  KSG {est:6.3f} bits   exact {gaussian_mi_closed_form(rho):6.3f}")

# %% how much each input direction says about the spiral target
ds = gen_spiral(SpiralConfig(4096, seed=2))
s = 2 * ds.x[:, 0] + ds.x[:, 1]
w = ds.x[:, 0] - 2 * ds.x[:, 1]
print("I(x; y) =", round(ksg_mi(ds.x, ds.y), 2), "bits")
print("I(s; y) =", round(ksg_mi(s[:, None], ds.y), 2), "bits")
print("I(w; y) =", round(ksg_mi(w[:, None], ds.y), 2), "bits  (small: only via the input noise on s)")
