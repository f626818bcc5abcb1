"""The spiral benchmark: two uniform inputs, one hidden combination, a 2-D spiral target.

Run: python demos/01_spiral_data.py
"""
# %%
import numpy as np

from stib.data import SpiralConfig, gen_spiral, save_csv, load_csv

ds = gen_spiral(SpiralConfig(n=8192, seed=7))
print("x range", ds.x.min(axis=0), ds.x.max(axis=0))
print("y std  ", ds.y.std(axis=0))
print("fingerprint", ds.fingerprint())

# %% the target only depends on s = 2*x0 + x1; w = x0 - 2*x1 is the symmetry direction
s = 2 * ds.x[:, 0] + ds.x[:, 1]
w = ds.x[:, 0] - 2 * ds.x[:, 1]
radius = np.hypot(ds.y[:, 0], ds.y[:, 1])
print("corr(radius, |s|) =", round(np.corrcoef(radius, np.abs(s))[0, 1], 3))
print("corr(s, w) =", round(np.corrcoef(s, w)[0, 1], 3), " (uncorrelated directions)")

# %% noise-free draws keep the inputs and put every target exactly on the curve
clean = gen_spiral(SpiralConfig(n=8192, seed=7, noise_enabled=False))
assert np.array_equal(clean.x, ds.x)
print("max |r - 0.55|s|| without noise:", np.abs(np.hypot(*clean.y.T) - 0.55 * np.abs(2 * clean.x[:, 0] + clean.x[:, 1])).max())

# %% CSV round trip is exact
save_csv(ds, "/tmp/spiral.csv")
assert load_csv("/tmp/spiral.csv").x.tobytes() == ds.x.tobytes()
