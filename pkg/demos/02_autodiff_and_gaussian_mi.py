"""Tape autodiff on dense matrices, and the correlation-based Gaussian MI it differentiates.

Run: python demos/02_autodiff_and_gaussian_mi.py
"""
# %%
import numpy as np

from stib.model import gaussian_corr_mi
from stib.ndmath import Tape, logdet

rng = np.random.default_rng(0)

# %% gradient of logdet(A) is A^{-1} for symmetric positive definite A
a = rng.normal(size=(4, 4))
a = a @ a.T + 4 * np.eye(4)
tape = Tape()
node = tape.leaf(a)
root = tape.logdet(node)
grad = tape.backward(root)[node]
print("logdet", tape.value(root)[0, 0], "vs", logdet(a))
print("max |grad - inv(A)| =", np.abs(grad - np.linalg.inv(a)).max())

# %% a Gaussian MI term built on the tape: I = 0.5 (ld R_z + ld R_y - ld R_zy)
z = rng.normal(size=(256, 2))
y = 0.6 * z + 0.8 * rng.normal(size=(256, 2))
tape = Tape()
zi, yi = tape.leaf(z), tape.leaf(y)
r_joint = tape.corr(tape.concat(zi, yi))
r_z = tape.corr(zi)
r_y = tape.corr(yi)
mi = tape.scale(tape.sub(tape.add(tape.logdet(r_z, 1e-5), tape.logdet(r_y, 1e-5)), tape.logdet(r_joint, 1e-5)), 0.5)
adj = tape.backward(mi)
print("MI on tape", tape.value(mi)[0, 0], "direct", gaussian_corr_mi(z, y)[0])
print("dI/dz row norms (first 3):", np.linalg.norm(adj[zi], axis=1)[:3])

# %% the value ignores per-column affine maps of either argument
print("after y -> 10 y + 5:", gaussian_corr_mi(z, 10 * y + 5)[0])
print("after z -> -0.5 z  :", gaussian_corr_mi(-0.5 * z, y)[0])
