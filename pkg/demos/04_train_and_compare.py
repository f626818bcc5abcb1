"""Train the three model variants on the spiral and compare reconstruction and leaked information.

Takes a few minutes on one core. Run: python demos/04_train_and_compare.py
"""
# %%
from stib.cli import standard_data
from stib.config import TrainConfig
from stib.model import evaluate, fit, traverse_z0

train, test = standard_data(seed=0)
results = {}
for mode in ("vae", "stib_no_adv", "stib"):
    cfg = TrainConfig(mode=mode, seed=0)
    params, traces = fit(cfg, train)
    results[mode] = (cfg, params, evaluate(params, cfg, test, traces=traces))
    m = results[mode][2]
    print(f"{mode:12s} MAE(X) {m.mae_x:.3f}  MAE(Y) {m.mae_y:.3f}  MI_K {m.mi_ksg_bits:.2f} bits")

# %% walk along the first invariant coordinate from one test point and re-predict y
for mode in ("stib_no_adv", "stib"):
    cfg, params, _ = results[mode]
    tr = traverse_z0(params, cfg, test.x[0], (-3.0, 3.0, 61))
    print(f"{mode:12s} std of re-encoded y along the sweep: {tr.ydec_spread():.3f}")
