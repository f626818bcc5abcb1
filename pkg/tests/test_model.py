import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stib.config import ConfigError, TrainConfig
from stib.data import Dataset, SpiralConfig, gen_spiral
from stib.model import (
    encode,
    evaluate,
    fit,
    gaussian_corr_mi,
    kl_std_normal,
    loss_adversary,
    loss_main,
    reparameterize,
    split_latent,
    traverse_z0,
)
from stib.ndmath import ShapeError
from stib.params import (
    ADV_GROUPS,
    GROUPS,
    MAIN_GROUPS,
    MlpParams,
    ParamFileError,
    dumps_params,
    init_params,
    load_params,
    save_params,
)

TINY = dict(hidden_layers=1, hidden_width=4, bij_hidden_layers=1, bij_hidden_width=4, batch_size=16)


def tiny_setup(seed=0, **over):
    cfg = TrainConfig(**{**TINY, "lam": 2.0, "beta": 0.5, **over})
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    x = rng.normal(size=(16, cfg.d_x))
    y = rng.normal(size=(16, cfg.d_y)) + 0.5 * x[:, :1]
    noise = rng.normal(size=(16, cfg.d_z))
    return cfg, params, (x, y), noise


def identity_mlp(d):
    return MlpParams([np.eye(d)], [np.zeros((1, d))])


# ---------------------------------------------------------------- building blocks


def test_encode_zero_network():
    cfg = TrainConfig(**TINY)
    params = init_params(cfg, np.random.default_rng(0))
    phi = params.encoder_phi
    for a in phi.arrays():
        a[:] = 0.0
    mu, logvar = encode(phi, np.ones((5, 2)))
    assert np.all(mu == 0) and np.all(logvar == 0)


def test_encode_identity_layer():
    phi = identity_mlp(6)
    x = np.arange(12.0).reshape(2, 6) - 5.0
    mu, logvar = encode(phi, x)
    np.testing.assert_array_equal(np.hstack([mu, logvar]), x)


def test_encode_clamps_logvar():
    phi = identity_mlp(4)
    _, logvar = encode(phi, np.array([[0.0, 0.0, 50.0, -50.0]]))
    assert logvar.tolist() == [[10.0, -10.0]]


def test_encode_random_params_finite():
    cfg = TrainConfig()
    params = init_params(cfg, np.random.default_rng(4))
    mu, logvar = encode(params.encoder_phi, np.random.default_rng(5).uniform(-4, 4, size=(100, 2)))
    assert np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))
    assert logvar.min() >= -10 and logvar.max() <= 10


def test_encode_shape_mismatch():
    with pytest.raises(ShapeError):
        encode(identity_mlp(4), np.ones((2, 3)))


def test_reparameterize_examples():
    np.testing.assert_array_equal(reparameterize([[1.0, 2.0]], [[0.3, 0.1]], [[0.0, 0.0]]), [[1.0, 2.0]])
    np.testing.assert_array_equal(reparameterize([[1.0, 2.0]], [[0.0, 0.0]], [[1.0, -1.0]]), [[2.0, 1.0]])
    z = reparameterize([[0.0, 0.0]], [[2 * math.log(2), 0.0]], [[1.0, 1.0]])
    np.testing.assert_allclose(z, [[2.0, 1.0]], rtol=1e-15)
    with pytest.raises(ShapeError):
        reparameterize([[0.0]], [[0.0, 0.0]], [[0.0]])


def test_split_latent():
    z = np.array([[1.0, 2.0, 3.0]])
    z0, z1 = split_latent(z, 2)
    assert z0.tolist() == [[1.0, 2.0]] and z1.tolist() == [[3.0]]
    z0, z1 = split_latent(z, 0)
    assert z0.shape == (1, 0) and z1.tolist() == z.tolist()
    with pytest.raises(ShapeError):
        split_latent(z, 4)


@given(d0=st.integers(0, 5), seed=st.integers(0, 1000))
def test_split_concat_identity(d0, seed):
    z = np.random.default_rng(seed).normal(size=(7, 5))
    z0, z1 = split_latent(z, d0)
    np.testing.assert_array_equal(np.hstack([z0, z1]), z)


def test_kl_examples():
    assert kl_std_normal([[0.0, 0.0]], [[0.0, 0.0]]) == 0.0
    assert kl_std_normal([[1.0]], [[0.0]]) == 0.5
    assert kl_std_normal([[0.0]], [[math.log(2)]]) == pytest.approx(0.5 * (2 - 1 - math.log(2)), abs=1e-15)
    assert kl_std_normal([[0.0]], [[math.log(2)]]) == pytest.approx(0.153426, abs=1e-6)


@settings(max_examples=100)
@given(
    mu=st.lists(st.floats(-50, 50), min_size=4, max_size=4),
    lv=st.lists(st.floats(-10, 10), min_size=4, max_size=4),
)
def test_kl_nonnegative(mu, lv):
    assert kl_std_normal(np.reshape(mu, (2, 2)), np.reshape(lv, (2, 2))) >= 0.0


# ---------------------------------------------------------------- Gaussian MI


def orthogonal_columns(n=64):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.cos(t)[:, None], np.sin(t)[:, None]


def test_gaussian_mi_orthogonal_is_zero():
    a, b = orthogonal_columns()
    value, stats = gaussian_corr_mi(a, b, 1e-5)
    assert abs(stats.r_joint[0, 1]) < 1e-15
    assert abs(value) < 1e-9


def test_gaussian_mi_rho_half():
    # columns with sample correlation exactly 0.5 (same construction as the hand example)
    z0 = np.array([[0.0], [1.0], [2.0]])
    y = np.array([[0.0], [2.0], [1.0]])
    value, stats = gaussian_corr_mi(np.tile(z0, (3, 1)), np.tile(y, (3, 1)), 0.0)
    assert stats.r_joint[0, 1] == pytest.approx(0.5, abs=1e-15)
    assert value == pytest.approx(0.5 * math.log(1 / (1 - 0.25)), abs=1e-12)
    assert value == pytest.approx(0.143841, abs=1e-6)


def test_gaussian_mi_stats_unit_diagonal():
    rng = np.random.default_rng(0)
    _, stats = gaussian_corr_mi(rng.normal(size=(50, 2)), rng.normal(size=(50, 2)))
    for r in (stats.r_joint, stats.r_z0, stats.r_y):
        np.testing.assert_array_equal(r, r.T)
        np.testing.assert_allclose(np.diag(r), 1.0, atol=1e-12)


def test_gaussian_mi_needs_more_rows_than_dims():
    with pytest.raises(ShapeError):
        gaussian_corr_mi(np.ones((4, 2)), np.ones((4, 2)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), b=st.integers(8, 80), d0=st.integers(1, 3), dy=st.integers(1, 3))
def test_gaussian_mi_nonnegative(seed, b, d0, dy):
    rng = np.random.default_rng(seed)
    z0 = rng.normal(size=(b, d0))
    y = rng.normal(size=(b, dy)) + rng.normal() * z0[:, :1]
    assert gaussian_corr_mi(z0, y, 1e-5)[0] >= -1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), exps=st.lists(st.integers(-6, 6), min_size=2, max_size=2),
       signs=st.lists(st.sampled_from([-1.0, 1.0]), min_size=2, max_size=2))
def test_gaussian_mi_exact_under_exact_scalings(seed, exps, signs):
    # power-of-two magnitudes and sign flips are exact in floating point,
    # so the value must be reproduced bit for bit
    rng = np.random.default_rng(seed)
    z0 = rng.normal(size=(40, 2))
    y = rng.normal(size=(40, 2)) + z0
    scale = np.array(signs) * 2.0 ** np.array(exps)
    base = gaussian_corr_mi(z0, y)[0]
    assert gaussian_corr_mi(z0, y * scale)[0] == base
    assert gaussian_corr_mi(z0 * scale[::-1], y)[0] == base


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gaussian_mi_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    z0 = rng.normal(size=(64, 2))
    y = rng.normal(size=(64, 2)) + 0.7 * z0
    a = rng.uniform(0.2, 20.0, size=2) * rng.choice([-1.0, 1.0], size=2)
    b = rng.uniform(-50, 50, size=2)
    base = gaussian_corr_mi(z0, y)[0]
    assert abs(gaussian_corr_mi(z0, a * y + b)[0] - base) <= 1e-12
    assert abs(gaussian_corr_mi(a * z0 + b, y)[0] - base) <= 1e-12
    assert abs(gaussian_corr_mi(z0, 10 * y + 5)[0] - base) <= 1e-12


# ---------------------------------------------------------------- losses


def perturb(params, group, index, pos, h):
    q = params.copy()
    q.group(group).arrays()[index][pos] += h
    return q


@pytest.mark.parametrize(
    "loss_fn,groups,mode",
    [
        (loss_main, MAIN_GROUPS, "stib"),
        (loss_main, MAIN_GROUPS, "stib_no_adv"),
        (loss_main, MAIN_GROUPS, "vae"),
        (loss_adversary, ADV_GROUPS, "stib"),
    ],
    ids=["main-stib", "main-no_adv", "main-vae", "adversary-stib"],
)
def test_loss_gradients_match_finite_differences(loss_fn, groups, mode):
    cfg, params, batch, noise = tiny_setup(seed=1, mode=mode)
    res = loss_fn(params, batch, noise, cfg)
    h = 1e-5
    for g in groups:
        for k, arr in enumerate(params.group(g).arrays()):
            num = np.zeros_like(arr)
            for pos in np.ndindex(*arr.shape):
                fp = loss_fn(perturb(params, g, k, pos, h), batch, noise, cfg).value
                fm = loss_fn(perturb(params, g, k, pos, -h), batch, noise, cfg).value
                num[pos] = (fp - fm) / (2 * h)
            got = res.grads[g][k]
            scale = max(np.max(np.abs(num)), 1e-6)
            assert np.max(np.abs(got - num)) / scale < 1e-3, (g, k)


@pytest.mark.parametrize("mi_latent", ["mean", "sample"])
def test_parameter_freezing(mi_latent):
    cfg, params, batch, noise = tiny_setup(seed=2, mi_latent=mi_latent)
    main = loss_main(params, batch, noise, cfg)
    adv = loss_adversary(params, batch, noise, cfg)
    for g in ADV_GROUPS:
        assert all(np.all(a == 0) for a in main.grads[g])
    for g in MAIN_GROUPS:
        assert all(np.all(a == 0) for a in adv.grads[g])
    assert any(np.any(a != 0) for g in ADV_GROUPS for a in adv.grads[g])


def test_loss_main_lambda_zero_is_kl():
    cfg, params, batch, noise = tiny_setup(seed=3, lam=0.0)
    res = loss_main(params, batch, noise, cfg)
    mu, logvar = encode(params.encoder_phi, batch[0])
    assert res.value == pytest.approx(kl_std_normal(mu, logvar), abs=1e-12)
    assert res.value == res.parts["kl"]


def test_loss_main_no_adv_excludes_mi():
    cfg, params, batch, noise = tiny_setup(seed=4, mode="stib_no_adv")
    res = loss_main(params, batch, noise, cfg)
    assert "mi_gauss" not in res.parts
    expected = res.parts["kl"] + cfg.lam * (res.parts["mse_x"] + res.parts["mse_y"])
    assert res.value == pytest.approx(expected, rel=1e-12)
    assert all(np.all(a == 0) for g in ADV_GROUPS for a in res.grads[g])


def test_loss_main_perfect_model_is_kl_only():
    # x reconstructable from z, y from z1, z0 uncorrelated with y: every
    # lambda term vanishes
    cfg = TrainConfig(d_x=2, d_y=1, d_z0=1, d_z1=1, hidden_layers=0, bij_hidden_layers=0, batch_size=64, lam=5.0)
    params = init_params(cfg, np.random.default_rng(0))
    w_enc = np.zeros((2, 4))
    w_enc[0, 0] = w_enc[1, 1] = 1.0
    params.encoder_phi = MlpParams([w_enc], [np.array([[0.0, 0.0, -10.0, -10.0]])])
    params.decoder_tau = identity_mlp(2)
    params.predictor_theta = identity_mlp(1)
    params.bij_forward_delta = identity_mlp(1)
    params.bij_inverse_delta = identity_mlp(1)
    a, b = orthogonal_columns(64)
    x = np.hstack([a, b])
    y = b.copy()
    noise = np.zeros((64, 2))
    res = loss_main(params, (x, y), noise, cfg)
    assert res.parts["mse_x"] == 0.0 and res.parts["mse_y"] == 0.0
    assert abs(res.parts["mi_gauss"]) < 1e-9
    mu, logvar = encode(params.encoder_phi, x)
    assert res.value == pytest.approx(kl_std_normal(mu, logvar), abs=5e-8)


def test_loss_adversary_identity_beta_zero():
    cfg, params, batch, noise = tiny_setup(seed=5, beta=0.0, bij_hidden_layers=0)
    params.bij_forward_delta = identity_mlp(cfg.d_y)
    params.bij_inverse_delta = identity_mlp(cfg.d_y)
    res = loss_adversary(params, batch, noise, cfg)
    mu, _ = encode(params.encoder_phi, batch[0])
    expected, _ = gaussian_corr_mi(mu[:, : cfg.d_z0], batch[1], cfg.jitter)
    assert res.value == pytest.approx(-expected, abs=1e-12)


def test_loss_adversary_perfect_cycle():
    cfg, params, batch, noise = tiny_setup(seed=6, bij_hidden_layers=0)
    a = np.array([[2.0, 1.0], [0.5, -1.0]])
    params.bij_forward_delta = MlpParams([a], [np.array([[0.3, -0.2]])])
    params.bij_inverse_delta = MlpParams([np.linalg.inv(a)], [-np.array([[0.3, -0.2]]) @ np.linalg.inv(a)])
    res = loss_adversary(params, batch, noise, cfg)
    assert res.parts["cycle"] < 1e-25


def test_adversary_descent_step():
    cfg, params, batch, noise = tiny_setup(seed=7)
    res = loss_adversary(params, batch, noise, cfg)
    q = params.copy()
    for g in ADV_GROUPS:
        for arr, grad in zip(q.group(g).arrays(), res.grads[g]):
            arr -= 1e-4 * grad
    assert loss_adversary(q, batch, noise, cfg).value < res.value


# ---------------------------------------------------------------- training / evaluation


SMALL = dict(hidden_width=16, hidden_layers=2, bij_hidden_width=8, bij_hidden_layers=1, batch_size=64)


def test_fit_deterministic():
    train = gen_spiral(SpiralConfig(512, seed=1))
    cfg = TrainConfig(**SMALL, epochs=2, seed=3)
    p1, t1 = fit(cfg, train)
    p2, t2 = fit(cfg, train)
    assert p1.equals(p2)
    assert dumps_params(p1) == dumps_params(p2)
    assert t1 == t2
    p3, _ = fit(cfg.replace(seed=4), train)
    assert not p1.equals(p3)


def test_fit_traces_and_modes():
    train = gen_spiral(SpiralConfig(256, seed=2))
    for mode in ("stib", "stib_no_adv", "vae"):
        cfg = TrainConfig(**SMALL, epochs=3, mode=mode, standardize=False)
        params, traces = fit(cfg, train)
        assert len(traces["loss_main"]) == 3
        assert ("loss_adv" in traces) == (mode == "stib")
        init = init_params(cfg, np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[0]))
        moved_adv = not all(
            np.array_equal(a, b) for g in ADV_GROUPS for a, b in zip(params.group(g).arrays(), init.group(g).arrays())
        )
        assert moved_adv == (mode == "stib")


def test_fit_rejects_mismatched_data():
    train = Dataset(np.zeros((100, 3)), np.zeros((100, 2)))
    with pytest.raises(ShapeError):
        fit(TrainConfig(**SMALL, epochs=1), train)


def test_fit_divergence_reports_location():
    train = gen_spiral(SpiralConfig(256, seed=2))
    cfg = TrainConfig(**SMALL, epochs=3, lam=1e308)
    from stib.model import TrainingDivergedError

    with pytest.raises(TrainingDivergedError, match="epoch"):
        fit(cfg, train)


def test_training_reduces_reconstruction_error():
    train = gen_spiral(SpiralConfig(4096, seed=5))
    cfg = TrainConfig(mode="vae", epochs=30, seed=1)
    _, traces = fit(cfg, train)
    mae = np.array(traces["mae_x"])
    assert np.mean(mae[-5:]) < 0.5 * np.mean(mae[:5]), np.round(mae, 4)
    assert traces["loss_main"][-1] < traces["loss_main"][0]


def synthetic_model(d=2):
    cfg = TrainConfig(d_x=d, d_y=d, d_z0=1, d_z1=d, hidden_layers=0, bij_hidden_layers=0, batch_size=64)
    params = init_params(cfg, np.random.default_rng(0))
    return cfg, params


def test_evaluate_perfect_predictor():
    # latent = (x0, x0, x1) with y = x, predictor reads the z1 copy of x
    cfg, params = synthetic_model()
    w = np.zeros((2, 6))
    w[0, 0] = w[0, 1] = w[1, 2] = 1.0
    params.encoder_phi = MlpParams([w], [np.zeros((1, 6))])
    params.predictor_theta = identity_mlp(2)
    test = gen_spiral(SpiralConfig(300, seed=0))
    test = Dataset(test.x, test.x.copy())
    m = evaluate(params, cfg, test)
    assert m.mae_y == 0.0


def test_evaluate_constant_predictor_mad():
    cfg, params = synthetic_model()
    test = gen_spiral(SpiralConfig(300, seed=1))
    col_means = test.y.mean(axis=0)
    params.predictor_theta = MlpParams([np.zeros((2, 2))], [col_means[None, :]])
    m = evaluate(params, cfg, test)
    total = 0.0
    for row in test.y:
        for j, v in enumerate(row):
            total += abs(v - col_means[j])
    assert m.mae_y == pytest.approx(total / test.y.size, rel=1e-12)


def test_evaluate_shape_mismatch():
    cfg, params = synthetic_model()
    with pytest.raises(ShapeError, match="d_x"):
        evaluate(params, cfg, Dataset(np.zeros((50, 3)), np.zeros((50, 2))))


def test_traverse_shapes():
    cfg = TrainConfig(**SMALL)
    params = init_params(cfg, np.random.default_rng(0))
    tr = traverse_z0(params, cfg, [0.5, -1.0], (-3, 3, 61))
    assert tr.table().shape == (61, 7)
    assert tr.header == ["t", "xhat0", "xhat1", "yhat0", "yhat1", "ydec0", "ydec1"]
    # y-hat reads only z1, which the sweep leaves alone
    assert np.all(tr.yhat == tr.yhat[0])
    same = traverse_z0(params, cfg, [0.5, -1.0], (1.0, 1.0, 2))
    np.testing.assert_array_equal(same.table()[0], same.table()[1])
    with pytest.raises(ShapeError):
        traverse_z0(params, cfg, [0.5, -1.0, 2.0], (-3, 3, 5))
    with pytest.raises(ValueError):
        traverse_z0(params, cfg, [0.5, -1.0], (-3, 3, 1))


# ---------------------------------------------------------------- config / parameter files


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=4, d_z0=2, d_y=2)
    with pytest.raises(ConfigError):
        TrainConfig(mode="nope")
    with pytest.raises(ConfigError, match="lamda"):
        TrainConfig.from_dict({"lamda": 3.0})
    assert TrainConfig.from_dict({"lambda": 3.0}).lam == 3.0
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_params_round_trip(tmp_path):
    cfg = TrainConfig(**SMALL, seed=9)
    params = init_params(cfg, np.random.default_rng(1))
    path = tmp_path / "m.stib"
    save_params(params, path)
    back = load_params(path)
    assert back.equals(params)
    assert back.config == cfg
    assert path.read_bytes()[:4] == b"STIB"
    assert dumps_params(back) == path.read_bytes()


def test_params_truncated(tmp_path):
    cfg = TrainConfig(**SMALL)
    buf = dumps_params(init_params(cfg, np.random.default_rng(1)))
    path = tmp_path / "m.stib"
    path.write_bytes(buf[: len(buf) - 10])
    with pytest.raises(ParamFileError, match="truncated"):
        load_params(path)
    path.write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ParamFileError, match="magic"):
        load_params(path)
    path.write_bytes(buf[:4] + (99).to_bytes(4, "little") + buf[8:])
    with pytest.raises(ParamFileError, match="version"):
        load_params(path)


def test_params_shape_mismatch_names_group(tmp_path):
    cfg = TrainConfig(**SMALL)
    path = tmp_path / "m.stib"
    save_params(init_params(cfg, np.random.default_rng(1)), path)
    with pytest.raises(ParamFileError, match="encoder_phi"):
        load_params(path, expect=cfg.replace(d_z0=3))


def test_group_names_cover_all_parameters():
    cfg = TrainConfig(**SMALL)
    params = init_params(cfg, np.random.default_rng(0))
    assert set(GROUPS) == set(MAIN_GROUPS) | set(ADV_GROUPS)
    assert params.predictor_theta.n_in == cfg.d_z1
    vae = init_params(cfg.replace(mode="vae"), np.random.default_rng(0))
    assert vae.predictor_theta.n_in == cfg.d_z
