"""Partitioned-latent information bottleneck with an adversarial MI regulariser.

The latent code ``z`` is split into an invariant block ``z0`` and an
informative block ``z1``. Training alternates two steps per minibatch:

* main step over encoder, decoder and predictor: KL to the prior plus
  ``lam`` times (reconstruction MSE + prediction MSE + Gaussian MI between
  ``z0`` and the proxy target ``h(y)``), with ``h`` frozen;
* adversary step over the proxy bijection ``h`` and its inverse: maximise the
  same Gaussian MI while keeping ``h`` approximately invertible through a
  cycle penalty weighted by ``beta``.

The Gaussian MI is computed from sample correlation matrices, so it is
unchanged by any per-dimension affine map of either argument.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import miest
from .config import TrainConfig
from .data import Dataset, Standardizer
from .ndmath import NonFiniteError, ShapeError, Tape, as_matrix, logdet, sample_correlation
from .optim import Adam
from .params import ADV_GROUPS, GROUPS, MAIN_GROUPS, MlpParams, StibParams, init_params

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch, what="loss"):
        super().__init__(f"{what} became non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# building blocks (plain arrays)


def encode(phi: MlpParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and clamped log-variance for each row of ``x``."""
    x = as_matrix(x)
    if x.shape[1] != phi.n_in:
        raise ShapeError(f"encoder expects {phi.n_in} input columns, got {x.shape[1]}")
    out = phi(x)
    d = out.shape[1] // 2
    return out[:, :d], np.clip(out[:, d:], LOGVAR_MIN, LOGVAR_MAX)


def reparameterize(mu, logvar, noise) -> np.ndarray:
    mu, logvar, noise = as_matrix(mu), as_matrix(logvar), as_matrix(noise)
    if not mu.shape == logvar.shape == noise.shape:
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {logvar.shape}, {noise.shape} differ")
    return mu + np.exp(0.5 * logvar) * noise


def split_latent(z, d0: int) -> tuple[np.ndarray, np.ndarray]:
    z = as_matrix(z)
    if not 0 <= d0 <= z.shape[1]:
        raise ShapeError(f"d0={d0} out of range for latent width {z.shape[1]}")
    return z[:, :d0], z[:, d0:]


def kl_std_normal(mu, logvar) -> float:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I))."""
    mu, logvar = as_matrix(mu), as_matrix(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl_std_normal: shapes {mu.shape} and {logvar.shape} differ")
    # expm1(lv) - lv keeps the per-entry term >= 0 in floating point
    per = mu * mu + np.expm1(logvar) - logvar
    return float(0.5 * per.sum() / mu.shape[0])


@dataclass(frozen=True)
class CorrelationStats:
    r_joint: np.ndarray
    r_z0: np.ndarray
    r_y: np.ndarray
    logdet_joint: float
    logdet_z0: float
    logdet_y: float


def gaussian_corr_mi(z0, ytilde, jitter=1e-5) -> tuple[float, CorrelationStats]:
    """Gaussian mutual information (nats) from sample correlation matrices.

    ``0.5 * (log|R_z0| + log|R_y| - log|R_joint|)``, each determinant taken
    after adding ``jitter`` to the diagonal.
    """
    z0, ytilde = as_matrix(z0), as_matrix(ytilde)
    _check_mi_shapes(z0, ytilde)
    r_joint = sample_correlation(np.hstack([z0, ytilde]))
    r_z0 = sample_correlation(z0)
    r_y = sample_correlation(ytilde)
    lj, lz, ly = (logdet(r, jitter) for r in (r_joint, r_z0, r_y))
    value = 0.5 * (lz + ly - lj)
    return value, CorrelationStats(r_joint, r_z0, r_y, lj, lz, ly)


def _check_mi_shapes(z0, y):
    if z0.shape[0] != y.shape[0]:
        raise ShapeError(f"z0 has {z0.shape[0]} rows, ytilde has {y.shape[0]}")
    if z0.shape[0] <= z0.shape[1] + y.shape[1]:
        raise ShapeError(
            f"need more rows ({z0.shape[0]}) than correlation dimensions ({z0.shape[1] + y.shape[1]})"
        )


# ---------------------------------------------------------------------------
# tape versions


def _mi_on_tape(tape: Tape, z0: int, y: int, jitter: float) -> int:
    _check_mi_shapes(tape.value(z0), tape.value(y))
    lj = tape.logdet(tape.corr(tape.concat(z0, y)), jitter)
    lz = tape.logdet(tape.corr(z0), jitter)
    ly = tape.logdet(tape.corr(y), jitter)
    return tape.scale(tape.sub(tape.add(lz, ly), lj), 0.5)


def _mse_on_tape(tape: Tape, pred: int, target: int) -> int:
    return tape.mean(tape.square(tape.sub(pred, target)))


def _group_leaves(tape: Tape, params: StibParams, names):
    return {g: [tape.leaf(a) for a in params.group(g).arrays()] for g in names}


def _collect_grads(params, adj, leaves):
    grads = {}
    for g in GROUPS:
        if g in leaves:
            grads[g] = [adj[i] for i in leaves[g]]
        else:
            grads[g] = [np.zeros_like(a) for a in params.group(g).arrays()]
    return grads


@dataclass
class LossResult:
    value: float
    grads: dict[str, list[np.ndarray]]
    parts: dict[str, float] = field(default_factory=dict)


def loss_main(params: StibParams, batch: tuple, noise, cfg: TrainConfig) -> LossResult:
    """Main-step loss and its gradients; proxy bijection held fixed."""
    x, y = (as_matrix(a) for a in batch)
    noise = as_matrix(noise)
    tape = Tape()
    leaves = _group_leaves(tape, params, MAIN_GROUPS)
    xi, yi = tape.leaf(x), tape.leaf(y)
    dz = cfg.d_z

    enc = params.encoder_phi.on_tape(tape, xi, leaves["encoder_phi"])
    mu = tape.slice(enc, 0, dz)
    logvar = tape.clip(tape.slice(enc, dz, 2 * dz), LOGVAR_MIN, LOGVAR_MAX)
    std = tape.exp(tape.scale(logvar, 0.5))
    z = tape.add(mu, tape.mul(std, tape.leaf(noise)))

    kl_sum = tape.sum(tape.sub(tape.add(tape.square(mu), tape.exp(logvar)), logvar))
    kl = tape.add(tape.scale(kl_sum, 0.5 / x.shape[0]), tape.leaf(-0.5 * dz))

    xhat = params.decoder_tau.on_tape(tape, z, leaves["decoder_tau"])
    mse_x = _mse_on_tape(tape, xhat, xi)
    d0 = cfg.invariant_dims
    z1 = tape.slice(z, d0, dz)
    yhat = params.predictor_theta.on_tape(tape, z1, leaves["predictor_theta"])
    mse_y = _mse_on_tape(tape, yhat, yi)

    fit_terms = tape.add(mse_x, mse_y)
    parts = {}
    if cfg.adversarial:
        ytilde = tape.leaf(params.bij_forward_delta(y))
        z0 = tape.slice(mu if cfg.mi_latent == "mean" else z, 0, d0)
        mi = _mi_on_tape(tape, z0, ytilde, cfg.jitter)
        fit_terms = tape.add(fit_terms, mi)
        parts["mi_gauss"] = float(tape.value(mi)[0, 0])
    total = tape.add(kl, tape.scale(fit_terms, cfg.lam))

    adj = tape.backward(total)
    parts.update(
        kl=float(tape.value(kl)[0, 0]),
        mse_x=float(tape.value(mse_x)[0, 0]),
        mse_y=float(tape.value(mse_y)[0, 0]),
        mae_x=float(np.mean(np.abs(tape.value(xhat) - x))),
    )
    return LossResult(float(tape.value(total)[0, 0]), _collect_grads(params, adj, leaves), parts)


def loss_adversary(params: StibParams, batch: tuple, noise, cfg: TrainConfig) -> LossResult:
    """Adversary loss: -MI(z0; h(y)) + beta * cycle error; only h and h^-1 move."""
    x, y = (as_matrix(a) for a in batch)
    mu, logvar = encode(params.encoder_phi, x)
    z = mu if cfg.mi_latent == "mean" else reparameterize(mu, logvar, noise)
    z0, _ = split_latent(z, cfg.invariant_dims)

    tape = Tape()
    leaves = _group_leaves(tape, params, ADV_GROUPS)
    yi = tape.leaf(y)
    ytilde = params.bij_forward_delta.on_tape(tape, yi, leaves["bij_forward_delta"])
    yback = params.bij_inverse_delta.on_tape(tape, ytilde, leaves["bij_inverse_delta"])
    mi = _mi_on_tape(tape, tape.leaf(z0), ytilde, cfg.jitter)
    cycle = tape.scale(tape.sum(tape.square(tape.sub(yback, yi))), 1.0 / y.shape[0])
    total = tape.add(tape.scale(mi, -1.0), tape.scale(cycle, cfg.beta))

    adj = tape.backward(total)
    parts = {"mi_gauss_adv": float(tape.value(mi)[0, 0]), "cycle": float(tape.value(cycle)[0, 0])}
    return LossResult(float(tape.value(total)[0, 0]), _collect_grads(params, adj, leaves), parts)


# ---------------------------------------------------------------------------
# training


def _flat(params, names):
    return [a for g in names for a in params.group(g).arrays()]


def _flat_grads(res, names):
    return [a for g in names for a in res.grads[g]]


def _batches(n, batch_size, min_rows):
    starts = list(range(0, n, batch_size))
    out = [(s, min(s + batch_size, n)) for s in starts]
    # a trailing partial batch too small for the correlation matrices is dropped
    return [(a, b) for a, b in out if b - a > min_rows]


def fit(cfg: TrainConfig, train: Dataset, *, progress=None) -> tuple[StibParams, dict[str, list[float]]]:
    """Train from scratch; returns final parameters and per-epoch mean losses.

    With ``cfg.standardize`` the networks train on per-column standardised
    data (so loss traces are in standardised units) and the scaling is folded
    into the returned weights. Deterministic given ``cfg.seed``.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if train.d_x != cfg.d_x or train.d_y != cfg.d_y:
        raise ShapeError(
            f"data has d_x={train.d_x}, d_y={train.d_y}; config expects d_x={cfg.d_x}, d_y={cfg.d_y}"
        )
    scaler = Standardizer.fit(train) if cfg.standardize else None
    if scaler is not None:
        train = scaler.transform(train)
    init_ss, shuffle_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    params = init_params(cfg, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)

    opt_main = Adam(_flat(params, MAIN_GROUPS), lr=cfg.lr_main)
    opt_adv = Adam(_flat(params, ADV_GROUPS), lr=cfg.lr_adv)
    x_all, y_all = train.x, train.y
    batches = _batches(len(train), cfg.batch_size, cfg.d_z0 + cfg.d_y)
    if not batches:
        raise ValueError(f"training set of {len(train)} rows yields no usable minibatch")

    traces: dict[str, list[float]] = {}
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(len(train))
        sums: dict[str, float] = {}
        for bi, (lo, hi) in enumerate(batches):
            idx = perm[lo:hi]
            batch = (x_all[idx], y_all[idx])
            noise = noise_rng.standard_normal((hi - lo, cfg.d_z))
            try:
                res = loss_main(params, batch, noise, cfg)
                if not np.isfinite(res.value):
                    raise TrainingDivergedError(epoch, bi, "main loss")
                opt_main.step(_flat_grads(res, MAIN_GROUPS))
                step = {"loss_main": res.value, **res.parts}
                if cfg.adversarial:
                    for _ in range(cfg.adv_steps_per_main):
                        adv = loss_adversary(params, batch, noise, cfg)
                        if not np.isfinite(adv.value):
                            raise TrainingDivergedError(epoch, bi, "adversary loss")
                        opt_adv.step(_flat_grads(adv, ADV_GROUPS))
                    step.update(loss_adv=adv.value, **adv.parts)
            except (NonFiniteError, np.linalg.LinAlgError) as e:
                raise TrainingDivergedError(epoch, bi, f"training state ({e})") from e
            for k, v in step.items():
                sums[k] = sums.get(k, 0.0) + v
        for k, v in sums.items():
            traces.setdefault(k, []).append(v / len(batches))
        if progress is not None:
            progress(epoch, {k: v[-1] for k, v in traces.items()})
        log.debug("epoch %d: %s", epoch, {k: round(v[-1], 5) for k, v in traces.items()})
    if scaler is not None:
        params = fold_scaling(params, scaler)
    return params.copy(), traces


def fold_scaling(params: StibParams, scaler: Standardizer) -> StibParams:
    """Absorb data standardisation into the networks so they act on raw units."""
    out = params.copy()
    out.encoder_phi = params.encoder_phi.with_input_affine(scaler.x_mean, scaler.x_scale)
    out.decoder_tau = params.decoder_tau.with_output_affine(scaler.x_mean, scaler.x_scale)
    out.predictor_theta = params.predictor_theta.with_output_affine(scaler.y_mean, scaler.y_scale)
    out.bij_forward_delta = params.bij_forward_delta.with_input_affine(scaler.y_mean, scaler.y_scale)
    out.bij_inverse_delta = params.bij_inverse_delta.with_output_affine(scaler.y_mean, scaler.y_scale)
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Metrics:
    mae_x: float
    mae_y: float
    mi_gauss_bits: float
    mi_ksg_bits: float
    traces: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mae_x": self.mae_x,
            "mae_y": self.mae_y,
            "mi_gauss_bits": self.mi_gauss_bits,
            "mi_ksg_bits": self.mi_ksg_bits,
            "traces": self.traces,
        }


def predict(params: StibParams, cfg: TrainConfig, x) -> dict[str, np.ndarray]:
    """Deterministic pass using posterior means (no sampling noise)."""
    mu, logvar = encode(params.encoder_phi, x)
    z0, z1 = split_latent(mu, cfg.invariant_dims)
    return {
        "mu": mu,
        "logvar": logvar,
        "z0": z0,
        "z1": z1,
        "xhat": params.decoder_tau(mu),
        "yhat": params.predictor_theta(mu if cfg.mode == "vae" else z1),
    }


def mi_arguments(out, cfg):
    """Latent block scored for target information (full z in vae mode)."""
    return out["mu"] if cfg.mode == "vae" else out["z0"]


def evaluate(params: StibParams, cfg: TrainConfig, test: Dataset, *, traces=None, threads=None) -> Metrics:
    if test.d_x != cfg.d_x or test.d_y != cfg.d_y:
        raise ShapeError(
            f"test data has d_x={test.d_x}, d_y={test.d_y}; model expects d_x={cfg.d_x}, d_y={cfg.d_y}"
        )
    out = predict(params, cfg, test.x)
    zs = mi_arguments(out, cfg)
    mi_g, _ = gaussian_corr_mi(zs, test.y, cfg.jitter)
    mi_k = miest.ksg_mi(zs, test.y, miest.KsgConfig(k=cfg.kraskov_k), threads=threads)
    return Metrics(
        mae_x=float(np.mean(np.abs(out["xhat"] - test.x))),
        mae_y=float(np.mean(np.abs(out["yhat"] - test.y))),
        mi_gauss_bits=mi_g / math.log(2.0),
        mi_ksg_bits=mi_k,
        traces=dict(traces or {}),
    )


@dataclass
class Traversal:
    t: np.ndarray
    xhat: np.ndarray
    yhat: np.ndarray
    ydec: np.ndarray

    @property
    def header(self) -> list[str]:
        dx, dy = self.xhat.shape[1], self.yhat.shape[1]
        return ["t"] + [f"xhat{i}" for i in range(dx)] + [f"yhat{i}" for i in range(dy)] + [f"ydec{i}" for i in range(dy)]

    def table(self) -> np.ndarray:
        return np.column_stack([self.t, self.xhat, self.yhat, self.ydec])

    def ydec_spread(self) -> float:
        """Mean over target dimensions of the std of re-encoded predictions."""
        return float(np.mean(np.std(self.ydec, axis=0)))


def traverse_z0(
    params: StibParams, cfg: TrainConfig, anchor_x, grid: tuple[float, float, int], dim: int = 0
) -> Traversal:
    """Sweep one invariant coordinate (the first by default) around an anchor's posterior mean.

    ``yhat`` comes from the unchanged informative block; ``ydec`` re-encodes
    each decoded ``xhat`` and predicts again, which exposes target
    information leaking through the invariant block.
    """
    lo, hi, steps = grid
    steps = int(steps)
    if steps < 2:
        raise ValueError("grid needs at least 2 steps")
    anchor = np.asarray(anchor_x, dtype=np.float64).reshape(-1)
    if anchor.size != cfg.d_x:
        raise ShapeError(f"anchor has {anchor.size} values, data dimensionality is {cfg.d_x}")
    width = cfg.invariant_dims or cfg.d_z
    if not 0 <= dim < width:
        raise ShapeError(f"traversal dimension {dim} outside the invariant block of width {width}")
    mu, _ = encode(params.encoder_phi, anchor[None, :])
    t = np.linspace(lo, hi, steps)
    z = np.repeat(mu, steps, axis=0)
    z[:, dim] = t
    xhat = params.decoder_tau(z)
    if cfg.mode == "vae":
        yhat = params.predictor_theta(z)
    else:
        # z1 is the same on every row, so the prediction is one row repeated
        _, z1 = split_latent(z[:1], cfg.invariant_dims)
        yhat = np.repeat(params.predictor_theta(z1), steps, axis=0)
    ydec = predict(params, cfg, xhat)["yhat"]
    return Traversal(t, xhat, yhat, ydec)
