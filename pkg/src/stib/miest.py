"""Mutual-information estimators used for evaluation (not differentiated).

``ksg_mi`` is the first Kraskov-Stoegbauer-Grassberger k-nearest-neighbour
estimator under the max-norm. Neighbour search is brute force up to
``BRUTE_FORCE_MAX`` points and a k-d tree beyond that; both paths produce the
same counts.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

EULER_GAMMA = 0.57721566490153286061
BRUTE_FORCE_MAX = 4096
_CHUNK = 256

# Bernoulli-number coefficients B_2k / (2k) of the asymptotic series
_ASYMPTOTIC = (
    1.0 / 12,
    -1.0 / 120,
    1.0 / 252,
    -1.0 / 240,
    1.0 / 132,
    -691.0 / 32760,
    1.0 / 12,
)


def digamma(x):
    """psi(x) for x > 0, scalar or array.

    Shifts the argument up to x >= 6 with psi(x) = psi(x+1) - 1/x, then
    applies the asymptotic expansion in 1/x^2.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    v = arr.copy()
    acc = np.zeros_like(v)
    while True:
        small = v < 6.0
        if not np.any(small):
            break
        acc = np.where(small, acc - 1.0 / np.where(small, v, 1.0), acc)
        v = np.where(small, v + 1.0, v)
    inv2 = 1.0 / (v * v)
    series = np.zeros_like(v)
    for c in reversed(_ASYMPTOTIC):
        series = (series + c) * inv2
    out = acc + np.log(v) - 0.5 / v - series
    return float(out) if np.ndim(x) == 0 else out


def gaussian_mi_closed_form(rho: float) -> float:
    """Mutual information in bits of a bivariate Gaussian with correlation rho."""
    if not abs(rho) < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    return 0.5 * math.log2(1.0 / (1.0 - rho * rho))


@dataclass(frozen=True)
class KsgConfig:
    k: int = 3
    units: str = "bits"
    metric: str = "max"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.units not in ("bits", "nats"):
            raise ValueError(f"units must be 'bits' or 'nats', got {self.units!r}")
        if self.metric != "max":
            raise ValueError("only the max-norm is supported")


def _threads(threads):
    if threads is None:
        threads = int(os.environ.get("STIB_THREADS", "1") or 1)
    return max(1, int(threads))


def _break_ties(x, y):
    joint = np.hstack([x, y])
    if len(np.unique(joint, axis=0)) == len(joint):
        return x, y
    # deterministic sub-1e-12 offsets keyed to row index
    n = len(joint)
    ramp = (np.arange(n, dtype=np.float64) + 1.0) / n * 1e-13
    span = np.maximum(np.abs(joint).max(axis=0), 1.0)
    cols = np.arange(joint.shape[1]) + 1.0
    joint = joint + ramp[:, None] * span * cols / joint.shape[1]
    return joint[:, : x.shape[1]], joint[:, x.shape[1] :]


def _cheb(a, b):
    # pairwise max-norm distances between rows of a and rows of b
    return np.max(np.abs(a[:, None, :] - b[None, :, :]), axis=2)


def _brute_counts(x, y, k, threads):
    n = len(x)

    def chunk(lo):
        hi = min(lo + _CHUNK, n)
        dx = _cheb(x[lo:hi], x)
        dy = _cheb(y[lo:hi], y)
        dz = np.maximum(dx, dy)
        idx = np.arange(hi - lo)
        dz[idx, lo + idx] = np.inf
        eps = np.partition(dz, k - 1, axis=1)[:, k - 1]
        # self-distance is 0 < eps and is excluded by subtracting one
        nx = np.sum(dx < eps[:, None], axis=1) - 1
        ny = np.sum(dy < eps[:, None], axis=1) - 1
        return nx, ny

    starts = range(0, n, _CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _tree_counts(x, y, k, threads):
    joint = np.hstack([x, y])
    workers = threads if threads > 1 else 1
    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf, workers=workers)
    eps = dist[:, k]
    # strict inequality: shrink the radius to the next float below eps
    r = np.nextafter(eps, 0.0)
    nx = cKDTree(x).query_ball_point(x, r, p=np.inf, return_length=True, workers=workers) - 1
    ny = cKDTree(y).query_ball_point(y, r, p=np.inf, return_length=True, workers=workers) - 1
    return np.asarray(nx), np.asarray(ny)


def neighbor_counts(x, y, k=3, *, method="auto", threads=None):
    """Per-point marginal counts (n_x, n_y) strictly inside the k-th joint neighbour distance."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if method == "auto":
        method = "brute" if len(x) <= BRUTE_FORCE_MAX else "tree"
    fn = {"brute": _brute_counts, "tree": _tree_counts}[method]
    return fn(x, y, k, _threads(threads))


def ksg_mi(x, y, cfg: KsgConfig | None = None, *, method="auto", threads=None) -> float:
    """KSG estimate of I(X; Y) from paired samples (rows)."""
    cfg = cfg or KsgConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    n = len(x)
    if len(y) != n:
        raise ValueError(f"x has {n} rows, y has {len(y)}")
    if n <= cfg.k:
        raise ValueError(f"need more than k={cfg.k} samples, got {n}")
    for name, block in (("x", x), ("y", y)):
        if block.shape[1] == 0 or np.all(np.ptp(block, axis=0) == 0):
            raise ValueError(f"{name} block has zero variance")
    x, y = _break_ties(x, y)
    nx, ny = neighbor_counts(x, y, cfg.k, method=method, threads=threads)
    mi = digamma(cfg.k) + digamma(n) - np.mean(digamma(nx + 1.0) + digamma(ny + 1.0))
    if cfg.units == "bits":
        mi /= math.log(2.0)
    return float(mi)
