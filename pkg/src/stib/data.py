"""Synthetic spiral data and CSV persistence."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SpiralConfig:
    n: int
    seed: int = 0
    noise_enabled: bool = True
    b: float = 10.0
    input_noise_scale: float = 0.1
    target_noise_scale: float = 0.2

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.input_noise_scale < 0 or self.target_noise_scale < 0:
            raise ValueError("noise scales must be non-negative")


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2:
            raise ValueError("x and y must be 2-D")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"row mismatch: x has {x.shape[0]}, y has {y.shape[0]}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if not self.columns:
            object.__setattr__(self, "columns", default_columns(x.shape[1], y.shape[1]))

    def __len__(self):
        return self.x.shape[0]

    @property
    def d_x(self):
        return self.x.shape[1]

    @property
    def d_y(self):
        return self.y.shape[1]

    def fingerprint(self) -> str:
        """64-bit content hash as 16 hex digits."""
        h = hashlib.blake2b(digest_size=8)
        h.update(np.array(self.x.shape + self.y.shape, dtype="<u8").tobytes())
        h.update(self.x.astype("<f8").tobytes())
        h.update(self.y.astype("<f8").tobytes())
        return h.hexdigest()


def default_columns(d_x, d_y):
    return [f"x{i}" for i in range(d_x)] + [f"y{i}" for i in range(d_y)]


def spiral_targets(z0, b=10.0):
    radius = 0.05 * (z0 + b * z0)
    return radius * np.cos(z0), radius * np.sin(z0)


def gen_spiral(cfg: SpiralConfig) -> Dataset:
    """Draw ``cfg.n`` samples of the two-input spiral problem.

    Inputs are uniform on [-4, 4]^2; the hidden coordinate
    ``z0 = 2*x0 + x1`` sets both angle and radius of the 2-D target.
    The generator is numpy's PCG64 seeded with ``cfg.seed``.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = int(cfg.n)
    x = rng.uniform(0.0, 1.0, size=(n, 2)) * 8.0 - 4.0
    eps = rng.standard_normal(size=(n, 3))
    if not cfg.noise_enabled:
        eps[:] = 0.0
    z0 = 2.0 * x[:, 0] + x[:, 1] + cfg.input_noise_scale * eps[:, 0]
    y0, y1 = spiral_targets(z0, cfg.b)
    y = np.column_stack([y0 + cfg.target_noise_scale * eps[:, 1], y1 + cfg.target_noise_scale * eps[:, 2]])
    return Dataset(x, y)


def save_csv(ds: Dataset, path) -> None:
    lines = [",".join(ds.columns)]
    for row in np.hstack([ds.x, ds.y]):
        lines.append(",".join(format(float(v), ".17g") for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_csv(path, d_x: int | None = None, d_y: int | None = None) -> Dataset:
    """Read a dataset written by :func:`save_csv`.

    Columns are assigned to x or y by their name prefix. ``d_x``/``d_y``
    declare the expected schema; missing columns raise DataFormatError.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or not any(h.strip() for h in header):
            raise DataFormatError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            vals = []
            for col, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataFormatError(
                        f"{path}: row {lineno}, column {col + 1} ({header[col]!r}): cannot parse {cell!r}"
                    ) from None
            rows.append(vals)

    x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    y_cols = [i for i, h in enumerate(header) if h.startswith("y")]
    for prefix, cols, want in (("x", x_cols, d_x), ("y", y_cols, d_y)):
        if want is not None:
            names = {header[i] for i in cols}
            missing = [f"{prefix}{i}" for i in range(want) if f"{prefix}{i}" not in names]
            if missing:
                raise DataFormatError(f"{path}: missing column(s) {', '.join(missing)}")
            cols[:] = [header.index(f"{prefix}{i}") for i in range(want)]
    if not x_cols or not y_cols:
        raise DataFormatError(f"{path}: need at least one x* and one y* column")
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return Dataset(data[:, x_cols], data[:, y_cols], [header[i] for i in x_cols + y_cols])


@dataclass(frozen=True)
class Standardizer:
    """Per-column affine scaling with stored statistics, for external data."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "Standardizer":
        def stats(a):
            s = a.std(axis=0)
            return a.mean(axis=0), np.where(s > 0, s, 1.0)

        return cls(*stats(ds.x), *stats(ds.y))

    def transform(self, ds: Dataset) -> Dataset:
        return Dataset((ds.x - self.x_mean) / self.x_scale, (ds.y - self.y_mean) / self.y_scale, ds.columns)

    def inverse(self, ds: Dataset) -> Dataset:
        return Dataset(ds.x * self.x_scale + self.x_mean, ds.y * self.y_scale + self.y_mean, ds.columns)
