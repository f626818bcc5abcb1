"""Network parameter containers, initialisation and the binary parameter file."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .ndmath import Tape

GROUPS = ("encoder_phi", "decoder_tau", "predictor_theta", "bij_forward_delta", "bij_inverse_delta")
MAIN_GROUPS = GROUPS[:3]
ADV_GROUPS = GROUPS[3:]

MAGIC = b"STIB"
FORMAT_VERSION = 1


class ParamFileError(ValueError):
    pass


@dataclass
class MlpParams:
    """Fully connected net: tanh on every hidden layer, linear output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (1, w.shape[1]):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def n_in(self):
        return self.weights[0].shape[0]

    @property
    def n_out(self):
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays, activation="tanh") -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
        return h

    def with_input_affine(self, mean, scale) -> "MlpParams":
        """Network computing ``self((x - mean) / scale)``, folded into the first layer."""
        out = self.copy()
        w = out.weights[0] / np.reshape(scale, (-1, 1))
        out.biases[0] = out.biases[0] - (np.reshape(mean, (1, -1)) / np.reshape(scale, (1, -1))) @ out.weights[0]
        out.weights[0] = w
        return out

    def with_output_affine(self, mean, scale) -> "MlpParams":
        """Network computing ``self(x) * scale + mean``, folded into the last layer."""
        out = self.copy()
        s = np.reshape(scale, (1, -1))
        out.weights[-1] = out.weights[-1] * s
        out.biases[-1] = out.biases[-1] * s + np.reshape(mean, (1, -1))
        return out

    def on_tape(self, tape: Tape, x: int, leaves: list[int] | None = None) -> int:
        """Record the forward pass; ``leaves`` are node ids for ``arrays()``."""
        if leaves is None:
            leaves = [tape.leaf(a) for a in self.arrays()]
        h = x
        last = len(self.weights) - 1
        for i in range(len(self.weights)):
            h = tape.add(tape.matmul(h, leaves[2 * i]), leaves[2 * i + 1])
            if i < last:
                h = tape.tanh(h)
        return h


def init_mlp(rng: np.random.Generator, sizes, activation="tanh") -> MlpParams:
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        biases.append(np.zeros((1, n_out)))
    return MlpParams(weights, biases, activation)


@dataclass
class StibParams:
    encoder_phi: MlpParams
    decoder_tau: MlpParams
    predictor_theta: MlpParams
    bij_forward_delta: MlpParams
    bij_inverse_delta: MlpParams
    config: TrainConfig = field(default_factory=TrainConfig)

    def group(self, name) -> MlpParams:
        return getattr(self, name)

    def copy(self) -> "StibParams":
        return StibParams(*(self.group(g).copy() for g in GROUPS), config=self.config)

    def equals(self, other: "StibParams") -> bool:
        return all(
            np.array_equal(a, b)
            for g in GROUPS
            for a, b in zip(self.group(g).arrays(), other.group(g).arrays())
        )


def group_shapes(cfg: TrainConfig) -> dict[str, list[int]]:
    """Layer widths per group implied by a config."""
    hid = [cfg.hidden_width] * cfg.hidden_layers
    bij = [cfg.bij_hidden_width] * cfg.bij_hidden_layers
    pred_in = cfg.d_z if cfg.mode == "vae" else cfg.d_z1
    return {
        "encoder_phi": [cfg.d_x, *hid, 2 * cfg.d_z],
        "decoder_tau": [cfg.d_z, *hid, cfg.d_x],
        "predictor_theta": [pred_in, *hid, cfg.d_y],
        "bij_forward_delta": [cfg.d_y, *bij, cfg.d_y],
        "bij_inverse_delta": [cfg.d_y, *bij, cfg.d_y],
    }


def init_params(cfg: TrainConfig, rng: np.random.Generator) -> StibParams:
    shapes = group_shapes(cfg)
    return StibParams(*(init_mlp(rng, shapes[g], cfg.activation) for g in GROUPS), config=cfg)


def _expected_matrix_shapes(sizes):
    out = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        out += [(n_in, n_out), (1, n_out)]
    return out


def dumps_params(params: StibParams) -> bytes:
    """Serialize: magic, u32 version, u32-length config JSON, then per group
    a u32 matrix count and for each matrix u32 rows, u32 cols, f64 LE data."""
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg]
    for g in GROUPS:
        arrays = params.group(g).arrays()
        parts.append(struct.pack("<I", len(arrays)))
        for a in arrays:
            parts.append(struct.pack("<II", *a.shape))
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def save_params(params: StibParams, path) -> None:
    Path(path).write_bytes(dumps_params(params))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ParamFileError(f"parameter file truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def loads_params(buf: bytes, expect: TrainConfig | None = None) -> StibParams:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ParamFileError("not a parameter file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ParamFileError(f"unsupported format version {version}")
    cfg = TrainConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    shapes = group_shapes(expect if expect is not None else cfg)
    groups = []
    for g in GROUPS:
        count = r.u32()
        arrays = []
        for _ in range(count):
            rows, cols = r.u32(), r.u32()
            data = np.frombuffer(r.take(8 * rows * cols), dtype="<f8")
            arrays.append(data.astype(np.float64).reshape(rows, cols))
        got = [a.shape for a in arrays]
        want = _expected_matrix_shapes(shapes[g])
        if got != want:
            raise ParamFileError(f"shape mismatch in group {g}: file has {got}, config implies {want}")
        groups.append(MlpParams.from_arrays(arrays, cfg.activation))
    if r.pos != len(buf):
        raise ParamFileError(f"{len(buf) - r.pos} trailing bytes after parameter data")
    return StibParams(*groups, config=cfg)


def load_params(path, expect: TrainConfig | None = None) -> StibParams:
    """Read a parameter file; ``expect`` validates shapes against another config."""
    return loads_params(Path(path).read_bytes(), expect)
