from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

MODES = ("stib", "stib_no_adv", "vae")
ACTIVATIONS = ("tanh",)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    The defaults are the shipped configuration for the spiral benchmark.
    """

    d_x: int = 2
    d_y: int = 2
    d_z0: int = 2
    d_z1: int = 1
    hidden_layers: int = 3
    hidden_width: int = 64
    bij_hidden_layers: int = 2
    bij_hidden_width: int = 32
    activation: str = "tanh"
    lam: float = 100.0
    beta: float = 1.0
    jitter: float = 1e-5
    lr_main: float = 1e-3
    lr_adv: float = 1e-3
    batch_size: int = 256
    epochs: int = 300
    adv_steps_per_main: int = 1
    mi_latent: str = "mean"
    standardize: bool = False
    mode: str = "stib"
    seed: int = 0
    kraskov_k: int = 3

    def __post_init__(self):
        for name in ("d_x", "d_y", "d_z1", "batch_size", "epochs", "kraskov_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("d_z0", "hidden_layers", "bij_hidden_layers", "adv_steps_per_main"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mi_latent not in ("mean", "sample"):
            raise ConfigError(f"mi_latent must be 'mean' or 'sample', got {self.mi_latent!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.lam < 0 or self.beta < 0 or self.jitter < 0:
            raise ConfigError("lam, beta and jitter must be non-negative")
        if self.mode == "stib" and self.d_z0 < 1:
            raise ConfigError("mode 'stib' needs d_z0 >= 1")
        if self.batch_size <= self.d_z0 + self.d_y:
            raise ConfigError(
                f"batch_size ({self.batch_size}) must exceed d_z0 + d_y ({self.d_z0 + self.d_y})"
            )

    @property
    def d_z(self):
        return self.d_z0 + self.d_z1

    @property
    def invariant_dims(self):
        """Width of the latent block treated as invariant (0 in vae mode)."""
        return 0 if self.mode == "vae" else self.d_z0

    @property
    def adversarial(self):
        return self.mode == "stib"

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a flat JSON object")
        return cls.from_dict(d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
