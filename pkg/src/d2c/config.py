"""Training configuration and its ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

# lambda presets: 1e-4 from the experiments text, 1/17500 from the hyperparameter table
LAMBDA_PRESETS = {"text": 1e-4, "table": 1.0 / 17500}


@dataclass
class TrainConfig:
    # objective
    lam: float = 1e-4
    diffusion_weight: float = 1.0
    weights: str = "uniform"
    sigma_pix: float = 0.1
    # optimization
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    # diffusion-prior refinement with the autoencoder frozen
    prior_epochs: int = 0
    prior_batch_size: int = 256
    prior_lr: float = 1e-3
    # data
    dataset: str = "synthetic"
    n_images: int = 4000
    image_size: int = 16
    channels: int = 3
    disc_rate: float = 0.5
    warm_rate: float = 0.5
    quadrant_probs: str = "0.25,0.25,0.25,0.25"
    data_seed: int = 0
    holdout: float = 0.2
    # architecture
    latent_dim: int = 32
    enc_hidden: str = "512,256"
    dec_hidden: str = "256,512"
    pred_width: int = 256
    pred_blocks: int = 2
    proj_dim: int = 16
    tau: float = 0.1
    key_momentum: float = 0.99
    queue_size: int = 0
    # augmentation
    crop_scale_min: float = 0.6
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: float = 0.3
    grayscale_prob: float = 0.1
    # schedule
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    # metrics
    probe_attribute: str = "hue=warm"
    probe_labels: int = 100
    fid_every: int = 0
    fid_samples: int = 500
    fid_steps: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lr < 0 or self.prior_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.weights not in ("uniform", "variational"):
            raise ConfigError(f"unknown weights kind {self.weights!r}")
        if not 0 < self.holdout < 1:
            raise ConfigError("holdout must lie in (0, 1)")
        if "=" not in self.probe_attribute:
            raise ConfigError("probe_attribute must look like attribute=value")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def int_tuple(self, name: str) -> tuple[int, ...]:
        return tuple(int(v) for v in getattr(self, name).split(",") if v.strip())

    def float_tuple(self, name: str) -> tuple[float, ...]:
        return tuple(float(v) for v in getattr(self, name).split(",") if v.strip())

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n".replace("'", "") for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, types[key], lineno)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _coerce(key: str, value: str, typ, lineno: int):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            if key == "lam" and value in LAMBDA_PRESETS:
                return LAMBDA_PRESETS[value]
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
