"""Model / training configuration and JSON config-file handling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

# dotted config key -> (section, field)
_KEYS = {
    "embedding.mode": ("model", "embedding_mode"),
    "embedding.d_tok": ("model", "d_tok"),
    "embedding.layers": ("model", "att_layers"),
    "encoder.layers": ("model", "encoder_layers"),
    "encoder.hidden": ("model", "hidden"),
    "encoder.edge_dropout": ("train", "edge_dropout"),
    "vgae.latent": ("model", "latent"),
    "vgae.beta": ("train", "beta"),
    "vgae.kl_warmup": ("train", "kl_warmup"),
    "vgae.adj_init": ("model", "adj_init"),
    "head.hidden": ("model", "head_hidden"),
    "train.epochs": ("train", "epochs"),
    "train.lr": ("train", "lr"),
    "train.refine_every": ("train", "refine_every"),
    "train.refine_alpha": ("train", "refine_alpha"),
    "train.seed": ("train", "seed"),
    "train.normalization": ("train", "normalization"),
}

FULL_EPOCHS = 20000
DESK_EPOCHS = 3000


@dataclass(frozen=True)
class ModelConfig:
    embedding_mode: str = "hetero"
    d_tok: int = 16
    att_layers: int = 1
    encoder_layers: int = 3
    hidden: int = 64
    latent: int = 32
    adj_init: str = "random"
    head_hidden: int = 64

    def __post_init__(self):
        if self.embedding_mode not in ("hetero", "onehot"):
            raise ConfigError(f"embedding.mode must be hetero or onehot, got {self.embedding_mode!r}")
        if self.adj_init not in ("random", "knn"):
            raise ConfigError(f"vgae.adj_init must be random or knn, got {self.adj_init!r}")
        for name in ("d_tok", "encoder_layers", "hidden", "latent", "head_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.att_layers < 0:
            raise ConfigError("embedding.layers must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = FULL_EPOCHS
    lr: float = 0.001
    edge_dropout: float = 0.3
    beta: float = 1.0
    kl_warmup: bool = False
    refine_every: int = 100
    refine_alpha: float = 0.5
    seed: int = 0
    normalization: str = "minmax"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.edge_dropout < 1.0:
            raise ConfigError(f"edge_dropout must lie in [0, 1), got {self.edge_dropout}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.refine_alpha <= 1.0:
            raise ConfigError(f"refine_alpha must lie in [0, 1], got {self.refine_alpha}")
        if self.refine_every < 0:
            raise ConfigError("refine_every must be >= 0 (0 disables refinement)")
        if self.normalization not in ("minmax", "zscore"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def desk(cls, **kw) -> TrainConfig:
        return cls(epochs=DESK_EPOCHS, **kw)


def flatten(cfg: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in cfg.items():
        if isinstance(value, dict):
            out.update(flatten(value, f"{prefix}{key}."))
        else:
            out[f"{prefix}{key}"] = value
    return out


def build_configs(
    cfg: dict | None = None, model: ModelConfig | None = None, train: TrainConfig | None = None
) -> tuple[ModelConfig, TrainConfig]:
    """Apply dotted (or nested) keys from ``cfg`` on top of the given defaults."""
    model = model or ModelConfig()
    train = train or TrainConfig()
    updates = {"model": {}, "train": {}}
    for key, value in flatten(cfg or {}).items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = _KEYS[key]
        updates[section][name] = value
    return replace(model, **updates["model"]), replace(train, **updates["train"])


def to_dotted(model: ModelConfig, train: TrainConfig) -> dict:
    src = {"model": asdict(model), "train": asdict(train)}
    return {key: src[sec][name] for key, (sec, name) in _KEYS.items()}


def load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def known_fields(cls) -> set[str]:
    return {f.name for f in fields(cls)}
