"""Experiment configuration: JSON file plus flat ``--key value`` overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

from .data import CLASS_SET_STRATEGIES
from .fsl import BackboneConfig

SEED_ENV = "WAVESTYLE_SEED"


@dataclass
class ExperimentConfig:
    # backbone
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    image_size: int = 32
    insertion_blocks: list[int] = field(default_factory=lambda: [1, 2, 3])
    j_list: list[int] = field(default_factory=lambda: [1, 1, 1])
    frequency_mode: str = "full"
    augment_mode: str = "wave_san"
    eps: float = 1e-5
    bn_momentum: float = 0.1
    mixstyle_alpha: float = 0.1
    mixstyle_p: float = 0.5
    noise_scale: float = 0.2
    # loss
    k1: float = 0.2
    k2: float = 0.8
    use_ssl: bool = True
    # episodes
    n: int = 5
    k: int = 1
    q_train: int = 16
    q_eval: int = 15
    strategy: str = "random_class_sets"
    # optimiser
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    # schedule
    seed: int = 0
    pretrain_epochs: int = 30
    pretrain_batch: int = 64
    meta_steps: int = 2000
    val_every: int = 100
    val_episodes: int = 50
    eval_episodes: int = 200
    workers: int = 1
    # data
    source_per_class: int = 100
    target_per_class: int = 40
    data_dir: str = ""

    BACKBONE_KEYS = ("widths", "image_size", "insertion_blocks", "j_list", "frequency_mode", "augment_mode",
                     "eps", "bn_momentum", "mixstyle_alpha", "mixstyle_p", "noise_scale")

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(**{k: getattr(self, k) for k in self.BACKBONE_KEYS})

    def errors(self) -> list[str]:
        errs = list(self.backbone().errors())
        if self.k1 < 0 or self.k2 < 0:
            errs.append(f"k1 and k2 must be non-negative, got {self.k1}, {self.k2}")
        if self.strategy not in CLASS_SET_STRATEGIES:
            errs.append(f"strategy {self.strategy!r} not in {CLASS_SET_STRATEGIES}")
        for name in ("n", "k", "q_train", "q_eval", "pretrain_batch", "val_every", "workers"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pretrain_epochs", "meta_steps", "val_episodes", "eval_episodes"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lr < 0:
            errs.append(f"lr must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errs.append(f"beta1/beta2 must lie in [0, 1), got {self.beta1}, {self.beta2}")
        return errs

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            if key not in d:
                raise KeyError(f"unknown config key {key!r}")
            d[key] = coerce(key, value)
        return ExperimentConfig(**d)


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def coerce(key: str, value):
    """Convert a CLI string (or JSON value) to the type of field ``key``."""
    if key not in _FIELD_TYPES:
        raise KeyError(f"unknown config key {key!r}")
    default = getattr(ExperimentConfig(), key)
    if not isinstance(value, str):
        return list(value) if isinstance(default, list) else value
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: cannot read {value!r} as a boolean")
    if isinstance(default, list):
        text = value.strip()
        if text.startswith("["):
            return [int(v) for v in json.loads(text)]
        return [int(v) for v in text.replace(",", " ").split()] if text else []
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def load_config(path: str | None = None, overrides: dict | None = None, env=None) -> ExperimentConfig:
    """File values, then the ``WAVESTYLE_SEED`` environment variable, then explicit overrides."""
    env = os.environ if env is None else env
    cfg = ExperimentConfig()
    if path:
        with open(path) as fh:
            data = json.load(fh)
        cfg = cfg.replace(**data)
    if env.get(SEED_ENV):
        cfg = cfg.replace(seed=int(env[SEED_ENV]))
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg
