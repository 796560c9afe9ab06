"""Flat run configuration: one JSON document covering data generation,
model shape and training. Unknown keys are rejected."""
from __future__ import annotations

import json
from pathlib import Path

from .data import ConfigError
from .focal import AugmentConfig
from .stfe import ModelConfig
from .train import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    # data generation
    "n_continual": 8,
    "n_expanding": 4,
    "steps_per_day": 24,
    "days_p1": 30,
    "days_p2": 3,
    "days_valid": 2,
    "days_test": 7,
    "partition": "spatial",
    "n_expansions": 1,
    "coupling": 0.6,
    "persistence": 0.9,
    "latent_noise": 1.0,
    "obs_noise": 0.3,
    "length_scale": 30.0,
    # training
    "batch_size": 16,
    "lr": 1e-3,
    "patience": 10,
    "max_epochs": 150,
    "tau": 0.5,
    "alpha": 0.3,
    "variant": "focal",
    "strategy": "stev",
    "cosine_sim": False,
    "aug_method": "hybrid",
    "jitter_std": 0.1,
    "drift_max": 0.1,
    "quant_levels": 20,
    "mixup_beta": 0.2,
    # model
    "H": 12,
    "Q": 12,
    "channels": 32,
    "blocks": 4,
    "layers": 2,
    "kernel": 2,
    "dilation_rate": 2,
    "cheb_order": 3,
    "node_dim": 20,
    "time_dim": 10,
    "head_channels": 64,
    "proj_dim": 32,
}

GEN_KEYS = ("n_continual", "n_expanding", "steps_per_day", "days_p1", "days_p2", "days_valid",
            "days_test", "partition", "n_expansions", "coupling", "persistence", "latent_noise",
            "obs_noise", "length_scale")
MODEL_KEYS = ("H", "Q", "channels", "blocks", "layers", "kernel", "dilation_rate", "cheb_order",
              "node_dim", "time_dim", "head_channels", "proj_dim")


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def resolve(doc: dict | None = None, **overrides) -> dict:
    cfg = dict(DEFAULTS)
    for source in (doc or {}), overrides:
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                cfg[key] = _coerce(key, value)
    for key in ("n_continual", "n_expanding"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1, got {cfg[key]}")
    return cfg


def load(path: str | Path | None, **overrides) -> dict:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    return resolve(doc, **overrides)


def gen_kwargs(cfg: dict) -> dict:
    return {k: cfg[k] for k in GEN_KEYS}


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})


def train_config(cfg: dict) -> TrainConfig:
    aug = AugmentConfig(method=cfg["aug_method"], jitter_std=cfg["jitter_std"],
                        drift_max=cfg["drift_max"], quant_levels=cfg["quant_levels"],
                        mixup_beta=cfg["mixup_beta"])
    tc = TrainConfig(batch_size=cfg["batch_size"], lr=cfg["lr"], patience=cfg["patience"],
                     max_epochs=cfg["max_epochs"], tau=cfg["tau"], alpha=cfg["alpha"],
                     variant=cfg["variant"], strategy=cfg["strategy"], aug=aug,
                     cosine_sim=cfg["cosine_sim"], seed=cfg["seed"], model=model_config(cfg))
    tc.validate()
    return tc
