"""Nested configuration: defaults, TOML/JSON files and dotted overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import tomli

from .core import AgeGroupPartition
from .errors import ConfigError
from .losses import LossWeights
from .training import AgePretrainConfig, TrainConfig

DEFAULTS = {
    "age_groups": {"bounds": [30, 40, 50]},
    "data": {"root": "data", "size": 64, "seed": 0, "flip": True, "train_fraction": 0.8},
    "loss": {"lambda_adv": 100.0, "lambda_age": None, "lambda_ide": 0.02,
             "alpha_ssim": 0.15, "alpha_fea": 0.025},
    "age_loss": {"reduction": "mean_abs"},
    "pretrain": {"epochs": 50, "batch_size": 128, "lr": 1e-4, "lr_decay": 0.7, "decay_every": 15,
                 "seed": 0, "oracle_seed": 1000, "base_channels": 64},
    "train": {"max_iterations": 2000, "batch_size": 12, "lr_G": 1e-4, "lr_D": 1e-4,
              "adam_beta1": 0.5, "adam_beta2": 0.99, "mode": "pfa_end_to_end",
              "age_net": "dex_multitask", "direction": "aging", "checkpoint_every": 500,
              "keep_last": 3, "seed": 0, "d_steps_per_g": 1, "target_age": "group_mean",
              "base_channels": 32, "n_residual": 4, "upsample": "deconv", "disc_channels": 64},
    "features": {"layer": 10, "seed": 0, "weights": None},
    "eval": {"splits": 10, "far": 1e-3, "threshold": None, "embedder_seed": 1, "max_inputs": None},
}


def load_config(path=None) -> dict:
    """Defaults merged with the file at ``path`` (``.toml`` or ``.json``)."""
    config = copy.deepcopy(DEFAULTS)
    if path is None:
        return config
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            loaded = json.loads(path.read_text())
        else:
            loaded = tomli.loads(path.read_text())
    except (ValueError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    merge(config, loaded)
    return config


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key} must be a table")
            merge(base[key], value, f"{prefix}{key}.")
        else:
            base[key] = value
    return base


def set_key(config: dict, dotted: str, value) -> None:
    section, _, key = dotted.partition(".")
    if section not in config or not isinstance(config[section], dict) or key not in config[section]:
        raise ConfigError(f"unknown config key {dotted}")
    config[section][key] = value


def partition_from(config: dict) -> AgeGroupPartition:
    try:
        return AgeGroupPartition(tuple(config["age_groups"]["bounds"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"age_groups.bounds: {exc}") from exc


def train_config_from(config: dict) -> TrainConfig:
    loss = dict(config["loss"])
    lambda_age = loss.pop("lambda_age")
    overridden = lambda_age is not None
    weights = LossWeights(**loss, lambda_age=0.4 if lambda_age is None else float(lambda_age))
    t = config["train"]
    return TrainConfig(
        **{k: t[k] for k in t},
        image_size=int(config["data"]["size"]),
        flip=bool(config["data"]["flip"]),
        age_reduction=config["age_loss"]["reduction"],
        feature_layer=int(config["features"]["layer"]),
        feature_seed=int(config["features"]["seed"]),
        feature_weights=config["features"]["weights"],
        weights=weights,
        lambda_age_override=overridden,
    )


def pretrain_config_from(config: dict, seed_key: str = "seed") -> AgePretrainConfig:
    p = config["pretrain"]
    return AgePretrainConfig(epochs=int(p["epochs"]), batch_size=int(p["batch_size"]), lr=float(p["lr"]),
                             lr_decay=float(p["lr_decay"]), decay_every=int(p["decay_every"]),
                             seed=int(p[seed_key]), base_channels=int(p["base_channels"]),
                             reduction=config["age_loss"]["reduction"])
