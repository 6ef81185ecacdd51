"""Run configuration: defaults, file loading, and dotted-path overrides.

A config is a nested key-value tree.  Every key has a default; file values
and ``--set a.b.c=value`` overrides are deep-merged on top, and unknown keys
are rejected so typos fail before any compute starts.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from . import calib as C
from . import data as D
from . import replay as R
from . import train as TR
from .errors import ConfigError

DEFAULTS: dict = {
    "dataset": {
        "kind": "synthetic",        # synthetic | csv | binary
        "n_classes": 20,
        "input_dim": 16,
        "radius": 7.0,
        "cluster_std": 1.0,
        "n_train": 100,
        "n_val": 20,
        "n_test": 40,
        "train_path": None,         # csv/binary ingestion (train+val pool)
        "test_path": None,
        "val_fraction": 0.2,        # carved from the ingested train pool
    },
    "tasks": {"count": 5, "mode": "cold"},
    "seeds": {"class_shuffle": 1993, "randomness": 0},
    "model": {
        "hidden": [64, 48],
        "feature_dim": 32,
        "activation": "relu",
        "head_mode": "cosine",
        "cosine_scale": 16.0,
        "head_init_std": 0.01,
    },
    "optim": {
        "lr_initial": 0.1,
        "lr_incremental": 0.01,
        "weight_decay_initial": 5e-4,
        "weight_decay_incremental": 2e-4,
        "epochs_initial": 30,
        "epochs_incremental": 50,
        "batch_new": 32,
        "batch_replay": 64,
        "momentum": 0.0,
    },
    "loss": {"lambda_kd": 10.0, "kd_temperature": 2.0, "ce_temperature": 1.0},
    "replay": {"enabled": True, "k": 64, "cap": None},
    "attack": {"enabled": True, "alpha": 8.0, "n_attack": 12, "noise": True,
               "unit_norm": False},
    "adc": {"enabled": True, "magnitude": 2.0, "iterations": 4, "candidates": 100,
            "transfer_lr": 1e-3, "transfer_epochs": 400, "per_class": True},
    "covariance": {"mode": "full", "svd_k": 8},
    "shrinkage": {"grid": list(C.GAMMA_GRID), "coupled": True},
    "augmentation": {
        "enabled": True,
        "crop_prob": 0.5,
        "crop_width_min": 1,
        "crop_width_max": 4,
        "flip_prob": 0.5,
        "jitter_prob": 0.8,
        "jitter_sigma_min": 0.01,
        "jitter_sigma_max": 0.15,
        "scale_min": 0.9,
        "scale_max": 1.1,
    },
    "classifiers": ["linear", "ncm", "mahalanobis"],
    "output": {"dir": "runs", "tag": None},
}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key.startswith("_"):
            continue  # annotation keys ("_note": ...) are documentation only
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(config: dict, dotted: str) -> dict:
    """Apply one ``a.b.c=value`` assignment (value parsed as JSON if possible)."""
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} must look like key.path=value")
    path, raw = dotted.split("=", 1)
    keys = path.strip().split(".")
    patch: dict = {}
    node = patch
    for key in keys[:-1]:
        node[key] = {}
        node = node[key]
    node[keys[-1]] = _parse_value(raw.strip())
    return _merge(config, patch)


def load_config(path=None, overrides=()) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        file_values = json.loads(Path(path).read_text(encoding="utf-8"))
        config = _merge(config, file_values)
    for item in overrides:
        config = apply_override(config, item)
    validate_config(config)
    return config


def validate_config(config: dict) -> None:
    """Check ranges and referenced files before any compute."""
    ds = config["dataset"]
    if ds["kind"] not in ("synthetic", "csv", "binary"):
        raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
    if ds["kind"] != "synthetic":
        for key in ("train_path", "test_path"):
            if ds[key] is None:
                raise ConfigError(f"dataset.{key} required for kind={ds['kind']}")
            if not Path(ds[key]).exists():
                raise ConfigError(f"dataset.{key} does not exist: {ds[key]}")
    D.group_sizes(ds["n_classes"], config["tasks"]["count"], config["tasks"]["mode"])
    for name in config["classifiers"]:
        if name not in ("linear", "ncm", "mahalanobis"):
            raise ConfigError(f"unknown classifier {name!r}")
    if config["covariance"]["mode"] not in ("full", "svd"):
        raise ConfigError("covariance.mode must be 'full' or 'svd'")
    if config["covariance"]["mode"] == "svd":
        if not 1 <= config["covariance"]["svd_k"] <= config["model"]["feature_dim"]:
            raise ConfigError("covariance.svd_k out of range for feature_dim")
    if not config["shrinkage"]["grid"]:
        raise ConfigError("shrinkage.grid must be non-empty")
    # typed sub-configs validate their own numeric ranges
    build_loss_config(config)
    build_optim_config(config, initial=True)
    build_optim_config(config, initial=False)
    if config["attack"]["enabled"]:
        build_attack_config(config)
    build_drift_config(config)


def build_loss_config(config: dict) -> TR.LossConfig:
    loss = config["loss"]
    return TR.LossConfig(loss["lambda_kd"], loss["kd_temperature"], loss["ce_temperature"])


def build_optim_config(config: dict, initial: bool) -> TR.OptimConfig:
    opt = config["optim"]
    return TR.OptimConfig(
        lr=opt["lr_initial"] if initial else opt["lr_incremental"],
        weight_decay=opt["weight_decay_initial"] if initial else opt["weight_decay_incremental"],
        epochs=opt["epochs_initial"] if initial else opt["epochs_incremental"],
        batch_new=opt["batch_new"],
        batch_replay=opt["batch_replay"],
        momentum=opt["momentum"],
    )


def build_attack_config(config: dict) -> R.AttackConfig:
    atk = config["attack"]
    return R.AttackConfig(atk["alpha"], atk["n_attack"], atk["noise"], atk["unit_norm"])


def build_drift_config(config: dict) -> C.DriftConfig:
    adc = config["adc"]
    return C.DriftConfig(adc["magnitude"], adc["iterations"], adc["candidates"])


def build_family(config: dict, input_dim: int | None = None) -> D.AugFamily:
    """Augmentation family; ``input_dim`` should come from the actual data
    (ingested datasets may not match the synthetic-generator width)."""
    aug = config["augmentation"]
    return D.AugFamily(
        enabled=aug["enabled"],
        crop_prob=aug["crop_prob"],
        crop_width_range=(aug["crop_width_min"], aug["crop_width_max"]),
        flip_prob=aug["flip_prob"],
        jitter_prob=aug["jitter_prob"],
        jitter_sigma_range=(aug["jitter_sigma_min"], aug["jitter_sigma_max"]),
        scale_range=(aug["scale_min"], aug["scale_max"]),
        input_dim=config["dataset"]["input_dim"] if input_dim is None else input_dim,
    )


def build_synthetic_spec(config: dict) -> D.SyntheticSpec:
    ds = config["dataset"]
    return D.SyntheticSpec(
        n_classes=ds["n_classes"], input_dim=ds["input_dim"], radius=ds["radius"],
        cluster_std=ds["cluster_std"], n_train=ds["n_train"], n_val=ds["n_val"],
        n_test=ds["n_test"],
    )
