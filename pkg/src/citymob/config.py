"""Flat key-value run configuration (TOML), merged with command-line overrides."""
from __future__ import annotations

import dataclasses

import tomli
import tomli_w

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (default, meaning)
DEFAULTS = {
    "seed": (0, "run seed; every random stream derives from it"),
    # model
    "d": (64, "embedding dimension, multiple of 4"),
    "layers": (2, "MoE transformer blocks"),
    "heads": (4, "attention heads"),
    "experts": (4, "experts per MoE layer"),
    "top_k": (2, "experts activated per token"),
    "cross_layers": (2, "cross layers in the location tower"),
    "deep_hidden": (0, "deep-branch hidden width, 0 means 2d"),
    "expert_hidden": (0, "expert hidden width, 0 means 4d"),
    "max_seq_len": (48, "padded length T; windows keep at most T-1 stays"),
    # optimisation
    "lr": (3e-4, "AdamW learning rate"),
    "epochs": (50, "maximum epochs"),
    "patience": (3, "early-stopping patience in epochs"),
    "batch_size": (16, "trajectories per batch"),
    "beta1": (0.9, "AdamW beta1"),
    "beta2": (0.999, "AdamW beta2"),
    "eps": (1e-8, "AdamW epsilon"),
    "weight_decay": (0.01, "decoupled weight decay"),
    "clip_norm": (1.0, "global gradient-norm clip, <= 0 disables"),
    # preprocessing
    "window_days": (3, "sliding window length in days"),
    "min_points": (5, "minimum stays per window"),
    "split_seed": (0, "seed of the 6:2:2 user split"),
    # baselines / comparison
    "linear_lr": (1e-2, "learning rate of the linear baseline"),
    "linear_epochs": (200, "epochs of the linear baseline"),
    "compare_seeds": ([0, 1, 2], "seeds of the joint-vs-separate comparison"),
}

MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig)]
TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]


def _coerce(key, value):
    default = DEFAULTS[key][0]
    if isinstance(default, list):
        if isinstance(value, str):
            value = [int(v) for v in value.split(",") if v.strip()]
        return [int(v) for v in value]
    if isinstance(default, bool):
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(default).__name__}") from None
    return value


def resolve(path=None, overrides=None) -> dict:
    """Defaults <- config file <- overrides. Unknown keys are rejected."""
    cfg = {k: v[0] for k, v in DEFAULTS.items()}
    layers = []
    if path is not None:
        try:
            with open(path, "rb") as fh:
                layers.append(tomli.load(fh))
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
    if overrides:
        layers.append(overrides)
    for layer in layers:
        unknown = set(layer) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for k, v in layer.items():
            if v is not None:
                cfg[k] = _coerce(k, v)
    return cfg


def parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})
    except ValueError as e:
        raise ConfigError(str(e)) from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    except ValueError as e:
        raise ConfigError(str(e)) from None


def dump(cfg: dict, path):
    with open(path, "wb") as fh:
        tomli_w.dump(cfg, fh)


def describe() -> str:
    return "\n".join(f"  {k} = {v[0]!r}: {v[1]}" for k, v in DEFAULTS.items())
