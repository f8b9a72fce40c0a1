"""Flat dotted-key configuration shared by every CLI subcommand.

Config files are TOML; nested tables flatten to dotted keys, so
``[train]\nepochs = 20`` and ``train.epochs = 20`` are the same setting.
Unknown keys are rejected. The resolved configuration is written back as a
sorted ``key = value`` list, which is itself a valid config file.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import tomli

from .attention import Regularizer
from .bounds import SweepConfig
from .data import SyntheticConfig
from .model import ModelConfig
from .rng import derive_seed
from .train import TrainConfig

DEFAULTS: dict[str, Any] = {
    "run.seed": 0,
    "run.record_wall_time": False,
    "data.source": "synthetic",
    "data.csv": "",
    "data.n_nodes": 20,
    "data.length": 2016,
    "data.graph_density": 0.2,
    "data.noise_std": 0.1,
    "data.time_of_day": False,
    "data.window": 12,
    "data.horizon": 12,
    "data.stride": 1,
    "model.d_model": 16,
    "model.n_heads": 8,
    "model.d_k": 8,
    "model.d_v": 8,
    "model.d_emb": 8,
    "model.pe": "sinusoidal",
    "model.share_gcn_weight": False,
    "train.variant": "no_reg",
    "train.lr0": 1e-3,
    "train.epochs": 150,
    "train.warmup_epochs": 5,
    "train.batch_size": 16,
    "train.weight_decay": 1e-4,
    "train.seeds": [0, 1, 2, 3],
    "train.horizons_report": [3, 6, 12],
    "train.penalty": -0.1,
    "train.dropout_p": 0.2,
    "sweep.T_values": [2, 4, 8, 16, 32, 64],
    "sweep.samples": 100,
    "sweep.d_model": 8,
    "sweep.d_k": 8,
    "sweep.d_v": 8,
    "sweep.norm": "spectral",
    "gradcheck.configs": 200,
    "gradcheck.T": 0,
    "gradcheck.attention_tol": 1e-5,
    "gradcheck.softmax_tol": 1e-5,
    "gradcheck.model_tol": 1e-4,
    "gradcheck.model_coords": 50,
    "export.checkpoint": "",
    "export.split": "test",
}


class ConfigError(ValueError):
    pass


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            value = [value]
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected a list of integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def merge(base: dict[str, Any], updates: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for k, v in updates.items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = _coerce(k, v)
    return out


def parse_value(text: str) -> Any:
    """Parse the right-hand side of an override as a TOML value; bare words stay strings."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    k, v = item.split("=", 1)
    return k.strip(), parse_value(v.strip())


def load(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    if path:
        try:
            raw = tomli.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        cfg = merge(cfg, flatten(raw))
    return merge(cfg, overrides or {})


def dumps(cfg: dict[str, Any]) -> str:
    lines = [f"{k} = {json.dumps(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def component_seed(cfg: dict[str, Any], component: str) -> int:
    """Child seed of the root seed for a named component."""
    return derive_seed(cfg["run.seed"], component)


def synthetic_config(cfg: dict[str, Any]) -> SyntheticConfig:
    return SyntheticConfig(
        n_nodes=cfg["data.n_nodes"],
        length=cfg["data.length"],
        seed=component_seed(cfg, "data"),
        graph_density=cfg["data.graph_density"],
        noise_std=cfg["data.noise_std"],
    )


def model_config(cfg: dict[str, Any], n_nodes: int, d_x: int) -> ModelConfig:
    return ModelConfig(
        n_nodes=n_nodes,
        d_x=d_x,
        window=cfg["data.window"],
        horizon=cfg["data.horizon"],
        d_model=cfg["model.d_model"],
        n_heads=cfg["model.n_heads"],
        d_k=cfg["model.d_k"],
        d_v=cfg["model.d_v"],
        d_emb=cfg["model.d_emb"],
        pe=cfg["model.pe"],
        share_gcn_weight=cfg["model.share_gcn_weight"],
    )


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        lr0=cfg["train.lr0"],
        epochs=cfg["train.epochs"],
        warmup_epochs=cfg["train.warmup_epochs"],
        batch_size=cfg["train.batch_size"],
        weight_decay=cfg["train.weight_decay"],
        seeds=[derive_seed(cfg["run.seed"], "train", s) for s in cfg["train.seeds"]],
        horizons_report=cfg["train.horizons_report"],
        penalty=cfg["train.penalty"],
        dropout_p=cfg["train.dropout_p"],
    )


def sweep_config(cfg: dict[str, Any]) -> SweepConfig:
    return SweepConfig(
        T_values=cfg["sweep.T_values"],
        samples=cfg["sweep.samples"],
        seed=component_seed(cfg, "sweep"),
        d_model=cfg["sweep.d_model"],
        d_k=cfg["sweep.d_k"],
        d_v=cfg["sweep.d_v"],
        norm=cfg["sweep.norm"],
    )


def regularizer(kind: str, cfg: dict[str, Any]) -> Regularizer:
    if kind == "penalty":
        return Regularizer.penalty(cfg["train.penalty"])
    if kind == "dropout":
        return Regularizer.dropout(cfg["train.dropout_p"])
    return Regularizer(kind)
