"""Run configuration: YAML file + dotted ``--set`` overrides.

Schema (every key optional; defaults shown by :func:`default_config`)::

    data:
      source: duffing          # duffing | csv
      n_trajectories: 200
      duffing:                 # DuffingConfig fields, plus
        symmetric_stiffness: false
        stiffness_scale: 1.0
      csv:
        files: []              # paths or glob patterns
        input_columns: []
        output_columns: []
        rate: 1.0
        delimiter: ","
      preprocess: []           # ordered ops, e.g. {op: resample, rate: 50},
                               # {op: butterworth, kind: high-pass, cutoff: 0.1, order: 4},
                               # {op: window, length: 100, stride: 100}
    model:
      latent_dim: null         # null -> twice the number of output channels
      hidden_widths: [64, 64, 64]
      activation: tanh
      residual: true
      transition_output_gain: 0.1
      q_init: 0.01
      r_init: 0.01
      sigma0_init: 1.0
      seed: 0
    training:                  # TrainConfig fields
      epochs: 100
      ...
    evaluation:
      mode: rollout            # rollout | filtered | smoothed
      condition_steps: 50
      k: 3
      standardize_rmse: false
      seed: 0
      restarts: 10
      figures: true
"""

from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path

import yaml

from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending field."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


SECTIONS = ("data", "model", "training", "evaluation")


def default_config() -> dict:
    return {
        "data": {
            "source": "duffing",
            "n_trajectories": 200,
            "duffing": {
                "cubic": 1.0,
                "dt": 0.01,
                "steps": 500,
                "forcing": "random",
                "forcing_std": 1.0,
                "init_range": 1.0,
                "seed": 0,
                "symmetric_stiffness": False,
                "stiffness_scale": 1.0,
            },
            "csv": {"files": [], "input_columns": [], "output_columns": [], "rate": 1.0, "delimiter": ","},
            "preprocess": [],
        },
        "model": {
            "latent_dim": None,
            "hidden_widths": [64, 64, 64],
            "activation": "tanh",
            "residual": True,
            "transition_output_gain": 0.1,
            "q_init": 1e-2,
            "r_init": 1e-2,
            "sigma0_init": 1.0,
            "seed": 0,
        },
        "training": TrainConfig().to_dict(),
        "evaluation": {
            "mode": "rollout",
            "condition_steps": 50,
            "k": 3,
            "standardize_rmse": False,
            "seed": 0,
            "restarts": 10,
            "figures": True,
        },
    }


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def parse_override(item: str):
    """``a.b.c=value`` -> (["a", "b", "c"], parsed value); values are YAML scalars."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value {raw!r}: {e}", key) from None
    return key.split("."), value


def apply_overrides(cfg: dict, overrides) -> dict:
    out = copy.deepcopy(cfg)
    for item in overrides or []:
        path, value = parse_override(item)
        if path[0] not in SECTIONS:
            raise ConfigError(f"unknown section {path[0]!r}; expected one of {SECTIONS}", ".".join(path))
        node = out
        for p in path[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError("cannot set a field below a non-mapping value", ".".join(path))
            node = nxt
        node[path[-1]] = value
    return out


def load_config(path=None, overrides=None) -> dict:
    """Defaults <- file <- overrides, then validated."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {p}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        unknown = set(loaded) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section(s) {sorted(unknown)}; expected {SECTIONS}")
        cfg = _merge(cfg, loaded)
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    data = cfg["data"]
    if data.get("source") not in ("duffing", "csv"):
        raise ConfigError(f"must be 'duffing' or 'csv', got {data.get('source')!r}", "data.source")
    if not isinstance(data.get("n_trajectories"), int) or data["n_trajectories"] < 1:
        raise ConfigError("must be a positive integer", "data.n_trajectories")
    if not isinstance(data.get("preprocess"), list):
        raise ConfigError("must be a list of operations", "data.preprocess")
    for i, op in enumerate(data["preprocess"]):
        if not isinstance(op, dict) or op.get("op") not in ("resample", "butterworth", "window"):
            raise ConfigError("each entry needs op: resample | butterworth | window",
                              f"data.preprocess[{i}]")
    model = cfg["model"]
    ld = model.get("latent_dim")
    if ld is not None and (not isinstance(ld, int) or ld < 1):
        raise ConfigError("must be null or a positive integer", "model.latent_dim")
    if model.get("activation") not in ("tanh", "identity"):
        raise ConfigError("must be 'tanh' or 'identity'", "model.activation")
    widths = model.get("hidden_widths")
    if not isinstance(widths, list) or not all(isinstance(w, int) and w > 0 for w in widths):
        raise ConfigError("must be a list of positive integers", "model.hidden_widths")
    for key in ("q_init", "r_init", "sigma0_init"):
        if not isinstance(model.get(key), (int, float)) or model[key] <= 0:
            raise ConfigError("must be a positive number", f"model.{key}")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg["training"]) - known
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)}", "training")
    train_config(cfg)
    ev = cfg["evaluation"]
    if ev.get("mode") not in ("rollout", "filtered", "smoothed"):
        raise ConfigError("must be rollout, filtered or smoothed", "evaluation.mode")
    if not isinstance(ev.get("k"), int) or ev["k"] < 1:
        raise ConfigError("must be a positive integer", "evaluation.k")
    if not isinstance(ev.get("condition_steps"), int) or ev["condition_steps"] < 0:
        raise ConfigError("must be a non-negative integer", "evaluation.condition_steps")


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**cfg["training"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), "training") from None


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
