"""Run configuration: nested JSON merged over built-in defaults.

Unknown keys and type mismatches raise :class:`ConfigError` naming the dotted
key. ``config_hash`` is insensitive to key order.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1
CONFIG_DIR_ENV = "CVAR_DISTILL_CONFIG_DIR"

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "data": {
        # with no price file the built-in reference market stands in for real data
        "prices_csv": None,
        "factors_csv": None,
        "fx_csv": None,
        "factor_units": None,
        "anchor": "FRI",
        "min_coverage": 0.90,
        "fill_limit": 3,
    },
    "universe": {
        "n_assets": 36,
        "reference_seed": 7,
        "real_weeks": 312,
        "real_stride": 2,
        "eval_weeks": 260,
        "d2a_asset_seed": 1007,
        "d2a_keep_frac": 0.4,
        "market_asset": None,
    },
    "synth": {"horizon": 1400, "min_hist": 104, "stride": 4, "nu": 6.0, "ridge_lambda": 5.0},
    "features": {
        "lookback": 52,
        "ridge_lambda": 5.0,
        "min_obs": 30,
        "fbar_window": 13,
        "pca_window": 104,
        "vol_window": 26,
        "drawdown_window": 52,
    },
    "teacher": {"alpha": 0.95, "window": 104, "step0": 0.1, "iterations": 5000},
    "split": {"ratios": [0.6, 0.2, 0.2]},
    "network": {"hidden": [256, 128], "activation": "tanh", "prior_sigma": 1.0, "n_variational": 2},
    "train": {
        "beta": None,
        "lambda_cvar": 1.0,
        "lambda_div": 0.05,
        "epochs_s0": 200,
        "cycles": 5,
        "epochs_sup": 50,
        "epochs_unsup": 50,
        "epochs_s2": 100,
        "learning_rate": 0.2,
        "batch_size": None,
        "grad_clip": 5.0,
    },
    "constraints": {"w_max": 0.30, "to_max": 0.30, "cost_rate": 0.001},
    "adaptive": {
        "norm_window": 52,
        "finetune_every": 8,
        "finetune_window": 26,
        "lambda_to": 0.1,
        "finetune_lr": 1e-4,
        "finetune_epochs": 20,
        "normalization": "rolling",
    },
    "eval": {"mc_samples": 20, "hold": 4, "bootstrap": 1000, "stress": "combo", "stress_seed": 0},
    "grid": {"world_seeds": [32, 42, 52], "model_seeds": [0, 1, 2, 3, 4], "workers": 1},
}

# nullable keys accept either null or the listed type
_NULLABLE_TYPES = {
    "data.prices_csv": str, "data.factors_csv": str, "data.fx_csv": str, "data.factor_units": str,
    "universe.market_asset": str, "train.beta": float, "train.batch_size": int,
}

PRESETS: dict = {
    "default": {},
    "desk": {
        "universe": {"n_assets": 8},
        "synth": {"horizon": 600},
        "network": {"hidden": [64, 32]},
        "grid": {"model_seeds": [0, 1, 2]},
    },
}


def _check(value, default, key: str):
    if default is None:
        kind = _NULLABLE_TYPES.get(key)
        if value is None or kind is None:
            return value
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if not isinstance(value, kind) or isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be null or {kind.__name__}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"config key {key!r} must be an object")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key {key!r} has the wrong type ({type(value).__name__})")
    return value


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        v = _check(v, base[k], key)
        out[k] = merge(base[k], v, key + ".") if isinstance(base[k], dict) else copy.deepcopy(v)
    return out


def build_config(overrides: dict | None = None, preset: str = "default") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = merge(DEFAULTS, PRESETS[preset])
    if overrides:
        if overrides.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {overrides['schema_version']!r}")
        cfg = merge(cfg, overrides)
    return cfg


def resolve_path(path) -> Path:
    """Relative config paths fall back to the directory named by the environment."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base and (Path(base) / p).exists():
        return Path(base) / p
    return p


def load_config(path=None, preset: str = "default") -> dict:
    if path is None:
        return build_config(None, preset)
    p = resolve_path(path)
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    data = dict(data)
    preset = data.pop("preset", preset)
    return build_config(data, preset)


def set_dotted(cfg: dict, key: str, value) -> dict:
    """Apply one ``section.key`` override with the same validation as files."""
    parts = key.split(".")
    nested: dict = value
    for p in reversed(parts):
        nested = {p: nested}
    return merge(cfg, nested)


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=1) + "\n"
