"""Run configuration: presets, file loading, validation and merging."""

from __future__ import annotations

import copy
import json
import math
import os
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


DEFAULTS = {
    "run": {"out": "runs/desk", "seed": 0, "preset": "desk", "workers": 1},
    "simulate": {
        "n_scenes": 80, "duration": 1.0, "fps": 50.0, "split_fractions": [0.7, 0.15, 0.15],
        "wearer_faces_speaker": True, "wearer_speech": 0.0, "sample_rate": 16000,
        "mic_spacing": 0.16, "head_shadow": 1.0, "reverb_tail": 0.4, "reverb_drr_db": 0.0,
        "noise_snr_db": math.inf,
    },
    "featurize": {"window": 1024, "hop": 320, "n_lags": 96, "patch": 16},
    "model": {"depth": 2, "heads": 4, "hidden": 64, "ff": 128, "pre_ln": False},
    "train": {
        "epochs": 10, "batch_size": 64, "lr": 1e-3, "optimizer": "adam", "momentum": 0.9,
        "sigma": 4.0, "patience": 4, "ablation": True, "max_chunks": 0,
    },
    "evaluate": {"checkpoint": "best", "srp": True, "audio_only": True, "threshold": 2.0},
    "report": {"n_examples": 2},
}

PRESETS = {
    "desk": {},
    # numbers as published for the full-scale setup; not needed for acceptance
    "paper": {
        "run": {"out": "runs/paper"},
        "simulate": {"n_scenes": 315, "duration": 120.0, "sample_rate": 48000,
                     "split_fractions": [265, 30, 20]},
        "model": {"hidden": 128, "ff": 256},
        "train": {"epochs": 30, "batch_size": 512, "optimizer": "sgd", "patience": 5},
    },
    # one 8 s scene (200 chunks), tiny model, used to check that training can overfit
    "smoke": {
        "run": {"out": "runs/smoke"},
        "simulate": {"n_scenes": 1, "duration": 8.0},
        "model": {"depth": 1, "heads": 2, "hidden": 16, "ff": 32},
        "train": {"epochs": 200, "batch_size": 50, "lr": 3e-3, "patience": 1000, "ablation": False},
    },
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k} must be a table")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = _coerce(base[k], v, f"{where}{k}")
    return out


def _coerce(default, value, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, str) and value in ("inf", "-inf"):
            return float(value)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def load_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text.decode("utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def resolve(path=None, preset: str | None = None, seed: int | None = None,
            workers: int | None = None, env=None) -> dict:
    """Defaults, then the preset, then the file, then command-line flags.

    The preset named on the command line wins over one named in the file.
    ``EGODOA_OUT`` in the environment replaces the output root.
    """
    env = os.environ if env is None else env
    user = load_file(path) if path is not None else {}
    if not isinstance(user, dict):
        raise ConfigError("config root must be a table")
    run = user.get("run", {})
    if not isinstance(run, dict):
        raise ConfigError("config key run must be a table")
    name = preset or run.get("preset", DEFAULTS["run"]["preset"])
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = _merge(DEFAULTS, PRESETS[name])
    cfg = _merge(cfg, user)
    cfg["run"]["preset"] = name
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
    if workers is not None:
        cfg["run"]["workers"] = int(workers)
    if env.get("EGODOA_OUT"):
        cfg["run"]["out"] = env["EGODOA_OUT"]
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    sim, tr, md = cfg["simulate"], cfg["train"], cfg["model"]
    if sim["n_scenes"] <= 0 or sim["duration"] <= 0 or sim["fps"] <= 0:
        raise ConfigError("simulate: n_scenes, duration and fps must be positive")
    fr = sim["split_fractions"]
    if len(fr) != 3 or any((not isinstance(f, (int, float))) or f < 0 for f in fr) or sum(fr) <= 0:
        raise ConfigError("simulate.split_fractions needs three non-negative numbers")
    if sim["sample_rate"] not in (16000, 48000):
        raise ConfigError("simulate.sample_rate must be 16000 or 48000")
    if cfg["run"]["workers"] < 1:
        raise ConfigError("run.workers must be at least 1")
    if md["hidden"] % md["heads"]:
        raise ConfigError("model.hidden must be divisible by model.heads")
    if tr["optimizer"] not in ("sgd", "momentum", "adam"):
        raise ConfigError(f"train.optimizer {tr['optimizer']!r} not in sgd/momentum/adam")
    if tr["epochs"] <= 0 or tr["batch_size"] <= 0 or tr["lr"] <= 0:
        raise ConfigError("train: epochs, batch_size and lr must be positive")
    if cfg["evaluate"]["checkpoint"] not in ("best", "last"):
        raise ConfigError("evaluate.checkpoint must be 'best' or 'last'")
    fz = cfg["featurize"]
    if fz["hop"] <= 0 or fz["window"] <= 0 or fz["n_lags"] <= 0 or fz["n_lags"] > fz["window"]:
        raise ConfigError("featurize: bad window/hop/n_lags")


def to_json(cfg: dict) -> str:
    """Stable JSON; infinities are spelled out as strings."""
    def fix(v):
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, list):
            return [fix(x) for x in v]
        if isinstance(v, float) and not math.isfinite(v):
            return "inf" if v > 0 else "-inf"
        return v
    return json.dumps(fix(cfg), indent=2, sort_keys=True) + "\n"
