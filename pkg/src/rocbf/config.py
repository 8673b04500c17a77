"""Run configuration: built-in defaults, a YAML file on top, then ``key=value``
overrides from the command line."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "run",
    "vehicle": {
        "wheelbase": 2.51,
        "kp": 0.5,
        "ktheta": 2.0,
        "kd": 0.05,
        "u_max": 1.0,
    },
    "model": {
        "delta_f": 0.1,
        "delta_g": 0.1,
        # range of the road heading rate v * curvature seen by the model
        "exo_range": [-0.2, 0.2],
    },
    "measurement": {
        "n_extra": 2,
        "amplitude": 0.05,
        "delta_x": 0.1,
    },
    "track": {
        "straight": 40.0,
        "radius": 40.0,
        "spacing": 1.0,
    },
    "simulation": {
        "dt": 0.02,
        "horizon": 30.0,
        "integrator": "rk4",
        # "rest" starts at v = d = 0, "cruise" at the longitudinal equilibrium
        "start": "cruise",
        "perturbation": 0.5,
    },
    "demos": {
        # many short rollouts from spread-out starts cover the (c_e, theta_e)
        # plane; a few long ones collapse onto the lane center
        "n_rollouts": 600,
        # rollout length in seconds; null uses simulation.horizon
        "horizon": 4.0,
        "ce_max": 1.0,
        "theta_max": 0.8,
        "safe_bound": 1.0,
    },
    "datasets": {
        "k": 200,
        "fraction": 0.4,
        "eta": None,
        "sigma_layer": 0.05,
        "augment_copies": 2,
        "coords": [2, 3],
        "thin_cell": 0.04,
        "max_points": None,
        "l_h": 2.0,
    },
    "barrier": {
        "ell": 200,
        "sigma2": 16.0,
        "alpha_slope": 1.0,
        "freq_scale": [0.0, 0.0, 1.0, 1.0],
    },
    "consts": {
        "lbar1": 1.0,
        "lbar2": 0.5,
        "lbar3": 0.5,
    },
    "training": {
        "gamma_safe": 0.05,
        "gamma_unsafe": 0.05,
        "gamma_dyn": 0.01,
        "lambda_s": 100.0,
        "lambda_u": 100.0,
        "lambda_d": 100.0,
        "optimizer": "adam",
        "lr": 0.05,
        "lr_decay": 2000.0,
        "max_iters": 5000,
        "batch_size": None,
        "tol": 1e-10,
        "patience": 200,
    },
    "verification": {
        "q_samples": 500,
        "b_pairs": 20000,
        "inflation": 1.5,
        "horizon": 30.0,
        # when true, a failed validity check fails the pipeline
        "require": False,
    },
    "evaluation": {
        "n_rollouts": 100,
        "ce_max": 0.75,
        "theta_max": 0.3,
        "h_tolerance": 0.02,
        "safe_bound": 1.0,
        # number of evaluation traces written to disk
        "save_traces": 3,
    },
    "compare": {
        "n_ce": 5,
        "n_theta": 5,
        "ce_max": 0.75,
        "theta_max": 0.3,
    },
    "thresholds": {
        "max_violation_fraction": 0.05,
        "min_success_rate": 0.95,
    },
}


def deep_merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = deep_merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        val = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value in {item!r}: {e}") from e
    return key.split("."), val


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    for item in overrides:
        keys, val = parse_override(item)
        nested: Any = val
        for k in reversed(keys):
            nested = {k: nested}
        cfg = deep_merge(cfg, nested)
    return cfg


def load_config(path: Optional[str | Path] = None, overrides: Iterable[str] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        cfg = deep_merge(cfg, data)
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    def positive(section, key):
        v = cfg[section][key]
        if not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0:
            raise ConfigError(f"{section}.{key} must be a positive number, got {v!r}")

    for section, key in [
        ("simulation", "dt"), ("simulation", "horizon"), ("demos", "n_rollouts"),
        ("datasets", "k"), ("datasets", "l_h"), ("barrier", "ell"), ("barrier", "sigma2"),
        ("training", "gamma_safe"), ("training", "gamma_unsafe"), ("training", "gamma_dyn"),
        ("training", "lr"), ("training", "max_iters"),
        ("evaluation", "n_rollouts"), ("compare", "n_ce"), ("compare", "n_theta"),
    ]:
        positive(section, key)
    if cfg["simulation"]["start"] not in ("rest", "cruise"):
        raise ConfigError("simulation.start must be 'rest' or 'cruise'")
    if len(cfg["barrier"]["freq_scale"]) != 4:
        raise ConfigError("barrier.freq_scale needs one entry per state")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))
