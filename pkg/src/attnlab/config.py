"""Flat ``key=value`` config files with dotted namespaces (``data.d=1024``).

Every command owns a table of defaults; the default's Python type decides how
a value is parsed.  ``auto`` is accepted wherever the default is ``None`` and
means "derive from the other settings".  Materialized text lists every key in
sorted order with floats at 17 significant digits, so it re-parses to the
identical resolved config.
"""
from __future__ import annotations

import math

AUTO = "auto"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "gen-data": {
        "data.N": 16, "data.d": 256, "data.M": 8, "data.mu_norm": None, "data.snr": 1.0,
        "data.sigma_p": 0.2, "data.cp": None, "data.project_noise": True, "run.seed": 0,
    },
    "train": {
        "data.N": 16, "data.d": 256, "data.M": 8, "data.mu_norm": None, "data.snr": 1.0,
        "data.sigma_p": 0.2, "data.cp": None, "data.project_noise": True,
        "model.d_h": 128, "model.d_v": 128, "model.sigma_h": None, "model.sigma_v": None,
        "model.w_o_mode": "constant-normalized",
        "train.eta": 0.1, "train.epsilon": 0.01, "train.max_steps": 20000, "train.snapshot_every": 10,
        "eval.test_samples": 100, "run.seed": 0,
    },
    "sweep": {
        "sweep.N_values": [2, 4, 6, 8, 10, 12, 14, 16, 18, 20],
        "sweep.snr_min": 0.16, "sweep.snr_max": 15.6, "sweep.snr_count": 8,
        "sweep.test_samples": 100, "sweep.cutoff": 0.2,
        "data.d": 256, "data.M": 8, "data.sigma_p": 0.2, "data.cp": None, "data.project_noise": True,
        "model.d_h": 128, "model.d_v": 128, "model.sigma_h": None, "model.sigma_v": None,
        "model.w_o_mode": "constant-normalized",
        "train.eta": 0.1, "train.epsilon": 0.01, "train.max_steps": 20000,
        "run.seed": 0,
    },
    "dynamics": {
        "dynamics.regime": "benign", "data.N": None, "data.mu_norm": None,
        "data.d": 2048, "data.M": 4, "data.sigma_p": 0.05, "data.cp": 20.0,
        "model.d_h": 1024, "model.d_v": 256, "model.sigma_h": None, "model.sigma_v": None,
        "train.eta": 0.01, "train.epsilon": 0.01, "train.max_steps": 100000, "train.snapshot_every": 5,
        "eval.test_samples": 100, "run.seed": 2024,
    },
    "verify-gradients": {
        "verify.instances": 1, "verify.tolerance": 1e-6, "verify.h": 1e-3,
        "data.N": 4, "data.d": 8, "data.M": 3, "data.mu_norm": 1.0, "data.sigma_p": 0.5, "data.cp": 1.5,
        "model.d_h": 4, "model.d_v": 4, "model.sigma_h": 0.5, "model.sigma_v": 0.5,
        "run.seed": 0,
    },
    "concentration": {
        "concentration.trials": 100, "concentration.delta": 0.1,
        "data.N": 64, "data.d": 1024, "data.M": 16, "data.snr": 1.0, "data.sigma_p": 0.2, "data.cp": None,
        "model.d_h": 512, "model.d_v": 512, "model.sigma_h": None, "model.sigma_v": None,
        "run.seed": 0,
    },
}

# keys whose default is None: the type they take when set explicitly
_NONE_TYPES = {"data.mu_norm": float, "data.cp": float, "model.sigma_h": float, "model.sigma_v": float,
               "data.N": int}

FULL_SCALE = {
    "sweep": {"data.d": 1024, "data.M": 16, "model.d_h": 512, "model.d_v": 512, "sweep.snr_count": 10},
}


def format_value(v) -> str:
    if v is None:
        return AUTO
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _parse_scalar(text, kind, key):
    try:
        if kind is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            x = float(text)
            if not math.isfinite(x):
                raise ValueError(text)
            return x
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_value(key, text, default):
    text = text.strip()
    if default is None:
        if text == AUTO:
            return None
        return _parse_scalar(text, _NONE_TYPES.get(key, str), key)
    if isinstance(default, list):
        kind = type(default[0]) if default else float
        return [_parse_scalar(t.strip(), kind, key) for t in text.split(",") if t.strip()]
    return _parse_scalar(text, type(default), key)


def parse_text(text: str, source: str = "<config>") -> dict:
    """Raw ``key -> string`` pairs; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if not k:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[k] = v.strip()
    return out


def read_config_file(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_text(text, str(path))


def resolve(command: str, raw: dict | None = None, full_scale: bool = False, overrides: dict | None = None) -> dict:
    """Defaults < full-scale preset < config file < command-line overrides."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    if full_scale:
        cfg.update(FULL_SCALE.get(command, {}))
    for k, text in (raw or {}).items():
        if k not in defaults:
            raise ConfigError(f"unknown key {k!r} for command {command}")
        cfg[k] = parse_value(k, text, defaults[k])
    for k, v in (overrides or {}).items():
        if k not in defaults:
            raise ConfigError(f"unknown key {k!r} for command {command}")
        cfg[k] = v
    return cfg


def materialize(cfg: dict) -> str:
    return "".join(f"{k}={format_value(cfg[k])}\n" for k in sorted(cfg))
