"""Run configuration: a strict JSON schema and its dataclass form.

A config file is a JSON object with exactly these top-level keys (all but
``experiment`` optional)::

    {
      "experiment": "lrmes" | "bridge" | "trading" | "custom",
      "method": "<method name>",
      "seed": <0 .. 2**64 - 1>,
      "out": "<output directory>",
      "params": { <experiment-specific keys> }
    }

Unknown keys at either level are rejected.  The accepted ``params`` keys
are the fields of the experiment's parameter dataclass (see
:data:`PARAM_TYPES`), and their values are range-checked by that
dataclass.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Any

from csmc.errors import ConfigurationError
from csmc.experiments.bridge import BridgeExperimentConfig
from csmc.experiments.custom import CUSTOM_METHODS, CustomExperimentConfig
from csmc.experiments.garch import LRMES_METHODS, LrmesExperimentConfig
from csmc.experiments.trading import TRADING_METHODS, TradingExperimentConfig

PARAM_TYPES = {
    "lrmes": LrmesExperimentConfig,
    "bridge": BridgeExperimentConfig,
    "trading": TradingExperimentConfig,
    "custom": CustomExperimentConfig,
}
METHODS = {
    "lrmes": LRMES_METHODS,
    "bridge": ("csmc-bp",),
    "trading": TRADING_METHODS,
    "custom": CUSTOM_METHODS,
}
DEFAULT_METHOD = {"lrmes": "csmc-forward-pilot", "bridge": "csmc-bp", "trading": "csmc-bp", "custom": "csmc-bp"}
TOP_LEVEL = ("experiment", "method", "seed", "out", "params")
U64_MAX = (1 << 64) - 1


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    method: str
    seed: int = 0
    out: str | None = None
    params: Any = None  # instance of PARAM_TYPES[experiment]

    @property
    def param_dict(self) -> dict:
        return params_to_dict(self.params)


def _field_types(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _coerce(name: str, f: dataclasses.Field, value):
    """Turn a JSON value into the field's Python type, naming the key on failure."""
    default = f.default if f.default is not dataclasses.MISSING else None
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if value is None:
        if "None" in kind:
            return None
        raise ConfigurationError(f"params.{name}: null is not allowed")
    if isinstance(default, bool) or kind == "bool":
        if not isinstance(value, bool):
            raise ConfigurationError(f"params.{name}: expected true/false, got {value!r}")
        return value
    if kind.startswith("int") or isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigurationError(f"params.{name}: expected an integer, got {value!r}")
        return int(value)
    if kind.startswith("float") or isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"params.{name}: expected a number, got {value!r}")
        if math.isnan(value):
            raise ConfigurationError(f"params.{name}: NaN is not allowed")
        return float(value)
    if kind == "tuple" or isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"params.{name}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if kind == "str" or isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"params.{name}: expected a string, got {value!r}")
        return value
    return value


def build_params(experiment: str, raw: dict | None):
    cls = PARAM_TYPES[experiment]
    raw = dict(raw or {})
    fields = _field_types(cls)
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigurationError(f"params.{unknown[0]}: unknown key for experiment '{experiment}'")
    kwargs = {k: _coerce(k, fields[k], v) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise ConfigurationError(_name_key(str(exc), fields)) from None


def _name_key(message: str, fields) -> str:
    # "sigma must be positive" -> "params.sigma: must be positive"
    head, _, rest = message.partition(" ")
    key = head.split("=")[0]
    if key in fields:
        plain = head == key and rest.split(" ", 1)[0] in ("must", "is", "has")
        return f"params.{key}: {rest if plain else message}"
    return f"params: {message}"


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded JSON object; raises :class:`ConfigurationError` naming the key."""
    if not isinstance(data, dict):
        raise ConfigurationError("config: top level must be a JSON object")
    unknown = sorted(set(data) - set(TOP_LEVEL))
    if unknown:
        raise ConfigurationError(f"{unknown[0]}: unknown top-level key")
    experiment = data.get("experiment")
    if experiment not in PARAM_TYPES:
        raise ConfigurationError(f"experiment: expected one of {sorted(PARAM_TYPES)}, got {experiment!r}")
    method = data.get("method") or DEFAULT_METHOD[experiment]
    if method not in METHODS[experiment]:
        raise ConfigurationError(
            f"method: '{method}' is not available for {experiment}; choose from {METHODS[experiment]}"
        )
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= U64_MAX:
        raise ConfigurationError(f"seed: expected an unsigned 64-bit integer, got {seed!r}")
    out = data.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigurationError(f"out: expected a path string, got {out!r}")
    params = data.get("params", {})
    if not isinstance(params, dict):
        raise ConfigurationError("params: expected a JSON object")
    return RunConfig(experiment, method, seed, out, build_params(experiment, params))


def params_to_dict(params) -> dict:
    out = {}
    for f in dataclasses.fields(params):
        v = getattr(params, f.name)
        out[f.name] = [list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, tuple) else v
    return out


def config_to_dict(config: RunConfig) -> dict:
    """Fully resolved form: every parameter spelled out."""
    return {
        "experiment": config.experiment,
        "method": config.method,
        "seed": config.seed,
        "out": config.out,
        "params": params_to_dict(config.params),
    }


def dumps_config(config: RunConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True, allow_nan=False) + "\n"


def loads_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config: invalid JSON ({exc})") from None
    return parse_config(data)


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads_config(fh.read())


def apply_overrides(data: dict, overrides: dict) -> dict:
    """Merge ``params`` overrides (already decoded values) into a raw config object."""
    merged = dict(data)
    params = dict(merged.get("params") or {})
    params.update(overrides)
    merged["params"] = params
    return merged


def decode_value(text: str):
    """Parse an override value as JSON, falling back to a plain string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text

