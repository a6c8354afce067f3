"""Experiment configuration: JSON schema, defaults, and model builders.

A config is validated against :data:`SCHEMA` (unknown keys rejected) and then
against semantic rules the schema cannot express.  Every problem is reported
with its dotted path, e.g. ``utility.alpha``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from typing import Callable

import jsonschema
import numpy as np

from .constraints import ConstraintError, ConstraintSet
from .generators import (
    GeneratorSpec,
    make_exponential_generator,
    make_log_generator,
    make_power_generator,
    make_quadratic_generator,
    negate,
)
from .market import MarketModel

COMMANDS = ("solve", "maximize", "verify", "ladder")

_number = {"type": "number"}
_vector = {"type": "array", "items": _number, "minItems": 1}
_matrix = {"type": "array", "items": _vector, "minItems": 1}

_CONSTRAINT = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["full_space", "singleton", "box", "ball", "finite_set", "union", "halfspace"]},
        "d": {"type": "integer", "minimum": 1},
        "point": _vector,
        "lower": _vector,
        "upper": _vector,
        "center": _vector,
        "radius": {"type": "number", "minimum": 0},
        "points": _matrix,
        "members": {"type": "array", "items": {"$ref": "#/$defs/constraint"}, "minItems": 1},
        "normal": _vector,
        "offset": _number,
    },
    "additionalProperties": False,
}

_TERMINAL = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["zero", "constant", "sin", "cos", "tanh", "clipped_linear"]},
        "value": _number,
        "amplitude": _number,
        "frequency": _number,
        "shift": _number,
        "component": {"type": "integer", "minimum": 0},
        "lower": _number,
        "upper": _number,
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "qbsde experiment",
    "type": "object",
    "required": ["command"],
    "$defs": {"constraint": _CONSTRAINT, "terminal": _TERMINAL},
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "model": {
            "type": "object",
            "properties": {
                "d": {"type": "integer", "minimum": 1},
                "m": {"oneOf": [_number, _vector, _matrix]},
                "lambda": {"oneOf": [_number, _vector]},
                "T": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "constraint": {"$ref": "#/$defs/constraint"},
        "utility": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["exponential", "power", "log"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "gamma_u": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "B": {"$ref": "#/$defs/terminal"},
                "x": _number,
            },
            "additionalProperties": False,
        },
        "driver": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["quadratic", "exponential", "power", "log"]},
                "constant": _number,
                "y_coef": _number,
                "z_linear": {"oneOf": [_number, _vector]},
                "z_quadratic": _number,
                "beta": _number,
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "gamma_u": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
            "additionalProperties": False,
        },
        "terminal": {"$ref": "#/$defs/terminal"},
        "numerics": {
            "type": "object",
            "properties": {
                "backend": {"enum": ["auto", "lattice", "regression"]},
                "n_steps": {"type": "integer", "minimum": 1},
                "n_paths": {"type": "integer", "minimum": 1000},
                "seed": {"type": "integer", "minimum": 0},
                "picard_tol": {"type": "number", "exclusiveMinimum": 0},
                "picard_max_iters": {"type": "integer", "minimum": 1},
                "basis_degree": {"type": "integer", "minimum": 0, "maximum": 12},
            },
            "additionalProperties": False,
        },
        "verify": {
            "type": "object",
            "properties": {
                "theorems": {"type": "array", "items": {"enum": [
                    "prop1_bounds", "prop1_energy", "thm2_uniqueness", "thm3_comparison",
                    "prop3_stability", "prop2_appendix_bound", "transform_roundtrip"]}, "uniqueItems": True},
                "n_paths": {"type": "integer", "minimum": 1000},
                "ladder_steps": {"type": "integer", "minimum": 2},
            },
            "additionalProperties": False,
        },
        "dpp": {
            "type": "object",
            "properties": {
                "enabled": {"type": "boolean"},
                "n_paths": {"type": "integer", "minimum": 1000},
                "seed": {"type": "integer", "minimum": 0},
                "shifts": _vector,
                "n_sigma": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "ladder": {
            "type": "object",
            "properties": {
                "n_list": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "gamma": {"type": "number", "exclusiveMinimum": 0},
                "T": {"type": "number", "exclusiveMinimum": 0},
                "steepness": {"type": "number", "exclusiveMinimum": 0},
                "v_max": {"type": "number", "exclusiveMinimum": 0},
                "grid_size": {"type": "integer", "minimum": 2},
                "n_steps": {"type": "integer", "minimum": 2},
            },
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {
                "directory": {"type": "string", "minLength": 1},
                "formats": {"type": "array", "items": {"enum": ["csv", "json", "png"]}, "uniqueItems": True},
                "max_paths": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "model": {"d": 1, "m": 1.0, "lambda": 0.0, "T": 1.0},
    "constraint": None,  # full space of dimension model.d
    "numerics": {"backend": "auto", "n_steps": 400, "n_paths": 100_000, "seed": 1,
                 "picard_tol": 1e-12, "picard_max_iters": 200, "basis_degree": 4},
    "verify": {"theorems": ["prop1_bounds", "prop1_energy", "thm2_uniqueness", "thm3_comparison",
                            "prop3_stability", "prop2_appendix_bound", "transform_roundtrip"],
               "n_paths": 20_000, "ladder_steps": 200},
    "dpp": {"enabled": False, "n_paths": 100_000, "seed": 1, "shifts": [-0.25, 0.25], "n_sigma": 3.0},
    "ladder": {"n_list": [2, 4, 8, 16, 32], "gamma": 1.0, "T": 0.1, "steepness": 50.0, "v_max": 64.0,
               "grid_size": 101, "n_steps": 200},
    "output": {"directory": "qbsde-out", "formats": ["csv", "json", "png"], "max_paths": 100},
}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


def _path(parts) -> str:
    return ".".join(str(p) for p in parts) or "<root>"


def schema_errors(config) -> list[tuple[str, str]]:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    out = []
    for err in sorted(validator.iter_errors(config), key=lambda e: (list(map(str, e.absolute_path)), e.message)):
        out.append((_path(err.absolute_path), err.message))
    return out


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(config: dict) -> dict:
    """Validate and fill defaults; raises :class:`ConfigError` listing every problem."""
    errors = schema_errors(config)
    if errors:
        raise ConfigError(errors)
    out = {"command": config["command"]}
    for key, default in DEFAULTS.items():
        if key in config:
            out[key] = _deep_merge(default, config[key]) if isinstance(default, dict) else copy.deepcopy(config[key])
        elif default is not None:
            out[key] = copy.deepcopy(default)
    for key in ("utility", "driver", "terminal"):
        if key in config:
            out[key] = copy.deepcopy(config[key])
    if out.get("constraint") is None:
        out["constraint"] = {"kind": "full_space", "d": out["model"]["d"]}
    u = out.get("utility")
    if u is not None:
        u.setdefault("x", 1.0)
        u.setdefault("B", {"kind": "zero"})
    if "driver" in out:
        out.setdefault("terminal", {"kind": "zero"})
    errors = semantic_errors(out)
    if errors:
        raise ConfigError(errors)
    return out


def semantic_errors(cfg: dict) -> list[tuple[str, str]]:
    """Rules beyond the schema: required blocks, shapes, set membership of 0."""
    errors = []
    cmd = cfg["command"]
    if cmd == "maximize" and "utility" not in cfg:
        errors.append(("utility", "maximize needs a utility block"))
    if cmd == "solve" and "driver" not in cfg:
        errors.append(("driver", "solve needs a driver block"))
    try:
        model = build_model(cfg)
    except ValueError as exc:
        errors.append(("model", str(exc)))
        model = None
    u = cfg.get("utility")
    if u is not None:
        kind = u["kind"]
        if kind == "exponential" and "alpha" not in u:
            errors.append(("utility.alpha", "exponential utility needs alpha"))
        if kind == "power" and "gamma_u" not in u:
            errors.append(("utility.gamma_u", "power utility needs gamma_u"))
        if kind in ("power", "log"):
            if u["B"].get("kind") != "zero":
                errors.append(("utility.B", f"{kind} utility takes no liability"))
            if not u["x"] > 0:
                errors.append(("utility.x", f"{kind} utility needs x > 0"))
    drv = cfg.get("driver")
    if drv is not None:
        if drv["kind"] == "exponential" and "alpha" not in drv:
            errors.append(("driver.alpha", "exponential driver needs alpha"))
        if drv["kind"] == "power" and "gamma_u" not in drv:
            errors.append(("driver.gamma_u", "power driver needs gamma_u"))
    try:
        cset = ConstraintSet.from_dict(cfg["constraint"], cfg["model"]["d"])
        if cset.d != cfg["model"]["d"]:
            errors.append(("constraint", f"constraint dimension {cset.d} does not match model.d"))
    except (ConstraintError, KeyError, ValueError) as exc:
        errors.append(("constraint", str(exc)))
    for key in ("terminal",):
        if key in cfg:
            errors.extend(_terminal_errors(cfg[key], key, cfg["model"]["d"]))
    if u is not None:
        errors.extend(_terminal_errors(u["B"], "utility.B", cfg["model"]["d"]))
    n_list = cfg["ladder"]["n_list"]
    if any(b <= a for a, b in zip(n_list[:-1], n_list[1:])):
        errors.append(("ladder.n_list", "must be strictly increasing"))
    num = cfg["numerics"]
    if model is not None and num["backend"] == "lattice" and model.d != 1:
        errors.append(("numerics.backend", "lattice backend requires model.d = 1"))
    return errors


def _terminal_errors(spec: dict, where: str, d: int) -> list[tuple[str, str]]:
    out = []
    if spec.get("component", 0) >= d:
        out.append((f"{where}.component", f"component must be < d = {d}"))
    if spec["kind"] == "clipped_linear" and spec.get("lower", -1.0) > spec.get("upper", 1.0):
        out.append((f"{where}.lower", "lower must not exceed upper"))
    return out


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of a resolved config."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def load(path: str) -> dict:
    """Read and resolve a JSON config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([("<root>", f"invalid JSON: {exc}")]) from exc
    except OSError as exc:
        raise ConfigError([("<root>", f"cannot read config: {exc}")]) from exc
    return resolve(raw)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------
def build_model(cfg: dict) -> MarketModel:
    mb = cfg["model"]
    return MarketModel(d=int(mb["d"]), vol=mb["m"], premium=mb["lambda"], T=float(mb["T"]))


def build_constraint(cfg: dict) -> ConstraintSet:
    return ConstraintSet.from_dict(cfg["constraint"], cfg["model"]["d"])


def build_terminal(spec: dict) -> tuple[Callable, float]:
    """Terminal map ``(n, d) -> (n,)`` and its sup-norm."""
    kind = spec["kind"]
    comp = int(spec.get("component", 0))
    amp = float(spec.get("amplitude", 1.0))
    freq = float(spec.get("frequency", 1.0))
    shift = float(spec.get("shift", 0.0))
    if kind == "zero":
        return (lambda w: np.zeros(np.asarray(w).shape[0])), 0.0
    if kind == "constant":
        value = float(spec.get("value", 0.0))
        return (lambda w: np.full(np.asarray(w).shape[0], value)), abs(value)
    if kind in ("sin", "cos", "tanh"):
        fn = {"sin": np.sin, "cos": np.cos, "tanh": np.tanh}[kind]
        return (lambda w: shift + amp * fn(freq * np.asarray(w)[:, comp])), abs(shift) + abs(amp)
    lo = float(spec.get("lower", -1.0))
    hi = float(spec.get("upper", 1.0))
    return (lambda w: np.clip(shift + amp * np.asarray(w)[:, comp], lo, hi)), max(abs(lo), abs(hi))


def build_driver(cfg: dict, model: MarketModel, cset: ConstraintSet) -> GeneratorSpec:
    drv = cfg["driver"]
    kind = drv["kind"]
    if kind == "quadratic":
        return make_quadratic_generator(model, constant=drv.get("constant", 0.0), y_coef=drv.get("y_coef", 0.0),
                                        z_linear=drv.get("z_linear"), z_quadratic=drv.get("z_quadratic", 0.0),
                                        beta=drv.get("beta", 0.0))
    if kind == "exponential":
        return make_exponential_generator(model, cset, drv["alpha"])
    if kind == "power":
        return negate(make_power_generator(model, cset, drv["gamma_u"]))
    return negate(make_log_generator(model, cset))


def backend_for(cfg: dict) -> str:
    b = cfg["numerics"]["backend"]
    if b == "auto":
        return "lattice" if cfg["model"]["d"] == 1 else "regression"
    return b


def is_finite_number(x) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)
