"""Run configuration: TOML input, schema validation with defaults, and echo."""
from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass
from fractions import Fraction

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..errors import ConfigError
from ..geometry import FAMILIES
from .expr import Expression, ExpressionError

SHAPES = ("unit_square", "l_shape", "cuboids")


@dataclass(frozen=True)
class Key:
    kind: str                  # str int float bool expr expr2 list_float list_int fraction_list matrix cuboids
    default: object = None
    required: bool = False
    choices: tuple = ()
    positive: bool = False
    minimum: float | None = None


SCHEMA = {
    "geometry": {
        "family": Key("str", required=True, choices=tuple(FAMILIES)),
        "deformation": Key("str", "family", choices=("family", "identity")),
        "cell_n": Key("int", 64, minimum=8),
        "thetas": Key("list_float", []),
        "table_count": Key("int", 9, minimum=2),
        "theta": Key("expr", ""),
        "c_J": Key("float", 0.1, positive=True),
    },
    "data": {
        "f": Key("expr2", ["0", "0"]),
        "p_b": Key("expr", "0"),
        "nu": Key("float", 1.0, positive=True),
        "permeability": Key("str", "table", choices=("table", "constant")),
        "K": Key("matrix", [[1.0, 0.0], [0.0, 1.0]]),
        "q_exact": Key("expr", ""),
    },
    "domain": {
        "shape": Key("str", "unit_square", choices=SHAPES),
        "cuboids": Key("cuboids", []),
        "ladder": Key("fraction_list", ["1/4", "1/8", "1/16"]),
        "m": Key("int", 32, minimum=8),
        "macro_n": Key("int", 64, minimum=2),
    },
    "run": {
        "out": Key("str", ""),
        "times": Key("list_float", [0.0]),
        "tol": Key("float", 1e-10, positive=True),
        "mass_tol": Key("float", 0.02, positive=True),
        "eps": Key("str", ""),
        "korn": Key("bool", False),
        "unfold_points": Key("int", 8, minimum=1),
        "resample": Key("int", 64, minimum=2),
        "vtk": Key("bool", True),
        "piola_grids": Key("list_int", [32, 64, 128]),
    },
}

REQUIRED_SECTIONS = {
    "cell": ("geometry",),
    "table": ("geometry",),
    "darcy": ("geometry",),
    "dns": ("geometry",),
    "converge": ("geometry",),
    "diag": ("geometry",),
}


def _fraction(text, path):
    try:
        value = Fraction(str(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a rational number: {text!r}", path) from exc
    if value <= 0:
        raise ConfigError("must be positive", path)
    return value


def _number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", path)
    if not math.isfinite(value):
        raise ConfigError("must be finite", path)
    return float(value)


def _check(key: Key, value, path):
    k = key.kind
    if k == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        if key.choices and value not in key.choices:
            raise ConfigError(f"must be one of {list(key.choices)}, got {value!r}", path)
        return value
    if k == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected true or false, got {value!r}", path)
        return value
    if k == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        if key.minimum is not None and value < key.minimum:
            raise ConfigError(f"must be at least {key.minimum}", path)
        return value
    if k == "float":
        v = _number(value, path)
        if key.positive and not v > 0:
            raise ConfigError("must be positive", path)
        return value
    if k == "expr":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = repr(float(value))
        if not isinstance(value, str):
            raise ConfigError(f"expected an expression string, got {value!r}", path)
        if value:
            try:
                Expression(value)
            except ExpressionError as exc:
                raise ConfigError(str(exc), path) from exc
        return value
    if k == "expr2":
        if not isinstance(value, list) or len(value) != 2:
            raise ConfigError("expected a list of two expressions", path)
        return [_check(Key("expr"), v, f"{path}[{i}]") for i, v in enumerate(value)]
    if k == "list_float":
        if not isinstance(value, list):
            raise ConfigError("expected a list of numbers", path)
        return [_number(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if k == "list_int":
        if not isinstance(value, list) or not value:
            raise ConfigError("expected a non-empty list of integers", path)
        return [_check(Key("int", minimum=2), v, f"{path}[{i}]") for i, v in enumerate(value)]
    if k == "fraction_list":
        if not isinstance(value, list):
            raise ConfigError("expected a list of rationals such as \"1/4\"", path)
        for i, v in enumerate(value):
            _fraction(v, f"{path}[{i}]")
        return [str(v) for v in value]
    if k == "matrix":
        if (not isinstance(value, list) or len(value) != 2
                or any(not isinstance(r, list) or len(r) != 2 for r in value)):
            raise ConfigError("expected a 2x2 matrix", path)
        return [[_number(v, f"{path}[{i}][{j}]") for j, v in enumerate(r)] for i, r in enumerate(value)]
    if k == "cuboids":
        if not isinstance(value, list):
            raise ConfigError("expected a list of [[x0, y0], [x1, y1]] boxes", path)
        out = []
        for i, box in enumerate(value):
            if (not isinstance(box, list) or len(box) != 2
                    or any(not isinstance(c, list) or len(c) != 2 for c in box)):
                raise ConfigError("expected [[x0, y0], [x1, y1]]", f"{path}[{i}]")
            out.append([[str(_fraction_any(c, f"{path}[{i}]")) for c in corner] for corner in box])
        return out
    raise AssertionError(k)


def _fraction_any(value, path):
    if isinstance(value, str):
        try:
            return Fraction(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"not a rational number: {value!r}", path) from exc
    return Fraction(_number(value, path)).limit_denominator(10 ** 6)


def validate(raw: dict, command: str) -> dict:
    """Schema-check ``raw`` and return the effective config with defaults applied."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table")
    for section in raw:
        if section not in SCHEMA:
            raise ConfigError("unknown section", section)
    for section in REQUIRED_SECTIONS.get(command, ()):
        if section not in raw:
            raise ConfigError("missing required section", section)
    cfg = {}
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError("expected a table", section)
        for name in given:
            if name not in keys:
                raise ConfigError("unknown key", f"{section}.{name}")
        out = {}
        for name, key in keys.items():
            path = f"{section}.{name}"
            if name in given:
                out[name] = _check(key, given[name], path)
            elif key.required:
                raise ConfigError("missing required key", path)
            else:
                out[name] = json.loads(json.dumps(key.default))
        cfg[section] = out
    times = cfg["run"]["times"]
    if not times:
        raise ConfigError("needs at least one time sample", "run.times")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("time samples must be strictly increasing", "run.times")
    if cfg["domain"]["shape"] == "cuboids" and not cfg["domain"]["cuboids"]:
        raise ConfigError("shape 'cuboids' needs a non-empty list", "domain.cuboids")
    if cfg["run"]["eps"]:
        _fraction(cfg["run"]["eps"], "run.eps")
    if command == "converge" and len(cfg["domain"]["ladder"]) < 3:
        raise ConfigError("a convergence study needs at least three ladder entries", "domain.ladder")
    return cfg


def load(path, command) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return validate(raw, command)


# ---------------------------------------------------------------------------
# TOML echo (flat sections of scalars and nested lists)
# ---------------------------------------------------------------------------

def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dumps(cfg: dict) -> str:
    lines = []
    for section in SCHEMA:
        if section not in cfg:
            continue
        lines.append(f"[{section}]")
        for name in SCHEMA[section]:
            lines.append(f"{name} = {_toml_value(cfg[section][name])}")
        lines.append("")
    return "\n".join(lines)
