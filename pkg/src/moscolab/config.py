"""JSON run configuration: schema, defaults and the data-expression table."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .controls import ClassParams, ControlField, make_diagonal_control
from .geometry import FamilySpec, GridSpec


class ConfigError(ValueError):
    """Raised with the complete list of problems found in a configuration."""

    def __init__(self, kind: str, errors: list[str]):
        super().__init__(f"{kind}: " + "; ".join(errors))
        self.kind = kind
        self.errors = errors


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_point = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

EXPR = {
    "oneOf": [
        _num,
        {"type": "object", "additionalProperties": False, "required": ["const"], "properties": {"const": _num}},
        {"type": "object", "additionalProperties": False, "required": ["sin_product"], "properties": {
            "sin_product": {"type": "object", "additionalProperties": False, "properties": {
                "amp": _num, "k1": _num, "k2": _num}}}},
        {"type": "object", "additionalProperties": False, "required": ["poly"], "properties": {
            "poly": {"type": "array", "items": {"type": "array", "items": _num}, "minItems": 1}}},
        {"type": "object", "additionalProperties": False, "required": ["bump"], "properties": {
            "bump": {"type": "object", "additionalProperties": False, "required": ["center", "width"],
                     "properties": {"center": _point, "width": _pos, "amp": _num}}}},
        {"type": "object", "additionalProperties": False, "required": ["file"], "properties": {
            "file": {"type": "string", "minLength": 1}}},
        {"type": "object", "additionalProperties": False, "required": ["sum"], "properties": {
            "sum": {"type": "array", "items": {"$ref": "#/$defs/expr"}, "minItems": 1}}},
    ],
}

SHAPE = {"type": "object", "required": ["shape"],
         "properties": {"shape": {"enum": ["disk", "rect", "box_interior", "polygon", "point", "channel",
                                           "union", "difference"]}}}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "$defs": {"expr": EXPR, "shape": SHAPE},
    "properties": {
        "grid": {"type": "object", "additionalProperties": False, "properties": {
            "nx": {"type": "integer", "minimum": 3, "maximum": 1025},
            "ny": {"type": "integer", "minimum": 3, "maximum": 1025},
            "box": {"type": "array", "items": _num, "minItems": 4, "maxItems": 4}}},
        "domain": {"$ref": "#/$defs/shape"},
        "domain_b": {"$ref": "#/$defs/shape"},
        "family": {"type": "object", "additionalProperties": False, "required": ["kind", "eps_list"],
                   "properties": {
                       "kind": {"enum": ["dumbbell", "shrinking_hole", "oscillating_crack", "polygon_disk"]},
                       "eps_list": {"type": "array", "items": _pos, "minItems": 1},
                       "parameters": {"type": "object"}}},
        "params": {"type": "object", "additionalProperties": False, "properties": {
            "p": {"type": "number", "minimum": 2, "maximum": 4},
            "alpha": _pos, "beta": _pos,
            "xi1": {"type": "number", "minimum": 0},
            "xi2": {"type": ["number", "null"], "minimum": 0}}},
        "control": {"type": "object", "additionalProperties": False, "properties": {
            "form": {"enum": ["diagonal", "symmetric"]},
            "profile1": {"oneOf": [_num, {"type": "array", "items": _num}]},
            "profile2": {"oneOf": [_num, {"type": "array", "items": _num}]},
            "a11": {"$ref": "#/$defs/expr"}, "a12": {"$ref": "#/$defs/expr"}, "a22": {"$ref": "#/$defs/expr"}}},
        "data": {"type": "object", "additionalProperties": False, "properties": {
            "f": {"$ref": "#/$defs/expr"}, "g": {"$ref": "#/$defs/expr"}, "z_d": {"$ref": "#/$defs/expr"}}},
        "kernel": {"type": "object", "additionalProperties": False, "properties": {
            "kind": {"enum": ["gaussian_ridge", "scaled_identity"]},
            "sigma": _pos, "c": {"type": "number", "minimum": 0}, "delta": _pos}},
        "solver": {"type": "object", "additionalProperties": False, "properties": {
            "tol": _pos, "max_iter": {"type": "integer", "minimum": 1}}},
        "hammerstein": {"type": "object", "additionalProperties": False, "properties": {
            "tol": _pos, "max_iter": {"type": "integer", "minimum": 1}}},
        "optimizer": {"type": "object", "additionalProperties": False, "properties": {
            "max_iter": {"type": "integer", "minimum": 0},
            "tol": _pos,
            "gradient": {"enum": ["auto", "fd", "adjoint"]},
            "fd_step": _pos,
            "state_tol": _pos,
            "hammerstein_tol": _pos}},
        "study": {"type": "object", "additionalProperties": False, "properties": {
            "support_condition": {"type": "boolean"},
            "threshold": _pos, "state_threshold": _pos,
            "slack": {"type": "number", "minimum": 0},
            "warm_start": {"type": "boolean"}}},
        "class_check": {"type": "object", "additionalProperties": False, "properties": {
            "n_samples": {"type": "integer", "minimum": 1}, "tol": {"type": "number", "minimum": 0}}},
        "seed": {"type": "integer", "minimum": 0},
    },
}

DEFAULTS: dict[str, Any] = {
    "grid": {"nx": 33, "ny": 33, "box": [0.0, 0.0, 1.0, 1.0]},
    "params": {"p": 2.0, "alpha": 1.0, "beta": 1.0, "xi1": 0.0, "xi2": None},
    "control": {"form": "diagonal", "profile1": 1.0, "profile2": 1.0},
    "data": {"f": 1.0, "g": 0.0, "z_d": 0.0},
    "kernel": {"kind": "gaussian_ridge", "sigma": 0.1, "c": 1.0, "delta": 0.1},
    "solver": {"tol": 1e-9, "max_iter": 200},
    "hammerstein": {"tol": 1e-9, "max_iter": 100},
    "optimizer": {"max_iter": 200, "tol": 1e-8, "gradient": "auto", "fd_step": 1e-5,
                  "state_tol": 1e-11, "hammerstein_tol": 1e-11},
    "study": {"support_condition": True, "threshold": 1e-2, "state_threshold": 5e-2, "slack": 0.05,
              "warm_start": True},
    "class_check": {"n_samples": 1000, "tol": 1e-10},
    "seed": 0,
}


def _no_duplicates(pairs):
    out = {}
    dups = []
    for k, v in pairs:
        if k in out:
            dups.append(k)
        out[k] = v
    if dups:
        raise ConfigError("duplicate keys", [f"duplicate key {k!r}" for k in dups])
    return out


def _fill(cfg: dict, defaults: dict) -> dict:
    out = copy.deepcopy(cfg)
    for key, val in defaults.items():
        if key not in out:
            out[key] = copy.deepcopy(val)
        elif isinstance(val, dict) and isinstance(out[key], dict):
            out[key] = _fill(out[key], val)
    return out


def _semantic_errors(cfg: dict) -> list[str]:
    errs = []
    p = cfg["params"]
    if p["alpha"] > p["beta"]:
        errs.append(f"params: alpha={p['alpha']} exceeds beta={p['beta']}")
    if p["xi2"] is not None and p["xi1"] > p["xi2"]:
        errs.append("params: xi1 exceeds xi2")
    g = cfg["grid"]
    x0, y0, x1, y1 = g["box"]
    if x1 <= x0 or y1 <= y0:
        errs.append("grid.box: degenerate box")
    elif abs((x1 - x0) / (g["nx"] - 1) - (y1 - y0) / (g["ny"] - 1)) > 1e-12 * (x1 - x0):
        errs.append("grid: cells must be square ((x1-x0)/(nx-1) == (y1-y0)/(ny-1))")
    fam = cfg.get("family")
    if fam and any(b >= a for a, b in zip(fam["eps_list"], fam["eps_list"][1:])):
        errs.append("family.eps_list: must be strictly decreasing")
    return errs


def validate(raw: dict) -> dict:
    """Schema-check ``raw`` (all violations at once) and fill defaults."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            msgs.append(f"{where}: {e.message}")
        raise ConfigError("schema violation", msgs)
    cfg = _fill(raw, DEFAULTS)
    errs = _semantic_errors(cfg)
    if errs:
        raise ConfigError("schema violation", errs)
    return cfg


def load_json(path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("missing file", [f"no such config file: {path}"])
    data = path.read_bytes()
    try:
        raw = json.loads(data, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as e:
        raise ConfigError("malformed JSON", [f"{path}: line {e.lineno} column {e.colno}: {e.msg}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError("schema violation", ["<root>: config must be a JSON object"])
    return raw, data


class ProblemConfig:
    """Validated configuration with typed accessors."""

    def __init__(self, cfg: dict, source: Path | None = None, digest: str = ""):
        self.raw = cfg
        self.source = source
        self.base_dir = source.parent if source is not None else Path.cwd()
        self.hash = digest or hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def grid(self) -> GridSpec:
        g = self.raw["grid"]
        return GridSpec(g["nx"], g["ny"], tuple(g["box"]))

    def params(self) -> ClassParams:
        p = self.raw["params"]
        xi2 = np.inf if p["xi2"] is None else p["xi2"]
        return ClassParams(float(p["p"]), float(p["alpha"]), float(p["beta"]), float(p["xi1"]), float(xi2))

    def field(self, name: str, grid: GridSpec | None = None) -> np.ndarray:
        grid = grid or self.grid()
        X, Y = grid.coords()
        return evaluate_expr(self.raw["data"][name], X, Y, self.base_dir)

    def control(self, grid: GridSpec | None = None) -> ControlField:
        grid = grid or self.grid()
        c = self.raw["control"]
        params = self.params()
        if c["form"] == "diagonal":
            return make_diagonal_control(c["profile1"], c["profile2"], grid, params)
        Xc, Yc = grid.cell_centers()
        e = np.zeros((*grid.cell_shape, 2, 2))
        e[..., 0, 0] = evaluate_expr(c.get("a11", 1.0), Xc, Yc, self.base_dir)
        e[..., 1, 1] = evaluate_expr(c.get("a22", 1.0), Xc, Yc, self.base_dir)
        e[..., 0, 1] = e[..., 1, 0] = evaluate_expr(c.get("a12", 0.0), Xc, Yc, self.base_dir)
        return ControlField(grid, "symmetric", e)

    def family(self) -> FamilySpec:
        f = self.raw.get("family")
        if f is None:
            raise ConfigError("schema violation", ["family: required by this command"])
        return FamilySpec(f["kind"], tuple(f["eps_list"]), dict(f.get("parameters", {})))

    def require(self, *keys: str):
        missing = [k for k in keys if k not in self.raw]
        if missing:
            raise ConfigError("schema violation", [f"{k}: required by this command" for k in missing])


def parse_config(path) -> ProblemConfig:
    raw, data = load_json(path)
    cfg = validate(raw)
    return ProblemConfig(cfg, Path(path), hashlib.sha256(data).hexdigest())


def evaluate_expr(expr, X: np.ndarray, Y: np.ndarray, base_dir: Path = Path(".")) -> np.ndarray:
    """Evaluate an entry of the data-expression table at the sample points (X, Y)."""
    if isinstance(expr, (int, float)) and not isinstance(expr, bool):
        return np.full(X.shape, float(expr))
    (kind, arg), = expr.items()
    if kind == "const":
        return np.full(X.shape, float(arg))
    if kind == "sin_product":
        a, k1, k2 = arg.get("amp", 1.0), arg.get("k1", 1.0), arg.get("k2", 1.0)
        return a * np.sin(k1 * np.pi * X) * np.sin(k2 * np.pi * Y)
    if kind == "poly":
        # arg[i][j] multiplies x^i y^j
        out = np.zeros(X.shape)
        for i, row in enumerate(arg):
            for j, c in enumerate(row):
                if c:
                    out += c * X ** i * Y ** j
        return out
    if kind == "bump":
        (cx, cy), w = arg["center"], arg["width"]
        return arg.get("amp", 1.0) * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * w * w))
    if kind == "file":
        path = Path(arg)
        if not path.is_absolute():
            path = base_dir / path
        try:
            v = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",", ndmin=2)
        except OSError as e:
            raise ConfigError("missing file", [f"data file {path}: {e}"]) from None
        if v.shape != X.shape:
            raise ConfigError("schema violation", [f"data file {path}: shape {v.shape}, expected {X.shape}"])
        return np.asarray(v, float)
    if kind == "sum":
        return sum((evaluate_expr(e, X, Y, base_dir) for e in arg), np.zeros(X.shape))
    raise ConfigError("schema violation", [f"unknown expression {kind!r}"])


__all__ = ["ConfigError", "ProblemConfig", "SCHEMA", "DEFAULTS", "parse_config", "validate", "evaluate_expr"]
