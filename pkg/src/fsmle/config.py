"""Scenario configuration: JSON schema, defaults and model construction."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema
import numpy as np
from scipy import special

from .models import (
    GLM_KINDS,
    IID_FAMILIES,
    IID_P,
    LAW_NAMES,
    Law,
    Model,
    TruthSpec,
    build_glm,
    build_iid,
    build_lad,
    load_design,
    normal_design,
    orthonormal_design,
)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}

_LAW = {
    "type": "object",
    "required": ["name"],
    "additionalProperties": False,
    "properties": {
        "name": {"enum": list(LAW_NAMES)},
        "scale": {"type": "number", "exclusiveMinimum": 0},
        "df": {"type": "number", "exclusiveMinimum": 0},
    },
}

_MEAN_FN = {
    "type": "object",
    "required": ["link", "theta"],
    "additionalProperties": False,
    "properties": {
        "link": {"enum": ["identity", "logit", "probit", "log", "neg_inverse"]},
        "theta": _VEC,
    },
}

_BASE_TRUTH = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["in_family", "custom_mean"]},
        "theta": _VEC,
        "mean": _VEC,
        "mean_fn": _MEAN_FN,
        "law": _LAW,
    },
    "additionalProperties": False,
}

_TRUTH = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["in_family", "custom_mean", "contaminated"]},
        "theta": _VEC,
        "mean": _VEC,
        "mean_fn": _MEAN_FN,
        "law": _LAW,
        "base": _BASE_TRUTH,
        "fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "contaminant": _LAW,
        "contaminant_mean": _NUM,
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["model"],
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "required": ["class", "n", "truth"],
            "additionalProperties": False,
            "properties": {
                "class": {"enum": ["glm", "lad", "iid"]},
                "kind": {"enum": list(GLM_KINDS)},
                "family": {"enum": list(IID_FAMILIES)},
                "n": {"type": "integer", "minimum": 1},
                "p": {"type": "integer", "minimum": 1},
                "design": {
                    "type": "object",
                    "required": ["source"],
                    "additionalProperties": False,
                    "properties": {
                        "source": {"enum": ["normal", "orthonormal", "csv"]},
                        "seed": {"type": "integer", "minimum": 0},
                        "intercept": {"type": "boolean"},
                        "path": {"type": "string"},
                    },
                },
                "truth": _TRUTH,
                "S": {"oneOf": [_VEC, {"type": "number", "exclusiveMinimum": 0}]},
                "density": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "allow_kde": {"type": "boolean"},
                        "kde_seed": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "R": {"type": "integer", "minimum": 100},
                "x_levels": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                             "minItems": 1},
                "r": {"oneOf": [{"const": "auto"}, {"type": "number", "exclusiveMinimum": 0}]},
                "r_x": {"type": "number", "exclusiveMinimum": 0},
                "grid": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "K": {"type": "integer", "minimum": 1},
                        "J": {"type": "integer", "minimum": 1},
                    },
                },
                "nu": {"type": "number", "minimum": 1},
                "g1": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["json", "csv"]}},
            },
        },
    },
}

DEFAULT_RUN = {
    "seed": 0,
    "R": 1000,
    "x_levels": [1.0, 2.0, 3.0],
    "r": "auto",
    "r_x": 2.0,
    "grid": {"K": 64, "J": 8},
    "nu": 1.0,
    "g1": 0.5,
}
DEFAULT_OUTPUT = {"directory": "fsmle_out", "formats": ["json", "csv"]}


def _field(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def validate(cfg: dict) -> None:
    """Schema validation; raises :class:`ConfigError` naming the field."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (len(e.path), list(e.path)))
    if not errors:
        return
    err = errors[0]
    where = _field(err.path)
    if err.validator == "required":
        missing = err.message.split("'")[1]
        where = f"{where}.{missing}" if err.path else missing
        raise ConfigError(f"{where}: required field is missing")
    if err.validator == "additionalProperties":
        raise ConfigError(f"{where}: {err.message}")
    raise ConfigError(f"{where}: {err.message}")


def resolve(cfg: dict) -> dict:
    """Validate and fill defaults; the result is what reports embed."""
    validate(cfg)
    out = copy.deepcopy(cfg)
    run = dict(DEFAULT_RUN)
    run.update(out.get("run", {}))
    grid = dict(DEFAULT_RUN["grid"])
    grid.update(run.get("grid", {}))
    run["grid"] = grid
    out["run"] = run
    output = dict(DEFAULT_OUTPUT)
    output.update(out.get("output", {}))
    out["output"] = output
    m = out["model"]
    cls = m["class"]
    if cls == "glm" and "kind" not in m:
        raise ConfigError("model.kind: required for class glm")
    if cls == "iid" and "family" not in m:
        raise ConfigError("model.family: required for class iid")
    if cls in ("glm", "lad"):
        if "design" not in m:
            raise ConfigError("model.design: required for class " + cls)
        if m["design"]["source"] != "csv" and "p" not in m:
            raise ConfigError("model.p: required unless the design comes from a CSV file")
        if m["design"]["source"] == "csv" and "path" not in m["design"]:
            raise ConfigError("model.design.path: required for source csv")
    if "S" in m and cls != "glm":
        raise ConfigError("model.S: only meaningful for class glm")
    return out


def load(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("<root>: config must be a JSON object")
    return cfg


# ---------------------------------------------------------------------- #
# model construction
# ---------------------------------------------------------------------- #

_LINKS = {
    "identity": lambda w: w,
    "logit": special.expit,
    "probit": special.ndtr,
    "log": np.exp,
    "neg_inverse": lambda w: -1.0 / w,
}


def _law(spec) -> Law | None:
    if spec is None:
        return None
    return Law(spec["name"], scale=spec.get("scale", 1.0), df=spec.get("df"))


def _design(m: dict, base_dir: Path | None) -> np.ndarray:
    d = m["design"]
    n = m["n"]
    if d["source"] == "csv":
        path = Path(d["path"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        X = load_design(path)
        if X.shape[0] != n:
            raise ConfigError(f"model.n: design file has {X.shape[0]} rows, config says {n}")
        if "p" in m and X.shape[1] != m["p"]:
            raise ConfigError(f"model.p: design file has {X.shape[1]} columns, config says {m['p']}")
        return X
    p = m["p"]
    if d["source"] == "orthonormal":
        if n % p:
            raise ConfigError("model.n: orthonormal design needs n divisible by p")
        return orthonormal_design(p, n // p)
    X = normal_design(n, p, d.get("seed", 0))
    if d.get("intercept", False):
        X[:, 0] = 1.0
    return X


def _truth(t: dict, X, p: int, where: str = "model.truth") -> TruthSpec:
    kind = t["type"]
    if kind == "contaminated":
        for key in ("base", "fraction", "contaminant"):
            if key not in t:
                raise ConfigError(f"{where}.{key}: required for contaminated truth")
        base = _truth(t["base"], X, p, where + ".base")
        return TruthSpec.contaminated(base, t["fraction"], _law(t["contaminant"]),
                                      t.get("contaminant_mean", 0.0))
    if kind == "in_family":
        if "theta" not in t:
            raise ConfigError(f"{where}.theta: required for in_family truth")
        if len(t["theta"]) != p:
            raise ConfigError(f"{where}.theta: length {len(t['theta'])} does not match p = {p}")
        return TruthSpec.in_family(t["theta"], _law(t.get("law")))
    if "law" not in t:
        raise ConfigError(f"{where}.law: required for custom_mean truth")
    if "mean" in t:
        mean = np.asarray(t["mean"], dtype=float)
    elif "mean_fn" in t:
        if X is None:
            raise ConfigError(f"{where}.mean_fn: needs a design")
        th = np.asarray(t["mean_fn"]["theta"], dtype=float)
        if th.size != X.shape[1]:
            raise ConfigError(f"{where}.mean_fn.theta: length does not match p = {X.shape[1]}")
        mean = _LINKS[t["mean_fn"]["link"]](X @ th)
    else:
        raise ConfigError(f"{where}.mean: custom_mean truth needs mean or mean_fn")
    return TruthSpec.custom_mean(mean, _law(t["law"]))


def build_model(cfg: dict, base_dir: Path | None = None) -> Model:
    """Model described by a resolved config."""
    m = cfg["model"]
    cls = m["class"]
    if cls == "iid":
        p = IID_P[m["family"]]
        if "p" in m and m["p"] != p:
            raise ConfigError(f"model.p: family {m['family']} has p = {p}")
        return build_iid(m["family"], m["n"], _truth(m["truth"], None, p))
    X = _design(m, base_dir)
    truth = _truth(m["truth"], X, X.shape[1])
    if cls == "glm":
        S = m.get("S")
        if isinstance(S, list) and len(S) != m["n"]:
            raise ConfigError("model.S: length does not match n")
        return build_glm(X, m["kind"], truth, S=S)
    dens = m.get("density", {})
    return build_lad(X, truth, allow_kde=dens.get("allow_kde", True),
                     kde_seed=dens.get("kde_seed", 20240917))
