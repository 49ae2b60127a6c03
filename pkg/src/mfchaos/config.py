"""YAML experiment configuration with a strict schema.

A config file is either one plan (a mapping of plan fields) or a mapping
with a single key ``experiments`` holding a list of such plans. Every key
not listed in ``SCHEMA`` is rejected.
"""
from __future__ import annotations

import hashlib
from dataclasses import fields

import yaml

from .chaos import ExperimentPlan
from .model import REGISTRY, make_model


class ConfigError(ValueError):
    pass


# field -> (type tag, default description). Defaults come from ExperimentPlan.
SCHEMA = {
    "model": ("str", "registered model name"),
    "statistic": ("str", "path | weak | density"),
    "N_list": ("int-list", "strictly increasing particle counts"),
    "R": ("int", "replications per row"),
    "M": ("int", "reference flow size; must be >= 8 max(N_list)"),
    "dt": ("float", "time step"),
    "T": ("float", "horizon; a whole number of steps"),
    "seed": ("int", "unsigned 64-bit seed"),
    "model_params": ("map", "keyword arguments of the model factory"),
    "init": ("map", "initial law: kind, loc, scale, atoms, weights"),
    "functional": ("str", "weak statistic, a built-in cylinder functional"),
    "bandwidth": ("str-or-float", "silverman or a fixed KDE bandwidth"),
    "weight": ("str", "uniform | z2 weighting of the density error"),
    "total_draws": ("int-or-null", "density: replications are total_draws // N"),
    "kde_batches": ("int", "batches for density standard errors"),
    "grid_step": ("float-or-null", "density evaluation grid spacing"),
    "parametrix": ("map", "density oracle: K, splits, stage_spacing, rules"),
    "picard_tol": ("float", "Picard stopping gap"),
    "picard_max_iter": ("int", "Picard iteration cap"),
    "predictor": ("str", "logN | log_epsN"),
    "expected_slope": ("float-or-null", "slope the verdict compares against"),
    "slope_tol": ("float", "allowed deviation from the expected slope"),
    "require_decreasing": ("bool", "verdict also requires strictly decreasing errors"),
    "threads": ("int", "worker threads; 0 means all cores"),
    "waive_ellipticity": ("bool", "skip the ellipticity check"),
}
INIT_KEYS = {"kind", "loc", "scale", "atoms", "weights"}
PARAMETRIX_KEYS = {"K", "splits", "stage_spacing", "rules"}

assert set(SCHEMA) == {f.name for f in fields(ExperimentPlan)}


def _check_type(key, val, tag):
    def is_int(v):
        return isinstance(v, int) and not isinstance(v, bool)

    def is_num(v):
        return is_int(v) or isinstance(v, float)

    ok = {
        "str": lambda v: isinstance(v, str),
        "int": is_int,
        "float": is_num,
        "bool": lambda v: isinstance(v, bool),
        "map": lambda v: isinstance(v, dict),
        "int-list": lambda v: isinstance(v, list) and all(is_int(x) for x in v),
        "str-or-float": lambda v: isinstance(v, str) or is_num(v),
        "int-or-null": lambda v: v is None or is_int(v),
        "float-or-null": lambda v: v is None or is_num(v),
    }[tag](val)
    if not ok:
        raise ConfigError(f"key {key!r}: expected {tag}, got {val!r}")


def plan_from_mapping(data: dict, where: str = "") -> ExperimentPlan:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}plan must be a mapping")
    unknown = sorted(set(data) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"{where}unknown key {unknown[0]!r}" + (f" (and {unknown[1:]})" if unknown[1:] else ""))
    for key, val in data.items():
        _check_type(where + key, val, SCHEMA[key][0])
    for sub, allowed in (("init", INIT_KEYS), ("parametrix", PARAMETRIX_KEYS)):
        extra = sorted(set(data.get(sub, {})) - allowed)
        if extra:
            raise ConfigError(f"{where}unknown key {sub}.{extra[0]!r}")
    kw = dict(data)
    if isinstance(kw.get("bandwidth"), (int, float)):
        kw["bandwidth"] = repr(float(kw["bandwidth"]))
    if "seed" in kw and not 0 <= kw["seed"] < 2**64:
        raise ConfigError(f"{where}seed must be an unsigned 64-bit integer")
    model = kw.get("model", "linear-mean-field")
    if model not in REGISTRY:
        raise ConfigError(f"{where}unknown model {model!r}; known: {sorted(REGISTRY)}")
    try:
        make_model(model, **kw.get("model_params", {}))
    except TypeError as exc:
        raise ConfigError(f"{where}model_params: {exc}") from None
    if "parametrix" in kw:
        kw["parametrix"] = {**ExperimentPlan().parametrix, **kw["parametrix"]}
    try:
        return ExperimentPlan(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}constraint violated: {exc}") from None


def parse_config(text: str) -> list:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"parse error{loc}: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if isinstance(data, dict) and "experiments" in data:
        if set(data) != {"experiments"}:
            extra = sorted(set(data) - {"experiments"})
            raise ConfigError(f"unknown key {extra[0]!r} next to 'experiments'")
        items = data["experiments"]
        if not isinstance(items, list) or not items:
            raise ConfigError("'experiments' must be a non-empty list")
        return [plan_from_mapping(it, f"experiments[{i}].") for i, it in enumerate(items)]
    return [plan_from_mapping(data)]


def load_config(path) -> list:
    """Plans described by the YAML file at ``path``."""
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def canonical_dump(plans) -> str:
    """Stable YAML text: sorted keys, block style, every field explicit."""
    plans = list(plans)
    body = [p.to_dict() for p in plans]
    data = body[0] if len(body) == 1 else {"experiments": body}
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=False, allow_unicode=False)


def config_hash(plans) -> str:
    return hashlib.sha256(canonical_dump(plans).encode("utf-8")).hexdigest()


def schema_reference() -> str:
    """Human-readable table of keys, types and defaults."""
    default = ExperimentPlan().to_dict()
    lines = []
    for key, (tag, doc) in SCHEMA.items():
        lines.append(f"{key}: {tag}, default {default[key]!r}; {doc}")
    return "\n".join(lines) + "\n"
