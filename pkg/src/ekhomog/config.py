"""Run configuration: strict TOML parsing, defaults and a stable hash.

A config file is TOML.  Nested tables (``[grid]``) and flat dotted keys
(``grid.n = 128``) are equivalent.  Unknown keys are rejected.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError, ConfigTypeError, MissingRequired, UnknownKey
from .geometry import GENERATORS, DisperseParams
from .model import ElectrolyteSpec, Forcing, SurfaceCharge, validate_electrolyte

# generator name -> accepted ``geometry.params`` keys with defaults
GENERATOR_PARAMS = {
    "perturbed-lattice": {"amplitude": 0.25, "radius_range": [1 / 3, 2 / 3]},
    "bernoulli": {"p_open": 0.5},
    "poisson-voronoi": {"intensity": 1.0, "r": 0.3},
}

# section -> key -> (default, type).  ``REQUIRED`` marks keys without a default.
REQUIRED = object()
SCHEMA = {
    "electrolyte": {
        "z": (REQUIRED, list),
        "n_c": (REQUIRED, list),
        "Pe": (None, list),  # default: all ones
        "beta": (1.0, float),
        "N_sigma": (1.0, float),
    },
    "surface_charge": {
        "kind": ("constant", str),
        "value": (0.0, float),
        "table": ([], list),
    },
    "geometry": {
        "generator": (REQUIRED, str),
        "L": (4.0, float),
        "seed": (0, int),
        "params": ({}, dict),
        "constraints": ({}, dict),
    },
    "grid": {"n": (128, int)},
    "solver": {"tol": (1e-10, float), "max_iter": (0, int)},
    "macro": {"m": (64, int), "f_star": ([0.0, 0.0], list), "E": ([0.0, 0.0], list)},
    "epsilon": {"eps_list": ([], list), "m_list": ([], list)},
    "ensemble": {"M": (1, int), "base_seed": (0, int)},
    "output": {"dir": ("runs", str)},
}
REQUIRED_SECTIONS = ("electrolyte", "geometry")
# sections that do not change any computed number
HASH_EXCLUDED = ("output",)


@dataclass
class RunConfig:
    """Validated configuration; ``raw`` holds the fully defaulted tree."""

    electrolyte: ElectrolyteSpec
    surface_charge: SurfaceCharge
    geometry: dict
    grid: dict
    solver: dict
    macro: dict
    epsilon: dict
    ensemble: dict
    output: dict
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def hash(self):
        return config_hash(self.raw)

    @property
    def forcing(self):
        return Forcing(tuple(self.macro["f_star"]), tuple(self.macro["E"]))

    @property
    def constraints(self):
        return DisperseParams(**self.geometry["constraints"])

    def seeds(self, seed_offset=0):
        base = self.ensemble["base_seed"] + seed_offset
        return [base + r for r in range(self.ensemble["M"])]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.raw == other.raw

    def replace(self, **sections):
        """Copy with whole sections or dotted keys overridden."""
        raw = copy.deepcopy(self.raw)
        for key, value in sections.items():
            sec, _, sub = key.replace("__", ".").partition(".")
            if sub:
                raw[sec][sub] = value
            else:
                raw[sec] = value
        return build_config(raw)


def _coerce(section, key, value, kind):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigTypeError(f"{section}.{key} must be a number, got {type(value).__name__}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigTypeError(f"{section}.{key} must be an integer, got {type(value).__name__}")
        return value
    if not isinstance(value, kind):
        raise ConfigTypeError(f"{section}.{key} must be {kind.__name__}, got {type(value).__name__}")
    return copy.deepcopy(value)


def _fill(tree):
    """Apply defaults and reject unknown keys; returns a new tree."""
    unknown = set(tree) - set(SCHEMA)
    if unknown:
        raise UnknownKey(f"unknown section(s): {', '.join(sorted(unknown))}")
    for sec in REQUIRED_SECTIONS:
        if sec not in tree:
            raise MissingRequired(f"missing section [{sec}]")
    out = {}
    for sec, keys in SCHEMA.items():
        given = tree.get(sec, {})
        if not isinstance(given, dict):
            raise ConfigTypeError(f"[{sec}] must be a table")
        bad = set(given) - set(keys)
        if bad:
            raise UnknownKey(f"unknown key(s) in [{sec}]: {', '.join(sorted(bad))}")
        out[sec] = {}
        for key, (default, kind) in keys.items():
            if key in given:
                out[sec][key] = _coerce(sec, key, given[key], kind)
            elif default is REQUIRED:
                raise MissingRequired(f"missing required key {sec}.{key}")
            else:
                out[sec][key] = copy.deepcopy(default)
    return out


def _fill_generator(geo):
    gen = geo["generator"]
    if gen not in GENERATORS:
        raise ConfigError(f"geometry.generator must be one of {', '.join(GENERATORS)}")
    allowed = GENERATOR_PARAMS[gen]
    bad = set(geo["params"]) - set(allowed)
    if bad:
        raise UnknownKey(f"unknown key(s) in geometry.params for {gen}: {', '.join(sorted(bad))}")
    params = copy.deepcopy(allowed)
    params.update(geo["params"])
    geo["params"] = params
    names = {f.name for f in fields(DisperseParams)}
    bad = set(geo["constraints"]) - names
    if bad:
        raise UnknownKey(f"unknown key(s) in geometry.constraints: {', '.join(sorted(bad))}")
    cons = {f.name: f.default for f in fields(DisperseParams)}
    cons.update(geo["constraints"])
    geo["constraints"] = cons


def build_config(tree) -> RunConfig:
    """Validate a parsed tree and build the :class:`RunConfig`."""
    raw = _fill(tree)
    el = raw["electrolyte"]
    if el["Pe"] is None:
        el["Pe"] = [1.0] * len(el["z"])
    el["z"] = [int(v) if float(v).is_integer() else float(v) for v in el["z"]]
    el["n_c"] = [float(v) for v in el["n_c"]]
    el["Pe"] = [float(v) for v in el["Pe"]]
    spec = validate_electrolyte(ElectrolyteSpec(tuple(el["z"]), tuple(el["n_c"]), tuple(el["Pe"]),
                                                el["beta"], el["N_sigma"]))
    sc = raw["surface_charge"]
    try:
        surface = SurfaceCharge(sc["kind"], sc["value"], tuple(sc["table"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"surface_charge: {exc}") from exc
    _fill_generator(raw["geometry"])
    try:
        DisperseParams(**raw["geometry"]["constraints"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"geometry.constraints: {exc}") from exc
    for key in ("f_star", "E"):
        if len(raw["macro"][key]) != 2:
            raise ConfigError(f"macro.{key} must have two components")
        raw["macro"][key] = [float(v) for v in raw["macro"][key]]
    eps = raw["epsilon"]
    if len(eps["eps_list"]) != len(eps["m_list"]):
        raise ConfigError("epsilon.eps_list and epsilon.m_list differ in length")
    eps["eps_list"] = [float(v) for v in eps["eps_list"]]
    L, n = raw["geometry"]["L"], raw["grid"]["n"]
    for e, m in zip(eps["eps_list"], eps["m_list"]):
        # the perforated grid must coincide with the base grid on every tile
        if abs(m * e * L - n) > 1e-9:
            raise ConfigError(f"epsilon: m={m} at eps={e} gives {m * e * L:g} cells per tile, "
                              f"grid.n is {n}")
    if raw["ensemble"]["M"] < 1:
        raise ConfigError("ensemble.M must be at least 1")
    if raw["grid"]["n"] < 2 or raw["macro"]["m"] < 2:
        raise ConfigError("grid.n and macro.m must be at least 2")
    if not raw["solver"]["tol"] > 0:
        raise ConfigError("solver.tol must be positive")
    return RunConfig(spec, surface, raw["geometry"], raw["grid"], raw["solver"], raw["macro"],
                     raw["epsilon"], raw["ensemble"], raw["output"], raw)


def parse_config(path) -> RunConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), source=path)


def parse_config_text(text, source="<string>") -> RunConfig:
    try:
        tree = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return build_config(tree)


def dump_config(cfg: RunConfig) -> str:
    """Serialise the fully defaulted tree (round-trips through parse)."""
    raw = copy.deepcopy(cfg.raw)
    # TOML has no null; Pe is always filled after validation
    return tomli_w.dumps(raw)


def config_hash(raw) -> str:
    """SHA-256 (first 16 hex digits) of the canonical JSON of every section
    that affects results; independent of key order."""
    data = {k: v for k, v in raw.items() if k not in HASH_EXCLUDED}
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
