"""Run configuration: a versioned YAML document merged over defaults.

Validation collects every problem it finds instead of stopping at the first,
so a broken file can be fixed in one edit.  The configuration hash is taken
over the canonical JSON of the fully resolved document and is stamped into
every output file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from typing import Any, Optional

import yaml

SCHEMA_VERSION = 1
MODES = ("loglik", "gradient", "optimize", "sample", "simulate", "bench")
KERNEL_NAMES = ("univariate", "vhmc", "phmc")

DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "paths": {"tree": None, "alignment": None, "output_dir": "treegrad-out"},
    "model": {
        "name": "JC69",  # JC69, HKY85, GTR or custom
        "parameters": {},
        "frequencies": None,
        "alpha": None,  # discrete gamma shape; null for a single rate class
        "categories": 4,
        "generator": None,  # custom: path to an m x m CSV
        "root_distribution": None,  # custom: defaults to uniform
        "branch_generators": {},  # branch index -> m x m CSV, not renormalized
    },
    "clock": {
        "mu": 0.003,
        "psi": 0.5,
        "epsilon": 1.0,  # scalar or one value per branch
        "strict": False,
        "mu_prior": "flat_log",
        "mu_meanlog": 0.0,
        "mu_sdlog": 1.0,
        "psi_mean": 1.0 / 3.0,
        "coordinates": "effects",
        "likelihood": True,
    },
    "inference": {
        "hessian": False,
        "lbfgs": {"memory": 10, "max_iterations": 1000, "gradient_tolerance": 1e-6},
        "hmc": {
            "kernels": ["univariate", "vhmc", "phmc"],
            "iterations": 1000,
            "n_steps": 20,
            "warmup": None,
            "step_size": 0.1,
            "target_accept": 0.8,
            "adapt_interval": 10,
            "relative_clamp": 100.0,
            "match_wall_time": False,  # true gives the univariate kernel the HMC wall time; not reproducible
        },
    },
    "simulate": {"tips": 16, "sites": 1000, "mu": 0.003, "psi": 0.0, "time_scale": 25.0},
    "bench": {
        "ns": [64, 128, 256, 512, 1024],
        "sites": 1000,
        "repetitions": 3,
        "fd_repetitions": 1,
        "methods": ["analytic", "finite_difference"],
    },
    "scaling": "auto",
}

# Leaves whose value may be a mapping of arbitrary keys.
_OPEN_MAPPINGS = {("model", "parameters"), ("model", "branch_generators")}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _merge(base: dict, update: dict, path: tuple, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = ".".join(path + (str(key),))
        if key not in base:
            problems.append(f"unknown key '{where}'")
            continue
        if isinstance(base[key], dict) and path + (key,) not in _OPEN_MAPPINGS:
            if not isinstance(value, dict):
                problems.append(f"'{where}' must be a mapping")
                continue
            out[key] = _merge(base[key], value, path + (key,), problems)
        else:
            out[key] = value
    return out


def set_path(config: dict, dotted: str, value) -> None:
    """Override one scalar, e.g. ``set_path(cfg, "inference.hmc.iterations", 200)``."""
    keys = dotted.split(".")
    node = config
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError([f"unknown key '{dotted}'"])
        node = node[k]
    if keys[-1] not in node and tuple(keys[:-1]) not in _OPEN_MAPPINGS:
        raise ConfigError([f"unknown key '{dotted}'"])
    node[keys[-1]] = value


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _check(problems, cond, message):
    if not cond:
        problems.append(message)


def _validate(cfg: dict, mode: str, base_dir: str) -> list[str]:
    p: list[str] = []
    _check(p, cfg["schema_version"] == SCHEMA_VERSION, f"schema_version must be {SCHEMA_VERSION}")
    _check(p, _is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed must be a nonnegative integer")
    _check(p, cfg["scaling"] in ("auto", "always", "never"), "scaling must be auto, always or never")

    paths = cfg["paths"]
    needs_data = mode in ("loglik", "gradient", "optimize", "sample")
    for key in ("tree", "alignment"):
        value = paths[key]
        if value is None:
            if needs_data:
                p.append(f"paths.{key} is required for mode '{mode}'")
        elif not os.path.isfile(resolve(value, base_dir)):
            if needs_data or (mode == "simulate" and key == "tree"):
                p.append(f"paths.{key}: file not found: {value}")
    _check(p, isinstance(paths["output_dir"], str) and paths["output_dir"], "paths.output_dir must be a path")

    m = cfg["model"]
    names = ("JC69", "HKY85", "GTR", "custom")
    _check(p, m["name"] in names, f"model.name must be one of {', '.join(names)}")
    _check(p, isinstance(m["parameters"], dict), "model.parameters must be a mapping")
    if m["name"] == "HKY85":
        _check(p, _is_number(m["parameters"].get("kappa")) and m["parameters"].get("kappa", 0) > 0,
               "model.parameters.kappa must be a positive number for HKY85")
    if m["name"] == "GTR":
        rates = m["parameters"].get("rates")
        _check(p, isinstance(rates, list) and len(rates) == 6 and all(_is_number(r) and r > 0 for r in rates),
               "model.parameters.rates must be six positive numbers for GTR")
    if m["name"] == "custom":
        if m["generator"] is None:
            p.append("model.generator is required for a custom model")
        elif not os.path.isfile(resolve(m["generator"], base_dir)):
            p.append(f"model.generator: file not found: {m['generator']}")
    for k, path in (m["branch_generators"] or {}).items():
        _check(p, _is_int(k) and k >= 0, f"model.branch_generators key {k!r} must be a branch index")
        _check(p, isinstance(path, str) and os.path.isfile(resolve(path, base_dir)),
               f"model.branch_generators[{k}]: file not found: {path}")
    for key in ("frequencies", "root_distribution"):
        f = m[key]
        if f is not None:
            _check(p, isinstance(f, list) and all(_is_number(x) and x >= 0 for x in f)
                   and abs(sum(f) - 1) < 1e-8, f"model.{key} must be nonnegative numbers summing to 1")
    if m["alpha"] is not None:
        _check(p, _is_number(m["alpha"]) and m["alpha"] > 0, "model.alpha must be positive or null")
    _check(p, _is_int(m["categories"]) and m["categories"] >= 1, "model.categories must be a positive integer")

    c = cfg["clock"]
    _check(p, _is_number(c["mu"]) and c["mu"] > 0, "clock.mu must be positive")
    _check(p, _is_number(c["psi"]) and c["psi"] >= 0, "clock.psi must be nonnegative")
    eps = c["epsilon"]
    _check(p, (_is_number(eps) and eps > 0) or (isinstance(eps, list) and all(_is_number(e) and e > 0 for e in eps)),
           "clock.epsilon must be a positive number or a list of them")
    _check(p, isinstance(c["strict"], bool), "clock.strict must be true or false")
    _check(p, isinstance(c["likelihood"], bool), "clock.likelihood must be true or false")
    if not c["strict"] and mode == "sample":
        _check(p, _is_number(c["psi"]) and c["psi"] > 0, "clock.psi must be positive unless clock.strict is set")
    _check(p, c["mu_prior"] in ("flat_log", "lognormal"), "clock.mu_prior must be flat_log or lognormal")
    _check(p, _is_number(c["mu_sdlog"]) and c["mu_sdlog"] > 0, "clock.mu_sdlog must be positive")
    _check(p, _is_number(c["mu_meanlog"]), "clock.mu_meanlog must be a number")
    _check(p, _is_number(c["psi_mean"]) and c["psi_mean"] > 0, "clock.psi_mean must be positive")
    _check(p, c["coordinates"] in ("effects", "rates"), "clock.coordinates must be effects or rates")

    inf = cfg["inference"]
    _check(p, isinstance(inf["hessian"], bool), "inference.hessian must be true or false")
    lb = inf["lbfgs"]
    _check(p, _is_int(lb["memory"]) and lb["memory"] >= 1, "inference.lbfgs.memory must be a positive integer")
    _check(p, _is_int(lb["max_iterations"]) and lb["max_iterations"] >= 1,
           "inference.lbfgs.max_iterations must be a positive integer")
    _check(p, _is_number(lb["gradient_tolerance"]) and lb["gradient_tolerance"] > 0,
           "inference.lbfgs.gradient_tolerance must be positive")
    h = inf["hmc"]
    kernels = h["kernels"]
    _check(p, isinstance(kernels, list) and kernels and all(k in KERNEL_NAMES for k in kernels)
           and len(set(kernels)) == len(kernels),
           f"inference.hmc.kernels must be distinct names from {', '.join(KERNEL_NAMES)}")
    _check(p, _is_int(h["iterations"]) and h["iterations"] >= 1, "inference.hmc.iterations must be a positive integer")
    _check(p, _is_int(h["n_steps"]) and h["n_steps"] >= 1, "inference.hmc.n_steps must be a positive integer")
    if h["warmup"] is not None:
        _check(p, _is_int(h["warmup"]) and h["warmup"] >= 0, "inference.hmc.warmup must be a nonnegative integer")
        if _is_int(h["warmup"]) and _is_int(h["iterations"]):
            _check(p, h["warmup"] < h["iterations"], "inference.hmc.warmup must be below iterations")
    _check(p, _is_number(h["step_size"]) and h["step_size"] > 0, "inference.hmc.step_size must be positive")
    _check(p, _is_number(h["target_accept"]) and 0 < h["target_accept"] < 1,
           "inference.hmc.target_accept must lie in (0, 1)")
    _check(p, _is_int(h["adapt_interval"]) and h["adapt_interval"] >= 1,
           "inference.hmc.adapt_interval must be a positive integer")
    _check(p, _is_number(h["relative_clamp"]) and h["relative_clamp"] > 1,
           "inference.hmc.relative_clamp must exceed 1")
    _check(p, isinstance(h["match_wall_time"], bool), "inference.hmc.match_wall_time must be true or false")

    s = cfg["simulate"]
    _check(p, _is_int(s["tips"]) and s["tips"] >= 2, "simulate.tips must be an integer of at least 2")
    _check(p, _is_int(s["sites"]) and s["sites"] >= 1, "simulate.sites must be a positive integer")
    _check(p, _is_number(s["mu"]) and s["mu"] > 0, "simulate.mu must be positive")
    _check(p, _is_number(s["psi"]) and s["psi"] >= 0, "simulate.psi must be nonnegative")
    _check(p, _is_number(s["time_scale"]) and s["time_scale"] > 0, "simulate.time_scale must be positive")

    b = cfg["bench"]
    _check(p, isinstance(b["ns"], list) and len(b["ns"]) >= 2 and all(_is_int(n) and n >= 2 for n in b["ns"]),
           "bench.ns must list at least two tip counts of 2 or more")
    _check(p, _is_int(b["sites"]) and b["sites"] >= 1, "bench.sites must be a positive integer")
    _check(p, _is_int(b["repetitions"]) and b["repetitions"] >= 1, "bench.repetitions must be a positive integer")
    _check(p, _is_int(b["fd_repetitions"]) and b["fd_repetitions"] >= 1,
           "bench.fd_repetitions must be a positive integer")
    _check(p, isinstance(b["methods"], list) and b["methods"]
           and all(x in ("analytic", "finite_difference") for x in b["methods"]),
           "bench.methods must list analytic and/or finite_difference")
    return p


def resolve(path: Optional[str], base_dir: str) -> Optional[str]:
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def load_config(
    source: Optional[str] = None,
    mode: str = "loglik",
    overrides: Optional[dict] = None,
    base_dir: Optional[str] = None,
) -> dict:
    """Read, merge, override and validate; raises ConfigError listing all problems.

    Relative paths inside the file are resolved against the file's directory.
    """
    problems: list[str] = []
    if mode not in MODES:
        problems.append(f"mode must be one of {', '.join(MODES)}")
    user: dict = {}
    if source is not None:
        try:
            with open(source) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError([f"cannot read config: {exc}"]) from exc
        except yaml.YAMLError as exc:
            raise ConfigError([f"config is not valid YAML: {exc}"]) from exc
        if not isinstance(user, dict):
            raise ConfigError(["config must be a mapping at the top level"])
        base_dir = base_dir or os.path.dirname(os.path.abspath(source))
    base_dir = base_dir or os.getcwd()
    cfg = _merge(DEFAULTS, user, (), problems)
    for dotted, value in (overrides or {}).items():
        try:
            set_path(cfg, dotted, value)
        except ConfigError as exc:
            problems.extend(exc.problems)
    if mode in MODES:
        # unknown or malformed entries were skipped, so the merged tree is well formed
        problems.extend(_validate(cfg, mode, base_dir))
    if problems:
        raise ConfigError(problems)
    for key in ("tree", "alignment", "output_dir"):
        cfg["paths"][key] = resolve(cfg["paths"][key], base_dir)
    m = cfg["model"]
    m["generator"] = resolve(m["generator"], base_dir)
    m["branch_generators"] = {int(k): resolve(v, base_dir) for k, v in (m["branch_generators"] or {}).items()}
    cfg["mode"] = mode
    return cfg


def config_hash(cfg: dict) -> str:
    """Short SHA-256 of the canonical JSON rendering."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
