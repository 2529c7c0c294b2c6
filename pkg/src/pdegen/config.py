"""Run configuration: nested key/value maps with documented defaults,
dotted-path overrides, lossless JSON round-trip, and content hashing."""

from __future__ import annotations

import copy
import hashlib
import json

from .tensor import ContractViolation

DEFAULTS = {
    "benchmark": "poisson",
    "size": 0,                    # 0 = desk-scale default for the benchmark
    "seed": 0,
    "data": {
        "n_train": 2000,
        "n_test": 500,
        "tol": 1e-10,
    },
    "teacher": {
        "batch": 16,
        "lr": 1e-3,
        "steps": 2000,
        "p_mean": -1.2,
        "p_std": 1.2,
        "ema": 0.999,
        "optimizer": "adam",
        "widths": [32, 64, 64],
    },
    "distill": {
        "k_max": 4,
        "delta_k": [],            # [] = uniform over {1..k_max}
        "sigma_init": 1.5,
        "lambda_phys": 5e-3,
        "guidance_start": 0,
        "aux_updates_per_gen": 2,
        "batch": 16,
        "lr_gen": 1e-4,
        "lr_aux": 1e-4,
        "steps": 1000,
        "method": "heun",
        "sigma_min": 0.002,
        "rho": 7.0,
        "optimizer": "adam",
        "epsilon": 0.0,
        "probe_batch": 8,
    },
    "metrics": {
        "projections": 512,
        "mmd_subset": 500,
        "eps": 1e-8,
    },
    "eval": {
        "n_samples": 256,
        "teacher_steps": [4, 200],
        "latency_samples": 32,
        "eval_batch": 64,
        "baseline": "plain",      # plain | guided (teacher rows)
        "gamma": 1e-4,
        "active_fraction": 0.2,
        "method": "heun",
        "sigma_max": 80.0,        # teacher sampling schedule
        "sigma_min": 0.002,
        "rho": 7.0,
    },
    "conditional": {
        "task": "forward",
        "obs_fraction": 1.0,
        "lambda_phys": 5e-3,
        "n_pairs": 200,
        "n_eval": 100,
        "batch": 16,
        "lr": 1e-3,
        "steps": 2000,
        "optimizer": "adam",
    },
}


def default_run_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in out:
            raise ContractViolation(f"unknown config key {where!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ContractViolation(f"config key {where!r} expects a map")
            out[k] = _merge(out[k], v, where)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=()) -> dict:
    cfg = default_run_config()
    if path is not None:
        with open(path) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ContractViolation(f"config {path}: {e}") from e
        cfg = _merge(cfg, user)
    for dotted in overrides:
        cfg = apply_override(cfg, dotted)
    return cfg


def apply_override(cfg: dict, dotted: str) -> dict:
    """Apply one 'a.b.c=value' override; values parse as JSON, else string."""
    if "=" not in dotted:
        raise ContractViolation(f"override {dotted!r} must look like key.path=value")
    key, _, raw = dotted.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    cfg = copy.deepcopy(cfg)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ContractViolation(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ContractViolation(f"unknown config key {key!r}")
    node[parts[-1]] = value
    return cfg


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]
