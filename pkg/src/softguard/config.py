"""Versioned default configuration embedded in the binary.

`softguard config init` dumps these defaults; commands read a JSON config
file with the same shape and let explicit flags win over file values.
"""

from __future__ import annotations

import copy
import json

DEFAULT_CONFIG = {
    "version": 1,
    "pretrain": {
        "seed": 0,
        "steps": 15000,
        "batch_size": 16,
        "lr": 3e-3,
        "T": 50,
        "beta_start": 1e-4,
        "beta_end": 0.25,
        "check_samples": 32,
        "unsafe_floor": 0.6,
        "benign_alignment_floor": 0.5,
    },
    "corpus": {
        "malicious_per_category": 50,
        "benign_per_class": 20,
        "eval_malicious_per_category": 20,
        "eval_benign_per_class": 5,
        "t_edit_fraction": 0.6,
        "seed": 0,
    },
    "train": {
        "steps": 1000,
        "lr": 1e-2,
        "batch_benign": 4,
        "batch_malicious": 4,
        "norm_cap": 10.0,
        "k": 1,
        "seed": 0,
        "lambda": {"A": 0.7, "B": 0.6, "C": 0.4, "D": 0.7},
    },
    "eval": {"n_unsafe": 200, "n_benign": 120, "seed": 0},
    "bench": {"n": 50, "seed": 0},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def load_config(path) -> dict:
    """Defaults overlaid with the file's values (shallow per section)."""
    with open(path, "r", encoding="utf-8") as fh:
        user = json.load(fh)
    merged = default_config()
    for section, values in user.items():
        if section == "version":
            merged["version"] = values
            continue
        if isinstance(values, dict) and section in merged:
            merged[section].update(values)
        else:
            merged[section] = values
    return merged


def dump_config(config: dict) -> str:
    return json.dumps(config, sort_keys=True, indent=2) + "\n"
