"""Run configuration: nested key/value files with defaults for every key."""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

ENV_CONFIG_VAR = "TRIALEMU_CONFIG"

DEFAULTS: dict = {
    "seed": 0,
    "outcome": "early",            # early | late
    "paths": {
        "events": "events.csv",
        "sessions": "sessions.csv",
        "cohort": "cohort.csv",
        "out_dir": "out",
    },
    "cohort": {
        "lookback_hours": 8,
        "fallback_minutes": 30,
        "early_window": [2, 8],
        "late_window": [12, 24],
        "max_prone_hours": 96,
        "thresholds": {"pf": 150, "fio2": 60, "peep": 5},
    },
    "split": {"test_frac": 0.2, "val_frac_of_train": 0.3},
    "bootstrap": {"replicates": 100, "frac": 0.95},
    "models": ["lr", "dripw", "blocking", "bart", "tarnet", "cfr"],
    "propensity": {
        "mode": "all_covariates",
        "floor": 0.1,
        "ceiling": None,
        "n_blocks": 5,
        "subset": None,
    },
    "bart": {
        "n_trees": 50,
        "k": 2.0,
        "nu": 3.0,
        "q": 0.9,
        "alpha_tree": 0.95,
        "beta_tree": 2.0,
        "burn_in": 250,
        "draws": 1000,
    },
    "cfr": {
        "alpha": 1.0,
        "lam": 1.0e-4,
        "learning_rate": 1.0e-3,
        "batch_size": 128,
        "patience": 10,
        "max_epochs": 300,
        "ot_iters": 10,
        "ot_strength": 10.0,
    },
    "tarnet": {},                  # inherits cfr settings with alpha forced to 0
    "dgp": {
        "kind": "linear_confounded",
        "d": 10,
        "n": 2000,
        "tau": 10.0,
        "gamma": 1.0,
        "sigma": 1.0,
    },
    "reference": {"ate": 15.0, "ci": [3.0, 27.0]},
}


class ConfigError(ValueError):
    pass


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | os.PathLike | None = None) -> dict:
    """Defaults overlaid with the given file (or $TRIALEMU_CONFIG)."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR)
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        with open(p) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"config root must be a mapping, got {type(user).__name__}")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = _deep_merge(cfg, user)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    from .evaluation import MODEL_TAGS
    from .synthetic import DGP_KINDS

    if cfg["outcome"] not in ("early", "late"):
        raise ConfigError(f"outcome must be early or late, got {cfg['outcome']!r}")
    if not cfg["models"]:
        raise ConfigError("model set must be non-empty")
    bad = [m for m in cfg["models"] if m not in MODEL_TAGS]
    if bad:
        raise ConfigError(f"unknown model tags {bad}; valid tags are {list(MODEL_TAGS)}")
    if cfg["dgp"]["kind"] not in DGP_KINDS:
        raise ConfigError(
            f"unknown DGP kind {cfg['dgp']['kind']!r}; expected one of {DGP_KINDS}"
        )
    boot = cfg["bootstrap"]
    if not (isinstance(boot["replicates"], int) and boot["replicates"] >= 1):
        raise ConfigError("bootstrap.replicates must be a positive integer")
    if not 0 < boot["frac"] <= 1:
        raise ConfigError("bootstrap.frac must lie in (0, 1]")


def cohort_params(cfg: dict):
    from .cohort import CohortParams

    c = cfg["cohort"]
    return CohortParams(
        lookback_hours=float(c["lookback_hours"]),
        fallback_minutes=float(c["fallback_minutes"]),
        early_window=tuple(float(v) for v in c["early_window"]),
        late_window=tuple(float(v) for v in c["late_window"]),
        max_prone_hours=float(c["max_prone_hours"]),
        pf_threshold=float(c["thresholds"]["pf"]),
        fio2_threshold=float(c["thresholds"]["fio2"]),
        peep_threshold=float(c["thresholds"]["peep"]),
    )


def model_configs(cfg: dict) -> dict:
    """Per-model config objects keyed by tag, for the evaluation protocol."""
    from .bart import BartConfig
    from .cfrnet import CfrConfig

    prop = {k: v for k, v in cfg["propensity"].items() if k != "mode"}
    prop["mode"] = cfg["propensity"]["mode"]
    cfr_kwargs = dict(cfg["cfr"])
    tarnet_kwargs = {**cfr_kwargs, **cfg["tarnet"], "alpha": 0.0}
    return {
        "dripw": prop,
        "blocking": prop,
        "bart": BartConfig(**cfg["bart"]),
        "cfr": CfrConfig(**cfr_kwargs),
        "tarnet": CfrConfig(**tarnet_kwargs),
    }
