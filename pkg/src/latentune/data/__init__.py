"""Checked-in reference data: hand-tuned parameter sets for comparison tables."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from latentune.params import ParamVector


def hand_tuned_theta_path(env_id: str) -> Path:
    name = f"{env_id}_hand_tuned.json"
    ref = resources.files(__package__) / name
    with resources.as_file(ref) as p:
        return Path(p)


def load_theta_file(path: str | Path) -> ParamVector:
    """Read a theta JSON file: either a bare list or {"theta": [...]}."""
    with open(path) as fh:
        rec = json.load(fh)
    values = rec["theta"] if isinstance(rec, dict) else rec
    return ParamVector(np.asarray(values, dtype=float))


def hand_tuned_cartpole25() -> ParamVector:
    return load_theta_file(hand_tuned_theta_path("cartpole25"))
