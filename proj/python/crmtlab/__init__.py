"""Certified-robustness laboratory for multi-modal classifiers.

Thin python surface over the C++ core: dataset generation, the training
strategies (jt / ojt / crmt / crmt-at), certified radii, gradient attacks and
the brute-force radius oracle, plus the config-driven pipeline commands.
"""

import json

from crmtlab._core import (
    CrmtError,
    Dataset,
    Model,
    attack,
    certify,
    default_config_json,
    generate,
    init_model,
    lipschitz_upper,
    min_radius_oracle,
    run_attack,
    run_certify,
    run_gen,
    run_oracle,
    run_report,
    run_train,
    train,
)

__all__ = [
    "CrmtError",
    "Dataset",
    "Model",
    "attack",
    "certify",
    "default_config",
    "generate",
    "init_model",
    "lipschitz_upper",
    "min_radius_oracle",
    "run_attack",
    "run_certify",
    "run_gen",
    "run_oracle",
    "run_report",
    "run_train",
    "train",
]


def default_config():
    """The fully materialized default experiment config as a dict."""
    return json.loads(default_config_json())


def config_json(config):
    """Serialize a config dict for the run_* commands."""
    return json.dumps(config)
