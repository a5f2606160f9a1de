"""CMCL domain generalization: Python front end to the C++ core."""

from __future__ import annotations

import json
from dataclasses import dataclass
from os import PathLike
from typing import Any

import numpy as np

from . import _cmcl
from ._cmcl import (
    CmclError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NumericError,
    ValidationError,
    gradcheck,
    kl_categorical,
    kl_terms,
    loss_cov,
    loss_mean,
    loss_mm,
    registered_scenarios,
)

__all__ = [
    "CmclError", "ConfigError", "ContractError", "DimensionError", "FormatError",
    "NumericError", "ValidationError", "Dataset", "registered_scenarios", "scenario_config",
    "normalize_config", "generate", "run_experiment", "evaluate", "gradcheck", "loss_mean",
    "loss_cov", "loss_mm", "kl_categorical", "kl_terms", "read_dataset", "write_dataset",
]


@dataclass
class Dataset:
    name: str
    x: np.ndarray
    y: np.ndarray
    class_count: int


def _text(config: dict[str, Any] | str) -> str:
    return config if isinstance(config, str) else json.dumps(config)


def scenario_config(name: str) -> dict[str, Any]:
    """Full run config of a built-in scenario ("spurious" or "rotated")."""
    return json.loads(_cmcl.registered_scenario(name))


def normalize_config(config: dict[str, Any] | str) -> dict[str, Any]:
    return json.loads(_cmcl.normalize_config(_text(config)))


def generate(config: dict[str, Any] | str, seed: int | None = None) -> list[Dataset]:
    """Source domains followed by the unseen domain."""
    return [Dataset(*t) for t in _cmcl.generate(_text(config), seed)]


def run_experiment(config: dict[str, Any] | str, out_dir: str | PathLike, methods=("cmcl",),
                   jobs: int = 1, write_files: bool = True) -> dict[str, Any]:
    return json.loads(_cmcl.run_experiment(_text(config), out_dir, list(methods), jobs, write_files))


def evaluate(checkpoint: str | PathLike, dataset: str | PathLike) -> dict[str, Any]:
    return json.loads(_cmcl.evaluate(checkpoint, dataset))


def read_dataset(path: str | PathLike) -> Dataset:
    return Dataset(*_cmcl.read_dataset(path))


def write_dataset(ds: Dataset, path: str | PathLike) -> None:
    _cmcl.write_dataset(ds.name, ds.x, [int(v) for v in ds.y], ds.class_count, path)
