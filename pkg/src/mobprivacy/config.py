"""Experiment configuration: a JSON file validated against a published schema,
then overlaid by command-line flags (flag > file > default)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import jsonschema
import torch

from .dataio import LocationRecord, SyntheticConfig, generate_synthetic, load_records
from .errors import ConfigError
from .model import ModelDims
from .pareto import SweepConfig
from .pipeline import PrepConfig
from .training import TrainConfig

_INT1 = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_BBOX = {
    "type": "object",
    "required": ["lat_min", "lat_max", "lon_min", "lon_max"],
    "properties": {k: _NUM for k in ("lat_min", "lat_max", "lon_min", "lon_max")},
    "additionalProperties": False,
}
_WEIGHTS = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "experiment configuration",
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "dataset": {
            "type": "object",
            "properties": {
                "path": {"type": "string"},
                "format": {"enum": ["csv"]},
                "synthetic": {
                    "type": "object",
                    "properties": {
                        "num_users": _INT1,
                        "num_anchor_pois_per_user": _INT1,
                        "total_pois": _INT1,
                        "days": _INT1,
                        "resolution_minutes": _INT1,
                        "transition_noise": {"type": "number", "minimum": 0, "maximum": 1},
                        "bounding_box": _BBOX,
                        "seed": {"type": "integer", "minimum": 0},
                        "start": {"type": "string"},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "preprocessing": {
            "type": "object",
            "properties": {
                "resolution_minutes": _INT1,
                "min_points": _INT1,
                "min_trajectories": _INT1,
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "validation_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "sequence_length": _INT1,
                "bbox": {"oneOf": [_BBOX, {"type": "null"}]},
                "discretizer": {
                    "type": "object",
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": ["grid", "geohash"]},
                        "cells_per_axis": _INT1,
                        "cell_height_deg": {"type": "number", "exclusiveMinimum": 0},
                        "cell_width_deg": {"type": "number", "exclusiveMinimum": 0},
                        "precision": {"type": "integer", "minimum": 1, "maximum": 12},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "model": {
            "type": "object",
            "properties": {"embed_dim": _INT1, "hidden_dim": _INT1, "head_dim": _INT1,
                           "dtype": {"enum": ["float32", "float64"]}},
            "additionalProperties": False,
        },
        "training": {
            "type": "object",
            "properties": {
                "epochs": _INT1,
                "inner_steps": _INT1,
                "batch_size": _INT1,
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "weights": _WEIGHTS,
                "patience": {"oneOf": [_INT1, {"type": "null"}]},
                "min_delta": {"type": "number", "minimum": 0},
                "clip_norm": {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, {"type": "null"}]},
                "encoder_step": {"enum": ["epoch", "batch"]},
                "head_updates": {"type": "array", "items": {"enum": ["decoder", "utility", "privacy"]},
                                 "uniqueItems": True},
                "eval_every": _INT1,
            },
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "properties": {
                "lambda_grid": {"type": "array", "items": _WEIGHTS, "minItems": 1},
                "sl_values": {"type": "array", "items": _INT1, "minItems": 1},
                "granularity_values": {"type": "array", "items": _INT1, "minItems": 1},
                "repeats": _INT1,
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def validate_config(raw: dict) -> None:
    """Schema check; the error names the offending field path."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from None


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: Path = Path("runs")
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None, seed: Optional[int] = None,
             output_dir: Optional[Union[str, Path]] = None) -> "ExperimentConfig":
        raw: dict = {}
        base = Path(".")
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                raw = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            base = path.parent
        validate_config(raw)
        return cls(
            raw=raw,
            seed=seed if seed is not None else raw.get("seed", 0),
            # a flag is relative to the working directory, a config value to the config file
            output_dir=Path(output_dir) if output_dir is not None else base / raw.get("output_dir", "runs"),
            base_dir=base,
        )

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    # -- typed views

    def synthetic(self) -> SyntheticConfig:
        d = self.section("dataset").get("synthetic", {})
        d = {"seed": self.seed, **d}
        return SyntheticConfig.from_dict(d)

    def prep(self) -> PrepConfig:
        return PrepConfig.from_dict(self.section("preprocessing"))

    def train(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.section("training"), "seed": self.seed})

    def sweep(self) -> SweepConfig:
        return SweepConfig.from_dict(self.section("sweep"))

    def dims(self, num_locations: int, num_users: int) -> ModelDims:
        m = self.section("model")
        m.pop("dtype", None)
        return ModelDims(num_locations, num_users, **m)

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.section("model").get("dtype", "float32")]

    def dataset_path(self) -> Optional[Path]:
        p = self.section("dataset").get("path")
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def records(self) -> list[LocationRecord]:
        """Records from ``dataset.path``, else generated from ``dataset.synthetic``."""
        ds = self.section("dataset")
        if "path" in ds:
            path = self.dataset_path()
            if not path.is_file():
                raise ConfigError(f"config field dataset.path: file not found: {path}")
            return load_records(path, ds.get("format", "csv"))
        return generate_synthetic(self.synthetic())
