"""Records -> trajectories -> split -> vocabulary -> windows -> tensors, plus
model evaluation against the held-out windows."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import dataio
from .dataio import LocationRecord, TrajectoryDataset
from .errors import ConfigError
from .metrics import EvaluationReport, build_report
from .model import ModelDims, PAEModel
from .spatial import BoundingBox, Vocab, build_vocab, filter_bbox, make_discretizer
from .training import ExampleTensors, split_validation
from .utils import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PrepConfig:
    resolution_minutes: int = 10
    min_points: int = 10
    min_trajectories: int = 2
    train_fraction: float = 0.7
    validation_fraction: float = 0.1
    sequence_length: int = 10
    bbox: Optional[BoundingBox] = None
    discretizer: dict = field(default_factory=lambda: {"kind": "grid", "cells_per_axis": 200})

    def __post_init__(self):
        if self.sequence_length < 1:
            raise ConfigError("sequence_length must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = None if self.bbox is None else self.bbox.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PrepConfig":
        d = dict(d)
        if d.get("bbox") is not None:
            d["bbox"] = BoundingBox.from_dict(d["bbox"])
        return cls(**d)


@dataclass
class Prepared:
    vocab: Vocab
    train_set: TrajectoryDataset
    test_set: TrajectoryDataset
    train: ExampleTensors
    val: Optional[ExampleTensors]
    test: ExampleTensors

    def dims(self, embed_dim: int = 64, hidden_dim: int = 100, head_dim: int = 64) -> ModelDims:
        return ModelDims(self.vocab.num_locations, self.vocab.num_users, embed_dim, hidden_dim, head_dim)


def build_dataset(records: Sequence[LocationRecord], prep: PrepConfig) -> TrajectoryDataset:
    if prep.bbox is not None:
        records = filter_bbox(records, prep.bbox)
    records = dataio.resample_to_resolution(records, prep.resolution_minutes)
    return dataio.build_trajectories(records, prep.resolution_minutes, prep.min_points, prep.min_trajectories)


def bbox_of(records: Sequence[LocationRecord]) -> BoundingBox:
    lats = [r.latitude for r in records]
    lons = [r.longitude for r in records]
    pad_lat = max(1e-6, (max(lats) - min(lats)) * 1e-6)
    pad_lon = max(1e-6, (max(lons) - min(lons)) * 1e-6)
    return BoundingBox(min(lats) - pad_lat, max(lats) + pad_lat, min(lons) - pad_lon, max(lons) + pad_lon)


def prepare(records: Sequence[LocationRecord], prep: PrepConfig, seed: int = 0,
            dtype: torch.dtype = torch.float32) -> Prepared:
    """Full preprocessing chain; the split and validation carve-out use named sub-seeds of ``seed``."""
    dataset = build_dataset(records, prep)
    bbox = prep.bbox if prep.bbox is not None else bbox_of(records)
    train_set, test_set = dataio.train_test_split(dataset, prep.train_fraction, derive_seed(seed, "split"))
    vocab = build_vocab(train_set, make_discretizer(prep.discretizer, bbox))
    sl = prep.sequence_length
    train_all = ExampleTensors.from_examples(dataio.make_sequences(train_set, sl, vocab), vocab, dtype)
    train, val = split_validation(train_all, prep.validation_fraction, seed)
    test = ExampleTensors.from_examples(dataio.make_sequences(test_set, sl, vocab), vocab, dtype)
    log.info("prepared Y=%d Z=%d train=%d val=%d test=%d", vocab.num_locations, vocab.num_users, len(train),
             0 if val is None else len(val), len(test))
    return Prepared(vocab, train_set, test_set, train, val, test)


def tensors_for(dataset: TrajectoryDataset, vocab: Vocab, sl: int, dtype=torch.float32) -> ExampleTensors:
    return ExampleTensors.from_examples(dataio.make_sequences(dataset, sl, vocab), vocab, dtype)


@torch.no_grad()
def model_outputs(model: PAEModel, data: ExampleTensors, batch_size: int = 1024) -> dict[str, np.ndarray]:
    """Probabilities of every head plus inputs/reconstructions, concatenated over ``data``."""
    out: dict[str, list] = {k: [] for k in ("utility", "privacy", "X", "X_rec", "mask", "y", "z")}
    for X, mask, y, z in data.iter_batches(batch_size):
        X = X.to(model.dtype)
        F = model.encode(X)
        if model.utility is not None:
            out["utility"].append(torch.softmax(model.utility_logits(F).double(), -1).numpy())
        if model.privacy is not None:
            out["privacy"].append(torch.softmax(model.privacy_logits(F).double(), -1).numpy())
        if model.decoder is not None:
            out["X"].append(X.double().numpy())
            out["X_rec"].append(model.decode(F).double().numpy())
        out["mask"].append(mask.numpy())
        out["y"].append(y.numpy())
        out["z"].append(z.numpy())
    return {k: np.concatenate(v) for k, v in out.items() if v}


def evaluate(model: PAEModel, data: ExampleTensors, standalone_utility=None, standalone_privacy=None,
             relative: bool = False) -> EvaluationReport:
    o = model_outputs(model, data)
    return build_report(
        utility_probs=o.get("utility"), y=o["y"], privacy_probs=o.get("privacy"), z=o["z"],
        X=o.get("X"), X_rec=o.get("X_rec"), mask=o["mask"] if "X" in o else None,
        standalone_utility=standalone_utility, standalone_privacy=standalone_privacy, relative=relative,
    )
