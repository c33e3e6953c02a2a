"""Alternating adversarial training (head updates on frozen features, then an
encoder step on the Lagrangian sum loss), standalone baselines, Adam steps,
early stopping and resumable trainer state."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericalError
from .model import (
    RECOMMENDED_WEIGHTS,
    STANDALONE_HEADS,
    LagrangeWeights,
    LossBreakdown,
    PAEModel,
    compute_losses,
    loss_sum,
)
from .spatial import NUM_DAYS, Vocab
from .utils import derive_seed

log = logging.getLogger(__name__)

HEAD_LOSS = {"decoder": "L_R", "utility": "L_U", "privacy": "L_P"}


# --------------------------------------------------------------------------- data


class ExampleTensors:
    """Integer contexts ``(N, SL, 3)`` plus targets; one-hot batches are built on demand."""

    def __init__(self, contexts, next_location, user_label, num_locations: int, dtype=torch.float32,
                 ids: Optional[Sequence[tuple[str, int]]] = None):
        self.ids = list(ids) if ids is not None else None  # (trajectory_id, window_start) per row
        self.contexts = torch.as_tensor(np.asarray(contexts, dtype=np.int64))
        self.y = torch.as_tensor(np.asarray(next_location, dtype=np.int64))
        self.z = torch.as_tensor(np.asarray(user_label, dtype=np.int64))
        self.num_locations = num_locations
        self.dtype = dtype
        if self.contexts.ndim != 3 or self.contexts.shape[-1] != 3:
            raise ValueError(f"contexts must be (N, SL, 3), got {tuple(self.contexts.shape)}")

    @classmethod
    def from_examples(cls, examples: Sequence, vocab: Vocab, dtype=torch.float32) -> "ExampleTensors":
        if not examples:
            raise DataError("no examples to encode")
        return cls([e.context for e in examples], [e.next_location for e in examples],
                   [e.user_label for e in examples], vocab.num_locations, dtype,
                   [(e.trajectory_id, e.window_start) for e in examples])

    def __len__(self):
        return self.contexts.shape[0]

    @property
    def seq_len(self) -> int:
        return self.contexts.shape[1]

    def subset(self, idx) -> "ExampleTensors":
        idx = torch.as_tensor(idx, dtype=torch.long)
        ids = None if self.ids is None else [self.ids[i] for i in idx.tolist()]
        return ExampleTensors(self.contexts[idx], self.y[idx], self.z[idx], self.num_locations, self.dtype, ids)

    def batch(self, idx=None):
        """Return ``(X, mask, y, z)`` for the given rows (all rows if ``idx`` is None)."""
        ctx = self.contexts if idx is None else self.contexts[idx]
        Y = self.num_locations
        loc, day, hour = ctx[..., 0], ctx[..., 1], ctx[..., 2]
        mask = loc != Y
        X = torch.zeros(*ctx.shape[:2], Y + 1 + NUM_DAYS + 24, dtype=self.dtype)
        X.scatter_(-1, loc.unsqueeze(-1), 1.0)
        X.scatter_add_(-1, (Y + 1 + day.clamp(min=0)).unsqueeze(-1), mask.to(self.dtype).unsqueeze(-1))
        X.scatter_add_(-1, (Y + 1 + NUM_DAYS + hour.clamp(min=0)).unsqueeze(-1), mask.to(self.dtype).unsqueeze(-1))
        y = self.y if idx is None else self.y[idx]
        z = self.z if idx is None else self.z[idx]
        return X, mask, y, z

    def iter_batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield self.batch(torch.arange(start, min(start + batch_size, len(self))))


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    inner_steps: int = 1
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LagrangeWeights = RECOMMENDED_WEIGHTS
    seed: int = 0
    patience: Optional[int] = None
    min_delta: float = 1e-4
    clip_norm: Optional[float] = 5.0
    encoder_step: str = "epoch"  # "epoch": once after the K_t head loop, "batch": after every head round
    head_updates: tuple[str, ...] = ("decoder", "utility", "privacy")
    eval_every: int = 1

    def __post_init__(self):
        if min(self.epochs, self.inner_steps, self.batch_size, self.eval_every) < 1:
            raise ConfigError("epochs, inner_steps, batch_size and eval_every must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.encoder_step not in ("epoch", "batch"):
            raise ConfigError(f"encoder_step must be 'epoch' or 'batch', got {self.encoder_step!r}")
        if set(self.head_updates) - set(HEAD_LOSS):
            raise ConfigError(f"unknown head_updates {self.head_updates}")
        object.__setattr__(self, "weights", LagrangeWeights.of(self.weights))
        object.__setattr__(self, "head_updates", tuple(self.head_updates))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "inner_steps": self.inner_steps, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "beta1": self.beta1, "beta2": self.beta2,
            "weights": list(self.weights.as_tuple()), "seed": self.seed, "patience": self.patience,
            "min_delta": self.min_delta, "clip_norm": self.clip_norm, "encoder_step": self.encoder_step,
            "head_updates": list(self.head_updates), "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LagrangeWeights.of(d["weights"])
        if "head_updates" in d:
            d["head_updates"] = tuple(d["head_updates"])
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    losses: LossBreakdown
    val_L_sum: Optional[float]


# --------------------------------------------------------------------------- optimisation primitives


def make_optimizer(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.learning_rate, betas=(config.beta1, config.beta2))


def optimizer_step(optimizer: torch.optim.Optimizer, params: Sequence[torch.nn.Parameter],
                   grads: Sequence[torch.Tensor], clip_norm: Optional[float] = None) -> None:
    """Apply one Adam step to ``params`` with externally computed ``grads``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NumericalError("non-finite gradient")
        p.grad = g.detach().clone()
    if clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(params, clip_norm)
    optimizer.step()
    for p in params:
        p.grad = None


def check_convergence(history: Sequence[float], patience: int, min_delta: float = 0.0) -> bool:
    """True when none of the last ``patience`` values improved on the earlier best.

    An improvement is a strictly positive decrease of at least ``min_delta``.
    """
    vals = [v for v in history if v is not None]
    if patience < 1 or len(vals) <= patience:
        return False
    best_before = min(vals[:-patience])
    return not any(best_before - v > 0 and best_before - v >= min_delta for v in vals[-patience:])


# --------------------------------------------------------------------------- trainer


class Trainer:
    """Runs the alternating schedule for a full or standalone model.

    Per epoch, ``inner_steps`` times: draw a mini-batch, compute features with
    the encoder frozen and take one Adam step for each enabled head on its own
    loss. Then take one Adam step on the encoder only, against the objective:
    the Lagrangian sum loss for the full model, or the head's own loss for a
    standalone model.
    """

    def __init__(self, model: PAEModel, train: ExampleTensors, val: Optional[ExampleTensors], config: TrainConfig,
                 objective: str = "pae"):
        if len(train) == 0:
            raise DataError("empty training set")
        self.model, self.train, self.val, self.config = model, train, val, config
        self.objective = objective
        self.heads = [h for h in model.heads if h in config.head_updates]
        self.params = {name: model.component_parameters(name) for name in ("encoder",) + model.heads}
        self.optimizers = {name: make_optimizer(ps, config) for name, ps in self.params.items()}
        self.generator = torch.Generator().manual_seed(derive_seed(config.seed, "batch"))
        self.epoch = 0
        self.history: list[EpochRecord] = []

    # -- objective

    def objective_value(self, losses: dict):
        if self.objective == "pae":
            return loss_sum(self.config.weights, losses.get("L_R"), losses.get("L_U"), losses.get("L_P"))
        return losses[HEAD_LOSS[STANDALONE_HEADS[self.objective]]]

    # -- steps

    def _sample(self):
        n = len(self.train)
        perm = torch.randperm(n, generator=self.generator)
        return perm[: min(self.config.batch_size, n)]

    def _head_step(self, name: str, X, mask, y, z, F) -> None:
        loss = compute_losses(_Only(self.model, name), X, mask, y, z, F=F)[HEAD_LOSS[name]]
        grads = torch.autograd.grad(loss, self.params[name])
        optimizer_step(self.optimizers[name], self.params[name], grads, self.config.clip_norm)

    def _encoder_step(self, X, mask, y, z) -> LossBreakdown:
        F = self.model.encode(X)
        losses = compute_losses(self.model, X, mask, y, z, F=F)
        total = self.objective_value(losses)
        if not torch.isfinite(total):
            raise NumericalError("objective is non-finite")
        grads = torch.autograd.grad(total, self.params["encoder"])
        optimizer_step(self.optimizers["encoder"], self.params["encoder"], grads, self.config.clip_norm)
        return self._breakdown(losses)

    def _breakdown(self, losses: dict) -> LossBreakdown:
        # logged total is recomputed in double from the logged components so the
        # history is self-consistent
        comps = {k: float(v.detach()) for k, v in losses.items()}
        return LossBreakdown(comps.get("L_R"), comps.get("L_U"), comps.get("L_P"), float(self.objective_value(comps)))

    def run_epoch(self) -> EpochRecord:
        batch = None
        breakdown = None
        for _ in range(self.config.inner_steps):
            batch = self.train.batch(self._sample())
            X, mask, y, z = batch
            with torch.no_grad():
                F = self.model.encode(X)
            for name in self.heads:
                self._head_step(name, X, mask, y, z, F)
            if self.config.encoder_step == "batch":
                breakdown = self._encoder_step(*batch)
        if self.config.encoder_step == "epoch":
            breakdown = self._encoder_step(*batch)
        self.epoch += 1
        val = None
        if self.val is not None and len(self.val) and self.epoch % self.config.eval_every == 0:
            val = float(self.objective_value(evaluate_losses(self.model, self.val)))
        record = EpochRecord(self.epoch, breakdown, val)
        self.history.append(record)
        return record

    def converged(self) -> bool:
        if self.config.patience is None:
            return False
        return check_convergence([r.val_L_sum for r in self.history], self.config.patience, self.config.min_delta)

    def fit(self, epochs: Optional[int] = None, callback=None) -> list[EpochRecord]:
        """Train until ``epochs`` total epochs (default: config) or convergence."""
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            rec = self.run_epoch()
            if callback is not None:
                callback(self, rec)
            if self.converged():
                log.info("converged at epoch %d", self.epoch)
                break
        return self.history

    # -- persistence

    def state(self) -> dict:
        return {
            "epoch": self.epoch,
            "history": [history_row(r) for r in self.history],
            "optimizers": {k: opt.state_dict() for k, opt in self.optimizers.items()},
            "generator": self.generator.get_state(),
        }

    def load_state(self, state: dict) -> None:
        self.epoch = int(state["epoch"])
        self.history = [history_from_row(r) for r in state["history"]]
        for k, opt in self.optimizers.items():
            opt.load_state_dict(state["optimizers"][k])
        self.generator.set_state(state["generator"])


class _Only:
    """View of a model exposing a single head to :func:`compute_losses`."""

    def __init__(self, model: PAEModel, name: str):
        self._m = model
        self.decoder = model.decoder if name == "decoder" else None
        self.utility = model.utility if name == "utility" else None
        self.privacy = model.privacy if name == "privacy" else None

    def __getattr__(self, item):
        return getattr(self._m, item)




@torch.no_grad()
def evaluate_losses(model: PAEModel, data: ExampleTensors, batch_size: int = 1024) -> dict[str, float]:
    """Mean component losses over a whole dataset (example-weighted; L_R mask-weighted)."""
    sums: dict[str, float] = {}
    weights: dict[str, float] = {}
    for X, mask, y, z in data.iter_batches(batch_size):
        losses = compute_losses(model, X.to(model.dtype), mask, y, z)
        for k, v in losses.items():
            w = float(mask.sum()) if k == "L_R" else float(len(y))
            sums[k] = sums.get(k, 0.0) + float(v) * w
            weights[k] = weights.get(k, 0.0) + w
    return {k: sums[k] / weights[k] for k in sums}


# --------------------------------------------------------------------------- public entry points


def train_pae(train: ExampleTensors, val: Optional[ExampleTensors], model: PAEModel, config: TrainConfig,
              resume_state: Optional[dict] = None, epochs: Optional[int] = None):
    """Adversarial training of the full model; returns ``(model, history)``."""
    trainer = Trainer(model, train, val, config, objective="pae")
    if resume_state is not None:
        trainer.load_state(resume_state)
    trainer.fit(epochs)
    return model, trainer.history


def train_standalone(kind: str, train: ExampleTensors, val: Optional[ExampleTensors], model: PAEModel,
                     config: TrainConfig, resume_state: Optional[dict] = None, epochs: Optional[int] = None):
    """Single-task baseline: the head and its encoder both descend the head's own loss."""
    if kind not in STANDALONE_HEADS:
        raise ConfigError(f"unknown standalone kind {kind!r}")
    if model.heads != (STANDALONE_HEADS[kind],):
        raise ConfigError(f"model heads {model.heads} do not match standalone kind {kind!r}")
    config = replace(config, head_updates=(STANDALONE_HEADS[kind],))
    trainer = Trainer(model, train, val, config, objective=kind)
    if resume_state is not None:
        trainer.load_state(resume_state)
    trainer.fit(epochs)
    return model, trainer.history


# --------------------------------------------------------------------------- history io

HISTORY_COLUMNS = ("epoch", "L_R", "L_U", "L_P", "L_sum", "val_L_sum")


def history_row(r: EpochRecord) -> dict:
    return {"epoch": r.epoch, "L_R": r.losses.L_R, "L_U": r.losses.L_U, "L_P": r.losses.L_P,
            "L_sum": r.losses.L_sum, "val_L_sum": r.val_L_sum}


def history_from_row(d: dict) -> EpochRecord:
    return EpochRecord(int(d["epoch"]), LossBreakdown(d["L_R"], d["L_U"], d["L_P"], d["L_sum"]), d["val_L_sum"])


def history_csv(history: Sequence[EpochRecord]) -> str:
    def fmt(v):
        return "" if v is None else repr(float(v))

    lines = [",".join(HISTORY_COLUMNS)]
    for r in history:
        row = history_row(r)
        lines.append(",".join([str(row["epoch"])] + [fmt(row[c]) for c in HISTORY_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def split_validation(data: ExampleTensors, fraction: float, seed: int):
    """Carve a validation subset off the training examples."""
    n = len(data)
    n_val = int(math.floor(n * fraction))
    if fraction <= 0 or n_val == 0:
        return data, None
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(derive_seed(seed, "validation")))
    val_idx, train_idx = perm[:n_val].sort().values, perm[n_val:].sort().values
    return data.subset(train_idx), data.subset(val_idx)
