"""Adversarial recurrent autoencoder: encoder, mirrored decoder, utility and
privacy discriminators, their losses and the Lagrangian sum loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import torch
from torch import nn

from .errors import ConfigError, NumericalError
from .spatial import NUM_DAYS, NUM_HOURS
from .utils import derive_seed

PROB_FLOOR = 1e-12
COMPONENTS = ("encoder", "decoder", "utility", "privacy")
STANDALONE_HEADS = {"autoencoder": "decoder", "predictor": "utility", "reidentifier": "privacy"}


@dataclass(frozen=True)
class LagrangeWeights:
    lambda1: float
    lambda2: float
    lambda3: float

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ConfigError(f"Lagrange weights must be finite and non-negative: {vals}")
        if not any(vals):
            raise ConfigError("at least one Lagrange weight must be positive")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    @classmethod
    def of(cls, w: Union["LagrangeWeights", Sequence[float]]) -> "LagrangeWeights":
        return w if isinstance(w, cls) else cls(*map(float, w))


RECOMMENDED_WEIGHTS = LagrangeWeights(0.1, 0.6, 0.3)


@dataclass(frozen=True)
class ModelDims:
    num_locations: int  # Y, excluding the pad class
    num_users: int  # Z
    embed_dim: int = 64
    hidden_dim: int = 100
    head_dim: int = 64

    def __post_init__(self):
        if min(asdict(self).values()) < 1:
            raise ConfigError(f"model dimensions must be positive: {self}")

    @property
    def input_dim(self) -> int:
        return self.num_locations + 1 + NUM_DAYS + NUM_HOURS


@dataclass(frozen=True)
class LossBreakdown:
    L_R: Optional[float]
    L_U: Optional[float]
    L_P: Optional[float]
    L_sum: float


class Encoder(nn.Module):
    """One-hot input -> learned linear embedding -> LSTM; returns every hidden state."""

    def __init__(self, input_dim: int, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.embed = nn.Linear(input_dim, embed_dim)
        self.rnn = nn.LSTM(embed_dim, hidden_dim, batch_first=True)

    def forward(self, x):
        out, _ = self.rnn(self.embed(x))
        return out

    def layer_shapes(self) -> list[tuple[int, int]]:
        return [(self.embed.in_features, self.embed.out_features), (self.rnn.input_size, self.rnn.hidden_size)]


class Decoder(nn.Module):
    """Layer-for-layer reverse of :class:`Encoder`: LSTM back to the embedding width, then linear to input width."""

    def __init__(self, input_dim: int, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.rnn = nn.LSTM(hidden_dim, embed_dim, batch_first=True)
        self.out = nn.Linear(embed_dim, input_dim)

    def forward(self, f):
        h, _ = self.rnn(f)
        return self.out(h)

    def layer_shapes(self) -> list[tuple[int, int]]:
        return [(self.rnn.input_size, self.rnn.hidden_size), (self.out.in_features, self.out.out_features)]


class ClassifierHead(nn.Module):
    """LSTM over the feature sequence, final state -> linear logits."""

    def __init__(self, hidden_dim: int, head_dim: int, num_classes: int):
        super().__init__()
        self.rnn = nn.LSTM(hidden_dim, head_dim, batch_first=True)
        self.out = nn.Linear(head_dim, num_classes)

    def forward(self, f):
        h, _ = self.rnn(f)
        return self.out(h[:, -1])


def _seeded(seed: int, name: str, factory):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, f"init/{name}"))
        return factory()


class PAEModel(nn.Module):
    """Encoder plus any subset of the three heads.

    Each component is initialised from its own named sub-seed, so a standalone
    model and the full adversarial model built from the same seed share
    bit-identical encoder and head weights.
    """

    def __init__(self, dims: ModelDims, heads: Sequence[str] = ("decoder", "utility", "privacy"), seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        unknown = set(heads) - set(COMPONENTS[1:])
        if unknown:
            raise ConfigError(f"unknown heads {sorted(unknown)}")
        self.dims = dims
        self.heads = tuple(h for h in COMPONENTS[1:] if h in heads)
        self.seed = seed
        D, E, H, K = dims.input_dim, dims.embed_dim, dims.hidden_dim, dims.head_dim
        self.encoder = _seeded(seed, "encoder", lambda: Encoder(D, E, H))
        self.decoder = _seeded(seed, "decoder", lambda: Decoder(D, E, H)) if "decoder" in heads else None
        self.utility = _seeded(seed, "utility", lambda: ClassifierHead(H, K, dims.num_locations)) if "utility" in heads else None
        self.privacy = _seeded(seed, "privacy", lambda: ClassifierHead(H, K, dims.num_users)) if "privacy" in heads else None
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.embed.weight.dtype

    def component(self, name: str) -> nn.Module:
        mod = getattr(self, name)
        if mod is None:
            raise KeyError(f"model has no {name} component")
        return mod

    def component_parameters(self, name: str) -> list[nn.Parameter]:
        return list(self.component(name).parameters())

    def encode(self, X: torch.Tensor) -> torch.Tensor:
        F = self.encoder(X)
        if not torch.isfinite(F).all():
            raise NumericalError("encoder produced non-finite features")
        return F

    def decode(self, F: torch.Tensor) -> torch.Tensor:
        return self.component("decoder")(F)

    def utility_logits(self, F: torch.Tensor) -> torch.Tensor:
        return _finite(self.component("utility")(F), "utility")

    def privacy_logits(self, F: torch.Tensor) -> torch.Tensor:
        return _finite(self.component("privacy")(F), "privacy")

    def predict_next(self, F: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.utility_logits(F), dim=-1)

    def reidentify(self, F: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.privacy_logits(F), dim=-1)


def _finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"{what} head produced non-finite logits")
    return t


def build_standalone(kind: str, dims: ModelDims, seed: int = 0, dtype: torch.dtype = torch.float32) -> PAEModel:
    """Single-task baseline: its own encoder copy and one head."""
    try:
        head = STANDALONE_HEADS[kind]
    except KeyError:
        raise ConfigError(f"unknown standalone kind {kind!r}; expected one of {sorted(STANDALONE_HEADS)}") from None
    return PAEModel(dims, heads=(head,), seed=seed, dtype=dtype)


# --------------------------------------------------------------------------- losses


def loss_reconstruction(X: torch.Tensor, X_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the unmasked timesteps (all features of each)."""
    if X.shape != X_hat.shape:
        raise ValueError(f"reconstruction shape {tuple(X_hat.shape)} != input shape {tuple(X.shape)}")
    m = mask.to(X.dtype)
    n = m.sum() * X.shape[-1]
    if n.item() == 0:
        raise ValueError("reconstruction loss over an empty mask")
    return (((X_hat - X) ** 2) * m.unsqueeze(-1)).sum() / n


def _cross_entropy(labels: torch.Tensor, probs: torch.Tensor, what: str) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.max().item() >= probs.shape[-1] or labels.min().item() < 0):
        raise ValueError(f"{what} label out of range for {probs.shape[-1]} classes")
    p_true = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -torch.log(torch.clamp(p_true, min=PROB_FLOOR)).mean()


def loss_utility(y_true, p: torch.Tensor) -> torch.Tensor:
    return _cross_entropy(y_true, p, "location")


def loss_privacy(z_true, q: torch.Tensor) -> torch.Tensor:
    return _cross_entropy(z_true, q, "user")


def loss_sum(weights: LagrangeWeights, L_R, L_U, L_P):
    """``-lambda1 * L_R + lambda2 * L_U - lambda3 * L_P``; a ``None`` term counts as absent."""
    w = LagrangeWeights.of(weights)
    total = 0.0
    if L_R is not None:
        total = total - w.lambda1 * L_R
    if L_U is not None:
        total = total + w.lambda2 * L_U
    if L_P is not None:
        total = total - w.lambda3 * L_P
    return total


def compute_losses(model: PAEModel, X, mask, y, z, F: Optional[torch.Tensor] = None) -> dict[str, torch.Tensor]:
    """Forward every head the model has and return the component losses."""
    if F is None:
        F = model.encode(X)
    losses = {}
    if model.decoder is not None:
        losses["L_R"] = loss_reconstruction(X, model.decode(F), mask)
    if model.utility is not None:
        losses["L_U"] = loss_utility(y, model.predict_next(F))
    if model.privacy is not None:
        losses["L_P"] = loss_privacy(z, model.reidentify(F))
    for name, v in losses.items():
        if not torch.isfinite(v):
            raise NumericalError(f"{name} is non-finite")
    return losses
