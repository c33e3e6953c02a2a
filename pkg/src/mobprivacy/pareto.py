"""Configuration sweeps over Lagrange weights, sequence length and temporal
granularity, and Pareto analysis of the resulting (utility, privacy) points."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .dataio import LocationRecord, records_to_csv
from .errors import ConfigError, MobPrivacyError
from .metrics import EvaluationReport, privacy_gain, tradeoff_score, utility_decline
from .model import LagrangeWeights, PAEModel, build_standalone
from .pipeline import PrepConfig, evaluate, prepare
from .training import TrainConfig, train_pae, train_standalone
from .utils import atomic_write, canonical_json, stable_hash

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("utility", "privacy", "lambda1", "lambda2", "lambda3", "SL", "granularity", "seed", "on_front")
ON_FRONT, DOMINATED = "on_front", "dominated"


@dataclass(frozen=True)
class PointConfig:
    weights: LagrangeWeights
    sequence_length: int
    granularity_minutes: int
    seed: int

    def to_dict(self) -> dict:
        return {"weights": list(self.weights.as_tuple()), "sequence_length": self.sequence_length,
                "granularity_minutes": self.granularity_minutes, "seed": self.seed}


@dataclass
class ParetoPoint:
    """Outcome of one configuration. Privacy is top-1 re-identification inaccuracy."""

    utility: float
    privacy: float
    config: Optional[PointConfig] = None
    report: Optional[EvaluationReport] = None
    error: Optional[str] = None
    label: Optional[str] = None

    def __post_init__(self):
        if self.error is None:
            for name in ("utility", "privacy"):
                v = getattr(self, name)
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "utility": None if not self.ok else self.utility,
            "privacy": None if not self.ok else self.privacy,
            "config": None if self.config is None else self.config.to_dict(),
            "report": None if self.report is None else self.report.to_dict(),
            "error": self.error,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParetoPoint":
        c = d.get("config")
        cfg = None if c is None else PointConfig(LagrangeWeights.of(c["weights"]), c["sequence_length"],
                                                 c["granularity_minutes"], c["seed"])
        rep = None if d.get("report") is None else EvaluationReport.from_dict(d["report"])
        err = d.get("error")
        u = math.nan if err else d["utility"]
        p = math.nan if err else d["privacy"]
        return cls(u, p, cfg, rep, err, d.get("label"))


def _up(p) -> tuple[float, float]:
    if isinstance(p, ParetoPoint):
        return p.utility, p.privacy
    u, q = p
    return float(u), float(q)


def dominates(a, b) -> bool:
    """True iff ``a`` is at least as good as ``b`` on both axes and strictly better on one."""
    (ua, pa), (ub, pb) = _up(a), _up(b)
    return ua >= ub and pa >= pb and (ua > ub or pa > pb)


def front_indices(points: Sequence) -> list[int]:
    """Indices (ascending) of the non-dominated points; error points never qualify."""
    vals = []
    for i, p in enumerate(points):
        if isinstance(p, ParetoPoint) and not p.ok:
            continue
        vals.append((i, *_up(p)))
    # descending utility; within a utility level only the max-privacy points survive,
    # and they must beat every strictly-higher-utility point on privacy
    vals.sort(key=lambda t: (-t[1], -t[2]))
    keep = []
    best_higher = -math.inf
    for _, group in itertools.groupby(vals, key=lambda t: t[1]):
        group = list(group)
        top = group[0][2]
        if top > best_higher:
            keep.extend(i for i, _, q in group if q == top)
            best_higher = top
    return sorted(keep)


def pareto_front(points: Sequence) -> list:
    """The non-dominated subset in input order; duplicates on the front are all kept."""
    return [points[i] for i in front_indices(points)]


def classify_external(point, front: Iterable) -> str:
    return DOMINATED if any(dominates(f, point) for f in front) else ON_FRONT


# --------------------------------------------------------------------------- sweep config

DEFAULT_LAMBDA_GRID = (
    LagrangeWeights(0.1, 0.6, 0.3),
    LagrangeWeights(0.1, 0.8, 0.1),
    LagrangeWeights(0.0, 0.5, 0.5),
    LagrangeWeights(0.0, 1.0, 0.0),
)


@dataclass(frozen=True)
class SweepConfig:
    lambda_grid: tuple[LagrangeWeights, ...] = DEFAULT_LAMBDA_GRID
    sl_values: tuple[int, ...] = (5, 10)
    granularity_values: tuple[int, ...] = (10,)
    repeats: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lambda_grid", tuple(LagrangeWeights.of(w) for w in self.lambda_grid))
        object.__setattr__(self, "sl_values", tuple(int(v) for v in self.sl_values))
        object.__setattr__(self, "granularity_values", tuple(int(v) for v in self.granularity_values))
        if not (self.lambda_grid and self.sl_values and self.granularity_values):
            raise ConfigError("sweep grids must be non-empty")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if min(self.sl_values) < 1 or min(self.granularity_values) < 1:
            raise ConfigError("sequence lengths and granularities must be positive")

    @property
    def cell_count(self) -> int:
        return len(self.lambda_grid) * len(self.sl_values) * len(self.granularity_values) * self.repeats

    def to_dict(self) -> dict:
        return {"lambda_grid": [list(w.as_tuple()) for w in self.lambda_grid], "sl_values": list(self.sl_values),
                "granularity_values": list(self.granularity_values), "repeats": self.repeats}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        for k in ("lambda_grid", "sl_values", "granularity_values"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def sweep_configs(sweep: SweepConfig, base_seed: int) -> list[PointConfig]:
    """Grid cells in a fixed order: granularity, SL, weights, repeat."""
    return [PointConfig(w, sl, g, base_seed + r)
            for g in sweep.granularity_values for sl in sweep.sl_values
            for w in sweep.lambda_grid for r in range(sweep.repeats)]


# --------------------------------------------------------------------------- sweep execution


def _cell_prep(prep: PrepConfig, sl: int, granularity: int) -> PrepConfig:
    return replace(prep, sequence_length=sl, resolution_minutes=granularity)


def _records_digest(records: Sequence[LocationRecord]) -> str:
    return hashlib.sha256(records_to_csv(records).encode()).hexdigest()


def _job_key(kind: str, data_digest: str, prep: PrepConfig, train: TrainConfig, data_seed: int) -> str:
    return stable_hash({"kind": kind, "data": data_digest, "prep": prep.to_dict(), "train": train.to_dict(),
                        "data_seed": data_seed})


def _run_job(kind: str, records, prep_d: dict, train_d: dict, data_seed: int) -> dict:
    """Train one model and return its report dict; ``kind`` is "pae" or a standalone kind."""
    prep = PrepConfig.from_dict(prep_d)
    train = TrainConfig.from_dict(train_d)
    data = prepare(records, prep, seed=data_seed)
    dims = data.dims()
    if kind == "pae":
        model = PAEModel(dims, seed=train.seed)
        train_pae(data.train, data.val, model, train)
    else:
        model = build_standalone(kind, dims, seed=train.seed)
        train_standalone(kind, data.train, data.val, model, train)
    return evaluate(model, data.test).to_dict()


def _safe_job(args) -> dict:
    try:
        return {"report": _run_job(*args)}
    except (MobPrivacyError, ValueError, RuntimeError, ArithmeticError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


class ResultCache:
    """Append-only directory of JSON results keyed by config hash."""

    def __init__(self, root: Optional[Union[str, Path]]):
        self.root = None if root is None else Path(root)
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def get(self, key: str) -> Optional[dict]:
        if self.root is None:
            return None
        path = self.root / f"{key}.json"
        return json.loads(path.read_text()) if path.is_file() else None

    def put(self, key: str, value: dict) -> None:
        if self.root is not None and "error" not in value:
            atomic_write(self.root / f"{key}.json", canonical_json(value))


def _run_jobs(jobs: list[tuple[str, tuple]], cache: ResultCache, workers: int) -> dict[str, dict]:
    results = {}
    todo = []
    for key, args in jobs:
        if key in results:
            continue
        hit = cache.get(key)
        if hit is not None:
            results[key] = hit
        else:
            todo.append((key, args))
            results[key] = None
    log.info("sweep: %d cached, %d to train", len(results) - len(todo), len(todo))
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_safe_job, [a for _, a in todo]))
    else:
        outs = [_safe_job(a) for _, a in todo]
    for (key, _), out in zip(todo, outs):
        if "error" in out:
            log.warning("sweep cell failed: %s", out["error"])
        cache.put(key, out)
        results[key] = out
    return results


def run_sweep(records: Sequence[LocationRecord], prep: PrepConfig, sweep: SweepConfig, train_config: TrainConfig,
              cache_dir: Optional[Union[str, Path]] = None, workers: int = 1, with_baselines: bool = True,
              data_seed: Optional[int] = None) -> list[ParetoPoint]:
    """Train and evaluate every grid cell, one point per cell and seed, in grid order.

    The data split is shared by all cells (``data_seed``, default the training
    seed); the repeat index offsets the model seed. Standalone predictor and
    reidentifier baselines are trained once per (SL, granularity) pair so the
    reports carry decline and gain. Failed cells become error points.
    """
    data_seed = train_config.seed if data_seed is None else data_seed
    digest = _records_digest(records)
    cache = ResultCache(cache_dir)
    cells = sweep_configs(sweep, train_config.seed)

    jobs, cell_keys, base_keys = [], [], {}
    for c in cells:
        p = _cell_prep(prep, c.sequence_length, c.granularity_minutes)
        t = replace(train_config, weights=c.weights, seed=c.seed)
        key = _job_key("pae", digest, p, t, data_seed)
        jobs.append((key, ("pae", records, p.to_dict(), t.to_dict(), data_seed)))
        cell_keys.append(key)
        pair = (c.sequence_length, c.granularity_minutes)
        if with_baselines and pair not in base_keys:
            base_keys[pair] = {}
            for kind in ("predictor", "reidentifier"):
                bkey = _job_key(kind, digest, p, train_config, data_seed)
                jobs.append((bkey, (kind, records, p.to_dict(), train_config.to_dict(), data_seed)))
                base_keys[pair][kind] = bkey
    results = _run_jobs(jobs, cache, workers)

    points = []
    for c, key in zip(cells, cell_keys):
        out = results[key]
        if "error" in out:
            points.append(ParetoPoint(math.nan, math.nan, c, None, out["error"]))
            continue
        report = EvaluationReport.from_dict(out["report"])
        bases = base_keys.get((c.sequence_length, c.granularity_minutes), {})
        su = _base_top(results, bases.get("predictor"), "top_n_utility")
        sp = _base_top(results, bases.get("reidentifier"), "top_n_privacy")
        if su is not None or sp is not None:
            report = _with_reference(report, su, sp)
        points.append(ParetoPoint(report.top_n_utility[1], 1.0 - report.top_n_privacy[1], c, report))
    return points


def _base_top(results, key, field_name) -> Optional[dict[int, float]]:
    if key is None or "error" in results[key]:
        return None
    return {int(k): v for k, v in results[key]["report"][field_name].items()}


def _with_reference(report: EvaluationReport, su, sp) -> EvaluationReport:
    r = replace(report)
    if su:
        r.utility_decline_pct = {n: utility_decline(su[n], a) for n, a in r.top_n_utility.items() if n in su}
    if sp:
        r.privacy_gain_pct = {n: privacy_gain(sp[n], a) for n, a in r.top_n_privacy.items() if n in sp}
    if 1 in r.utility_decline_pct and 1 in r.privacy_gain_pct:
        r.tradeoff_pct = tradeoff_score(r.privacy_gain_pct[1], r.utility_decline_pct[1])
    return r


# --------------------------------------------------------------------------- outputs


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def sweep_csv(points: Sequence[ParetoPoint]) -> str:
    on = set(front_indices(points))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for i, p in enumerate(points):
        c = p.config
        lam = c.weights.as_tuple() if c else (None, None, None)
        w.writerow([_fmt(p.utility if p.ok else None), _fmt(p.privacy if p.ok else None), *map(_fmt, lam),
                    _fmt(c.sequence_length if c else None), _fmt(c.granularity_minutes if c else None),
                    _fmt(c.seed if c else None), "true" if i in on else "false"])
    return buf.getvalue()


def load_external(path: Union[str, Path]) -> list[ParetoPoint]:
    """Read externally produced points from a CSV with ``utility`` and ``privacy`` columns (``label`` optional)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"external points file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"utility", "privacy"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing column(s) {sorted(missing)}")
        out = []
        for i, row in enumerate(reader):
            try:
                out.append(ParetoPoint(float(row["utility"]), float(row["privacy"]), label=row.get("label") or f"external-{i}"))
            except ValueError as exc:
                raise ConfigError(f"{path}: row {i + 2}: {exc}") from exc
    return out


def sweep_summary(points: Sequence[ParetoPoint], sweep: SweepConfig,
                  external: Sequence[ParetoPoint] = ()) -> dict:
    idx = front_indices(points)
    front = [points[i] for i in idx]
    return {
        "sweep": sweep.to_dict(),
        "cells": len(points),
        "failed": [i for i, p in enumerate(points) if not p.ok],
        "front_indices": idx,
        "points": [p.to_dict() for p in points],
        "external": [dict(p.to_dict(), verdict=classify_external(p, front)) for p in external],
    }


def plot_front(path: Union[str, Path], points: Sequence[ParetoPoint], external: Sequence[ParetoPoint] = ()) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [p for p in points if p.ok]
    front = pareto_front(ok)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter([p.utility for p in ok], [p.privacy for p in ok], marker="s", facecolors="none", edgecolors="tab:blue",
               label="sweep")
    fs = sorted(front, key=lambda p: p.utility)
    ax.plot([p.utility for p in fs], [p.privacy for p in fs], "k--", lw=1, label="frontier")
    if external:
        ax.scatter([p.utility for p in external], [p.privacy for p in external], c="tab:red", label="external")
    ax.set_xlabel("utility (top-1 next-location accuracy)")
    ax.set_ylabel("privacy (top-1 re-identification error)")
    ax.legend(loc="best")
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    return atomic_write(path, buf.getvalue())
