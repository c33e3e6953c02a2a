"""Evaluation quantities: top-n accuracy, reconstruction distances, utility
decline, privacy gain and the composite trade-off score."""

from __future__ import annotations

import io
import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional

import jsonschema
import numpy as np

TOP_N = (1, 3, 5, 10)
LOG_FLOOR = 1e-12
REPORT_SCHEMA_VERSION = 1


def top_n_accuracy(prob_rows, true_labels, n: int) -> float:
    """Fraction of rows whose label is among the ``n`` most probable classes.

    Ties are broken toward the lower class index; ``n`` larger than the
    number of classes is clipped.
    """
    p = np.asarray(prob_rows, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    if n < 1:
        raise ValueError("n must be >= 1")
    if p.ndim != 2 or p.shape[0] != labels.shape[0]:
        raise ValueError(f"shape mismatch: probs {p.shape}, labels {labels.shape}")
    if p.shape[0] == 0:
        return 0.0
    n = min(n, p.shape[1])
    # rank of the true class = #classes strictly more probable + #equally probable with a lower index
    p_true = p[np.arange(len(labels)), labels]
    higher = (p > p_true[:, None]).sum(1)
    tied_before = ((p == p_true[:, None]) & (np.arange(p.shape[1])[None, :] < labels[:, None])).sum(1)
    return float(np.mean(higher + tied_before < n))


def top_n_table(prob_rows, true_labels, ns=TOP_N) -> dict[int, float]:
    return {n: top_n_accuracy(prob_rows, true_labels, n) for n in ns}


class Distances(NamedTuple):
    euclidean: float
    manhattan: float
    euclidean_log10: float
    manhattan_log10: float


def reconstruction_distance(X, X_rec, mask=None) -> Distances:
    """Euclidean and Manhattan distance over the unmasked entries of the flattened arrays.

    ``mask`` may cover whole timesteps (shape ``X.shape[:-1]``) or single entries.
    """
    X = np.asarray(X, dtype=np.float64)
    X_rec = np.asarray(X_rec, dtype=np.float64)
    if X.shape != X_rec.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {X_rec.shape}")
    diff = X_rec - X
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != X.shape:
            m = np.broadcast_to(m[..., None], X.shape)
        diff = diff[m]
    diff = diff.ravel()
    euc = float(np.sqrt(np.dot(diff, diff)))
    man = float(np.abs(diff).sum())
    return Distances(euc, man, math.log10(max(euc, LOG_FLOOR)), math.log10(max(man, LOG_FLOOR)))


def utility_decline(standalone_acc: float, model_acc: float, relative: bool = False) -> float:
    """Signed change in utility; negative values are declines.

    Percentage points by default; ``relative=True`` divides by the standalone accuracy.
    """
    delta = (model_acc - standalone_acc) * 100.0
    if relative:
        return delta / standalone_acc if standalone_acc else math.nan
    return delta


def privacy_gain(standalone_reid_acc: float, model_reid_acc: float, relative: bool = False) -> float:
    """Signed change in re-identification inaccuracy; positive means more private."""
    delta = ((1.0 - model_reid_acc) - (1.0 - standalone_reid_acc)) * 100.0
    if relative:
        return delta / standalone_reid_acc if standalone_reid_acc else math.nan
    return delta


def tradeoff_score(privacy_gain_pct: float, utility_decline_pct: float) -> float:
    return privacy_gain_pct + utility_decline_pct


# --------------------------------------------------------------------------- report


@dataclass
class EvaluationReport:
    top_n_utility: dict[int, float] = field(default_factory=dict)
    top_n_privacy: dict[int, float] = field(default_factory=dict)
    euclidean: Optional[float] = None
    manhattan: Optional[float] = None
    euclidean_log10: Optional[float] = None
    manhattan_log10: Optional[float] = None
    utility_decline_pct: dict[int, float] = field(default_factory=dict)
    privacy_gain_pct: dict[int, float] = field(default_factory=dict)
    tradeoff_pct: Optional[float] = None
    relative: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def keyed(d):
            return {str(k): float(v) for k, v in sorted(d.items())}

        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "top_n_utility": keyed(self.top_n_utility),
            "top_n_privacy": keyed(self.top_n_privacy),
            "euclidean": self.euclidean,
            "manhattan": self.manhattan,
            "euclidean_log10": self.euclidean_log10,
            "manhattan_log10": self.manhattan_log10,
            "utility_decline_pct": keyed(self.utility_decline_pct),
            "privacy_gain_pct": keyed(self.privacy_gain_pct),
            "tradeoff_pct": self.tradeoff_pct,
            "relative": self.relative,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        validate_report(d)

        def keyed(m):
            return {int(k): float(v) for k, v in m.items()}

        return cls(keyed(d["top_n_utility"]), keyed(d["top_n_privacy"]), d["euclidean"], d["manhattan"],
                   d["euclidean_log10"], d["manhattan_log10"], keyed(d["utility_decline_pct"]),
                   keyed(d["privacy_gain_pct"]), d["tradeoff_pct"], d["relative"], d.get("extra", {}))

    def csv_row(self, **tags) -> dict:
        row = dict(tags)
        for n in TOP_N:
            row[f"utility_top{n}"] = self.top_n_utility.get(n)
            row[f"privacy_top{n}"] = self.top_n_privacy.get(n)
        row.update(euclidean=self.euclidean, manhattan=self.manhattan, euclidean_log10=self.euclidean_log10,
                   manhattan_log10=self.manhattan_log10)
        for n in TOP_N:
            row[f"utility_decline_top{n}"] = self.utility_decline_pct.get(n)
            row[f"privacy_gain_top{n}"] = self.privacy_gain_pct.get(n)
        row["tradeoff_pct"] = self.tradeoff_pct
        return row


_ACC_MAP = {"type": "object", "patternProperties": {"^[0-9]+$": {"type": "number", "minimum": 0, "maximum": 1}},
            "additionalProperties": False}
_PCT_MAP = {"type": "object", "patternProperties": {"^[0-9]+$": {"type": "number"}}, "additionalProperties": False}
_OPT_NUM = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema_version", "top_n_utility", "top_n_privacy", "euclidean", "manhattan", "euclidean_log10",
                 "manhattan_log10", "utility_decline_pct", "privacy_gain_pct", "tradeoff_pct", "relative"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "top_n_utility": _ACC_MAP,
        "top_n_privacy": _ACC_MAP,
        "euclidean": {"type": ["number", "null"], "minimum": 0},
        "manhattan": {"type": ["number", "null"], "minimum": 0},
        "euclidean_log10": _OPT_NUM,
        "manhattan_log10": _OPT_NUM,
        "utility_decline_pct": _PCT_MAP,
        "privacy_gain_pct": _PCT_MAP,
        "tradeoff_pct": _OPT_NUM,
        "relative": {"type": "boolean"},
        "extra": {"type": "object"},
    },
    "additionalProperties": False,
}


def validate_report(d: dict) -> None:
    jsonschema.validate(d, REPORT_SCHEMA)
    for key in ("top_n_utility", "top_n_privacy"):
        accs = [v for _, v in sorted((int(k), v) for k, v in d[key].items())]
        if any(b < a for a, b in zip(accs, accs[1:])):
            raise jsonschema.ValidationError(f"{key} must be non-decreasing in n")


def build_report(
    utility_probs=None,
    y=None,
    privacy_probs=None,
    z=None,
    X=None,
    X_rec=None,
    mask=None,
    standalone_utility: Optional[Mapping[int, float]] = None,
    standalone_privacy: Optional[Mapping[int, float]] = None,
    relative: bool = False,
    ns=TOP_N,
) -> EvaluationReport:
    """Assemble a report from whichever model outputs are available."""
    report = EvaluationReport(relative=relative)
    if utility_probs is not None:
        report.top_n_utility = top_n_table(utility_probs, y, ns)
    if privacy_probs is not None:
        report.top_n_privacy = top_n_table(privacy_probs, z, ns)
    if X_rec is not None:
        d = reconstruction_distance(X, X_rec, mask)
        report.euclidean, report.manhattan, report.euclidean_log10, report.manhattan_log10 = d
    if standalone_utility and report.top_n_utility:
        report.utility_decline_pct = {n: utility_decline(standalone_utility[n], a, relative)
                                      for n, a in report.top_n_utility.items() if n in standalone_utility}
    if standalone_privacy and report.top_n_privacy:
        report.privacy_gain_pct = {n: privacy_gain(standalone_privacy[n], a, relative)
                                   for n, a in report.top_n_privacy.items() if n in standalone_privacy}
    if 1 in report.utility_decline_pct and 1 in report.privacy_gain_pct:
        report.tradeoff_pct = tradeoff_score(report.privacy_gain_pct[1], report.utility_decline_pct[1])
    return report


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in r.items()})
    return buf.getvalue()
