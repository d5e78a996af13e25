"""Stratified folds, classification metrics, significance tests and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

log = logging.getLogger(__name__)


class StratificationError(ValueError):
    pass


@dataclass
class FoldPlan:
    k: int
    folds: np.ndarray  # fold index per sample
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        self._check(fold)
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        self._check(fold)
        return np.flatnonzero(self.folds != fold)

    def assignments(self, ids: Sequence[str]) -> dict[str, int]:
        return {pid: int(f) for pid, f in zip(ids, self.folds)}

    def _check(self, fold):
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} outside [0, {self.k - 1}]")


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle each class and deal it round-robin into ``k`` folds.

    The dealing position carries over from one class to the next so fold
    sizes stay balanced overall as well as per class.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.full(len(labels), -1, dtype=np.int64)
    start = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < k:
            raise StratificationError(f"class {c} has {len(members)} samples, fewer than k={k}")
        members = rng.permutation(members)
        folds[members] = (start + np.arange(len(members))) % k
        start = (start + len(members)) % k
    return FoldPlan(k, folds, seed)


def split_validation(indices, labels, fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/validation split of ``indices``.

    Classes with at least 5 members contribute ``max(1, round(fraction*n_c))``
    validation samples; smaller classes stay entirely in training.
    """
    indices = np.asarray(indices)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(labels[indices]):
        members = rng.permutation(indices[labels[indices] == c])
        if len(members) < 5:
            log.warning("class %s has only %d training samples; none held out for validation", c, len(members))
            train.append(members)
            continue
        n_val = max(1, int(math.floor(fraction * len(members) + 0.5)))
        val.append(members[:n_val])
        train.append(members[n_val:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.array([], dtype=np.int64)
    return cat(train), cat(val)


# --------------------------------------------------------------------------- metrics


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


@dataclass
class FoldMetrics:
    accuracy: float
    per_class_f1: np.ndarray
    macro_f1: float
    confusion: np.ndarray

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_f1": [float(x) for x in self.per_class_f1],
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FoldMetrics":
        return cls(
            float(doc["accuracy"]),
            np.asarray(doc["per_class_f1"], dtype=np.float64),
            float(doc["macro_f1"]),
            np.asarray(doc["confusion"], dtype=np.int64),
        )


def classification_metrics(labels, preds, num_classes: int) -> FoldMetrics:
    """Accuracy, per-class F1 (0 when precision + recall is 0) and macro F1."""
    cm = confusion_matrix(labels, preds, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    total = cm.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return FoldMetrics(accuracy, f1, float(f1.mean()), cm)


@dataclass
class MetricsReport:
    model: str
    per_fold: list[FoldMetrics] = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(f, metric) for f in self.per_fold], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self.values(metric).mean())

    def std(self, metric: str) -> float:
        v = self.values(metric)
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "per_fold": [f.to_json() for f in self.per_fold],
            "summary": {
                m: {"mean": self.mean(m), "std": self.std(m)} for m in REPORT_METRICS
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        return cls(doc["model"], [FoldMetrics.from_json(f) for f in doc["per_fold"]])


REPORT_METRICS = ("accuracy", "macro_f1")


# --------------------------------------------------------------------------- significance


@dataclass
class TTestResult:
    t: float
    df: float
    raw_p: float
    adjusted_p: float
    significant: bool
    degenerate: bool = False


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t via the regularized incomplete beta function."""
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(df / 2.0, 0.5, x)
    return float(tail if t >= 0 else 1.0 - tail)


def bonferroni_onesided_ttest(best, other, num_comparisons: int = 1, alpha: float = 0.05) -> TTestResult:
    """Welch t-test of ``mean(best) > mean(other)`` with Bonferroni adjustment."""
    a = np.asarray(best, dtype=np.float64)
    b = np.asarray(other, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least two scores")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return TTestResult(0.0, float("nan"), 0.5, min(1.0, num_comparisons * 0.5), False, True)
        t = math.copysign(math.inf, diff)
        raw = 0.0 if diff > 0 else 1.0
        adj = min(1.0, num_comparisons * raw)
        return TTestResult(t, float("nan"), raw, adj, adj < alpha, True)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    raw = student_t_sf(t, df)
    adj = min(1.0, num_comparisons * raw)
    return TTestResult(float(t), float(df), raw, adj, adj < alpha)


def significance_table(reports: Sequence[MetricsReport], metric: str) -> list[tuple[str, TTestResult]]:
    """Compare the best model (highest mean ``metric``) against every other."""
    if len(reports) < 2:
        return []
    best = max(reports, key=lambda r: r.mean(metric))
    others = [r for r in reports if r is not best]
    return [
        (f"{best.model}>{r.model}:{metric}", bonferroni_onesided_ttest(best.values(metric), r.values(metric), len(others)))
        for r in others
    ]


# --------------------------------------------------------------------------- reports


def report_csv(reports: Sequence[MetricsReport]) -> str:
    k = max((len(r.per_fold) for r in reports), default=0)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "metric", "mean", "std"] + [f"fold_{i}" for i in range(k)])
    for r in reports:
        for m in REPORT_METRICS:
            vals = [f"{v:.4f}" for v in r.values(m)]
            writer.writerow([r.model, m, f"{r.mean(m):.4f}", f"{r.std(m):.4f}"] + vals + [""] * (k - len(vals)))
    return buf.getvalue()


def significance_csv(rows: Sequence[tuple[str, TTestResult]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["comparison", "t", "raw_p", "adjusted_p", "significant"])
    for name, r in rows:
        writer.writerow([name, f"{r.t:.4f}", f"{r.raw_p:.6f}", f"{r.adjusted_p:.6f}", int(r.significant)])
    return buf.getvalue()


def _finite_or_none(x: float):
    return x if math.isfinite(x) else None


def emit_report(reports: Sequence[MetricsReport], path: str | Path) -> dict[str, Path]:
    """Write ``<path>.json``, ``<path>.csv`` and ``<path>_significance.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sig = [row for m in REPORT_METRICS for row in significance_table(reports, m)]
    doc = {
        "models": [r.to_json() for r in reports],
        "significance": [
            {"comparison": n, "t": _finite_or_none(r.t), "df": _finite_or_none(r.df), "raw_p": r.raw_p, "adjusted_p": r.adjusted_p,
             "significant": r.significant, "degenerate": r.degenerate}
            for n, r in sig
        ],
    }
    out = {
        "json": path.with_suffix(".json"),
        "csv": path.with_suffix(".csv"),
        "significance": path.with_name(path.stem + "_significance.csv"),
    }
    out["json"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    out["csv"].write_text(report_csv(reports))
    out["significance"].write_text(significance_csv(sig))
    return out
