"""Confusion matrices, per-class metrics, ROC/AUC, fold aggregation and subgroup tables."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import NUM_CLASSES, ImageRecord, Label

FACTORS = ("projection", "sensor", "sex", "source")


class EvalError(ValueError):
    pass


class LengthMismatch(EvalError):
    pass


class EmptyInput(EvalError):
    pass


class DegenerateLabels(EvalError):
    pass


class TooFewReports(EvalError):
    pass


def confusion(preds: Sequence[int], truth: Sequence[int]) -> np.ndarray:
    """3x3 counts; rows are true classes, columns predicted classes."""
    preds = np.asarray(preds, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if preds.shape != truth.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {truth.size} labels")
    if preds.size == 0:
        raise EmptyInput("no records to evaluate")
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def row_normalized(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, sums, out=np.zeros_like(cm), where=sums > 0)


@dataclass
class MetricsReport:
    ppv: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    acc: float
    bacc: float
    gmr: float
    auc: np.ndarray | None = None
    macro_auc: float | None = None
    flags: list[str] = field(default_factory=list)
    std: dict[str, np.ndarray | float] | None = None

    def to_dict(self) -> dict:
        def per_class(v):
            return None if v is None else {lab.name: float(v[lab]) for lab in Label}

        out = {
            "ppv": per_class(self.ppv),
            "recall": per_class(self.recall),
            "f1": per_class(self.f1),
            "acc": self.acc,
            "bacc": self.bacc,
            "gmr": self.gmr,
            "auc": per_class(self.auc),
            "macro_auc": self.macro_auc,
            "flags": list(self.flags),
        }
        if self.std is not None:
            out["std"] = {k: (per_class(v) if np.ndim(v) else float(v)) for k, v in self.std.items()}
        return out


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, True) if den > 0 else (0.0, False)


def metrics(cm: np.ndarray) -> MetricsReport:
    """PPV/Recall/F1 per class plus Acc, BAcc and GMR.

    Zero-denominator ratios are reported as 0 and named in ``flags``
    (``UndefinedPPV:<class>``, ``UndefinedRecall:<class>``).
    """
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise EmptyInput("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    ppv = np.zeros(NUM_CLASSES)
    recall = np.zeros(NUM_CLASSES)
    f1 = np.zeros(NUM_CLASSES)
    flags = []
    for c in range(NUM_CLASSES):
        ppv[c], ok = _ratio(tp[c], cm[:, c].sum())
        if not ok:
            flags.append(f"UndefinedPPV:{Label(c).name}")
        recall[c], ok = _ratio(tp[c], cm[c, :].sum())
        if not ok:
            flags.append(f"UndefinedRecall:{Label(c).name}")
        if ppv[c] + recall[c] > 0:
            f1[c] = 2 * ppv[c] * recall[c] / (ppv[c] + recall[c])
    return MetricsReport(
        ppv=ppv,
        recall=recall,
        f1=f1,
        acc=float(tp.sum() / total),
        bacc=float(recall.mean()),
        gmr=float(np.prod(recall) ** (1.0 / NUM_CLASSES)),
        flags=flags,
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores, truth: Sequence[int], positive: int) -> RocCurve:
    """One-vs-rest ROC for ``positive`` scored by its column of ``scores``.

    ``scores`` is an ``(N, 3)`` probability array or a 1-D score vector. The
    AUC is the Mann-Whitney statistic with midrank ties, i.e.
    P(s_pos > s_neg) + P(s_pos = s_neg) / 2, which is also the trapezoid area
    under the returned curve.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, int(positive)]
    y = np.asarray(truth, dtype=int) == int(positive)
    if s.shape != y.shape:
        raise LengthMismatch(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"one-vs-rest for class {int(positive)} needs both outcomes")

    # twice the midranks are integers, keeping the statistic exact
    twice_ranks = np.rint(2 * rankdata(s, method="average")).astype(np.int64)
    u_twice = int(twice_ranks[y].sum()) - n_pos * (n_pos + 1)
    auc = u_twice / (2 * n_pos * n_neg)

    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    distinct = np.flatnonzero(np.diff(s_sorted)) if s.size > 1 else np.array([], dtype=int)
    cut = np.r_[distinct, s.size - 1]
    tps = np.cumsum(y_sorted)[cut]
    fps = (cut + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s_sorted[cut]]
    return RocCurve(fpr, tpr, thresholds, float(auc))


def trapezoid_area(curve: RocCurve) -> float:
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2))


def with_auc(report: MetricsReport, scores, truth) -> MetricsReport:
    """Attach per-class one-vs-rest AUCs; classes absent from ``truth`` get 0 and a flag."""
    aucs = np.zeros(NUM_CLASSES)
    defined = []
    for c in range(NUM_CLASSES):
        try:
            aucs[c] = roc_auc(scores, truth, c).auc
            defined.append(c)
        except DegenerateLabels:
            report.flags.append(f"UndefinedAUC:{Label(c).name}")
    report.auc = aucs
    report.macro_auc = float(aucs[defined].mean()) if defined else 0.0
    return report


def evaluate(preds, truth, scores=None) -> MetricsReport:
    report = metrics(confusion(preds, truth))
    return report if scores is None else with_auc(report, scores, truth)


def average_roc(curves: Sequence[RocCurve], grid: int = 101) -> tuple[np.ndarray, np.ndarray]:
    """Macro-average of ROC curves on a common FPR grid."""
    fpr = np.linspace(0.0, 1.0, grid)
    tpr = np.mean([np.interp(fpr, c.fpr, c.tpr) for c in curves], axis=0)
    tpr[0] = 0.0
    return fpr, tpr


_SCALARS = ("acc", "bacc", "gmr", "macro_auc")
_VECTORS = ("ppv", "recall", "f1", "auc")


def aggregate_folds(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean and sample (n-1) standard deviation of each metric across folds."""
    if len(reports) < 2:
        raise TooFewReports(f"need at least 2 fold reports, got {len(reports)}")
    mean: dict = {}
    std: dict = {}
    for name in _VECTORS + _SCALARS:
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            mean[name] = None
            continue
        arr = np.asarray(values, dtype=np.float64)
        mean[name] = arr.mean(axis=0)
        std[name] = arr.std(axis=0, ddof=1)
    flags = sorted({f for r in reports for f in r.flags})
    return MetricsReport(
        ppv=mean["ppv"], recall=mean["recall"], f1=mean["f1"],
        acc=float(mean["acc"]), bacc=float(mean["bacc"]), gmr=float(mean["gmr"]),
        auc=mean["auc"],
        macro_auc=None if mean["macro_auc"] is None else float(mean["macro_auc"]),
        flags=flags,
        std={k: (float(v) if np.ndim(v) == 0 else v) for k, v in std.items()},
    )


# --- subgroup analysis ----------------------------------------------------


@dataclass
class SubgroupTable:
    factor: str
    levels: list[str]
    pct_test: list[float]
    pct_hits: dict[str, list[float]]
    n_test: int = 0
    n_hits: dict[str, int] = field(default_factory=dict)

    def rows(self, decimals: int | None = 1) -> list[dict]:
        def fmt(v):
            return v if decimals is None else round(v, decimals)

        out = []
        for i, level in enumerate(self.levels):
            row = {"factor": self.factor, "type": level, "pct_test": fmt(self.pct_test[i])}
            for exp, pcts in self.pct_hits.items():
                row[f"pct_hits_{exp}"] = fmt(pcts[i])
            out.append(row)
        return out

    def write_csv(self, path: str | Path) -> None:
        rows = self.rows()
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["factor", "type", "pct_test"])
            writer.writeheader()
            writer.writerows(rows)


def _level(record: ImageRecord, factor: str) -> str:
    value = getattr(record, factor)
    return getattr(value, "value", str(value))


def _percentages(levels: list[str], values: list[str]) -> list[float]:
    n = len(values)
    if n == 0:
        return [0.0] * len(levels)
    return [100.0 * values.count(lv) / n for lv in levels]


def subgroup_table(
    truth: Sequence[int],
    records: Sequence[ImageRecord],
    factor: str,
    preds_by_experiment: Mapping[str, Sequence[int]],
    label: Label | None = Label.Covid19,
) -> SubgroupTable:
    """Share of each factor level among test samples and among correct predictions.

    Restricted to records whose true class is ``label`` (all records when
    ``label`` is None); one hits column per experiment.
    """
    if factor not in FACTORS:
        raise ValueError(f"factor must be one of {FACTORS}")
    truth = np.asarray(truth, dtype=int)
    if len(records) != truth.size:
        raise LengthMismatch("records and truth differ in length")
    keep = np.ones(truth.size, bool) if label is None else truth == int(label)
    test_levels = [_level(r, factor) for r, k in zip(records, keep) if k]
    enum_cls = type(getattr(records[0], factor)) if records else None
    order = [m.value for m in enum_cls] if enum_cls else []
    levels = [lv for lv in order if lv in test_levels]
    pct_hits: dict[str, list[float]] = {}
    n_hits: dict[str, int] = {}
    for exp, preds in preds_by_experiment.items():
        preds = np.asarray(preds, dtype=int)
        if preds.size != truth.size:
            raise LengthMismatch(f"experiment {exp}: predictions and truth differ in length")
        hit = keep & (preds == truth)
        hit_levels = [_level(r, factor) for r, h in zip(records, hit) if h]
        pct_hits[exp] = _percentages(levels, hit_levels)
        n_hits[exp] = len(hit_levels)
    return SubgroupTable(factor, levels, _percentages(levels, test_levels), pct_hits,
                         len(test_levels), n_hits)


def subgroup_report(preds, truth, records, factor: str, label: Label | None = Label.Covid19,
                    experiment: str = "exp") -> SubgroupTable:
    return subgroup_table(truth, records, factor, {experiment: preds}, label)


def write_confusion_csv(cm: np.ndarray, path: str | Path) -> None:
    norm = row_normalized(cm)
    names = [lab.name for lab in Label]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "true"] + names)
        for i, name in enumerate(names):
            writer.writerow(["count", name] + [int(v) for v in cm[i]])
        for i, name in enumerate(names):
            writer.writerow(["row_normalized", name] + [repr(float(v)) for v in norm[i]])


def write_roc_csv(curve: RocCurve, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def format_pm(mean: float, std: float, scale: float = 100.0) -> str:
    """``91.53 ± 0.20`` style cell."""
    if std is None or (isinstance(std, float) and math.isnan(std)):
        return f"{mean * scale:.2f}"
    return f"{mean * scale:.2f} ± {std * scale:.2f}"
