"""Threshold metrics, ROC curves and operating points, curve averaging, and
prediction percentiles over a class-balanced reference set.

A prediction counts as positive (melanoma) when ``p_mel >= threshold``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .reporting import write_csv

FNR_TOLERANCE = 1e-12


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionSet:
    ids: tuple[str, ...]
    labels: np.ndarray
    p_mel: np.ndarray
    folds: np.ndarray | None = None
    repeats: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels).astype(np.intp)
        p = np.asarray(self.p_mel, dtype=np.float64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "p_mel", p)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        if labels.shape != p.shape or labels.ndim != 1 or len(self.ids) != labels.size:
            raise EvalError("ids, labels and predictions must be equal-length vectors")
        if np.any((labels != 0) & (labels != 1)):
            raise EvalError("labels must be 0 or 1")
        if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
            raise EvalError("predictions must lie in [0, 1]")
        for name in ("folds", "repeats"):
            tag = getattr(self, name)
            if tag is not None:
                tag = np.asarray(tag).astype(np.intp)
                if tag.shape != labels.shape:
                    raise EvalError(f"{name} tag length does not match")
                object.__setattr__(self, name, tag)

    @classmethod
    def from_arrays(cls, labels, p_mel, ids=None, folds=None, repeats=None) -> "PredictionSet":
        labels = np.asarray(labels)
        if ids is None:
            ids = [str(i) for i in range(labels.size)]
        return cls(tuple(ids), labels, p_mel, folds, repeats)

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, index) -> "PredictionSet":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return PredictionSet(
            tuple(self.ids[i] for i in index),
            self.labels[index],
            self.p_mel[index],
            None if self.folds is None else self.folds[index],
            None if self.repeats is None else self.repeats[index],
        )

    def require_both_classes(self) -> None:
        n_pos = int(self.labels.sum())
        if n_pos == 0 or n_pos == self.labels.size:
            raise EvalError("need at least one sample of each class")


class ConfusionMetrics(NamedTuple):
    accuracy: float
    balanced_accuracy: float
    fnr: float
    fpr: float
    tpr: float


@dataclass(frozen=True)
class RocCurve:
    """Staircase ROC ordered by decreasing threshold, from (0, 0) to (1, 1)."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass(frozen=True)
class AveragedRoc:
    curve: RocCurve
    fpr_std: np.ndarray
    tpr_std: np.ndarray


class OperatingPoint(NamedTuple):
    threshold: float
    fpr: float
    tpr: float
    fnr: float
    balanced_accuracy: float
    unreachable: bool = False


@dataclass
class IndicationReport:
    sample_id: str
    percentiles: dict = field(default_factory=dict)


class MetricsRow(NamedTuple):
    name: str
    roc_auc_mean: float
    roc_auc_std: float
    n_subsets: int
    best_balanced_accuracy: float
    fpr_at_fnr: float
    fnr_target: float
    averaged: AveragedRoc


# --------------------------------------------------------------------------
# threshold metrics


def confusion_metrics(ps: PredictionSet, t: float = 0.5) -> ConfusionMetrics:
    ps.require_both_classes()
    pred = ps.p_mel >= t
    pos = ps.labels == 1
    tpr = float(np.mean(pred[pos]))
    fpr = float(np.mean(pred[~pos]))
    acc = float(np.mean(pred == pos))
    return ConfusionMetrics(acc, (tpr + 1.0 - fpr) / 2.0, 1.0 - tpr, fpr, tpr)


# --------------------------------------------------------------------------
# ROC


def _trapezoid(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def roc_curve(ps: PredictionSet) -> RocCurve:
    """ROC staircase with one step per distinct prediction value.

    Tied predictions form a single (diagonal) step.  Thresholds run from
    ``+inf`` (nothing positive) down to ``0`` (everything positive).
    """
    ps.require_both_classes()
    values, inverse = np.unique(ps.p_mel, return_inverse=True)
    n_pos_at = np.bincount(inverse, weights=ps.labels, minlength=values.size)
    n_all_at = np.bincount(inverse, minlength=values.size)
    n_neg_at = n_all_at - n_pos_at
    # descending thresholds: cumulative counts of predictions >= value
    tp = np.cumsum(n_pos_at[::-1])
    fp = np.cumsum(n_neg_at[::-1])
    thresholds = values[::-1]
    P, N = tp[-1], fp[-1]

    thr = np.concatenate([[math.inf], thresholds])
    tpr = np.concatenate([[0.0], tp / P])
    fpr = np.concatenate([[0.0], fp / N])
    if thresholds[-1] > 0.0:
        thr = np.append(thr, 0.0)
        tpr = np.append(tpr, 1.0)
        fpr = np.append(fpr, 1.0)
    return RocCurve(thr, fpr, tpr, _trapezoid(fpr, tpr))


def auc_oracle(ps: PredictionSet) -> float:
    """Mean over (positive, negative) pairs of 1 / 0.5 / 0 for win / tie / loss."""
    ps.require_both_classes()
    pos = ps.p_mel[ps.labels == 1]
    neg = ps.p_mel[ps.labels == 0]
    score = 0.0
    for chunk in np.array_split(pos, max(1, pos.size // 512)):
        score += float(np.sum(chunk[:, None] > neg[None, :])) + 0.5 * float(np.sum(chunk[:, None] == neg[None, :]))
    return score / (pos.size * neg.size)


def _operating_point(curve: RocCurve, i: int, unreachable: bool = False) -> OperatingPoint:
    fpr, tpr = float(curve.fpr[i]), float(curve.tpr[i])
    return OperatingPoint(float(curve.thresholds[i]), fpr, tpr, 1.0 - tpr, (tpr + 1.0 - fpr) / 2.0, unreachable)


def best_balanced_accuracy(curve: RocCurve) -> OperatingPoint:
    """Point maximizing ``(tpr + 1 - fpr) / 2``; ties go to lower fpr, then lower threshold."""
    ba = (curve.tpr + 1.0 - curve.fpr) / 2.0
    i = np.lexsort((curve.thresholds, curve.fpr, -ba))[0]
    return _operating_point(curve, int(i))


def threshold_at_fnr(curve: RocCurve, target_fnr: float = 0.1) -> OperatingPoint:
    """Highest-threshold point whose false negative rate is at most ``target_fnr``.

    If the only way to meet the target is to call every negative positive
    (fpr = 1), the all-positive end point is returned with ``unreachable`` set.
    """
    if not 0.0 < target_fnr < 1.0:
        raise EvalError("target_fnr must lie in (0, 1)")
    fnr = 1.0 - curve.tpr
    ok = np.flatnonzero(fnr <= target_fnr + FNR_TOLERANCE)
    # thresholds are sorted descending, so the first qualifying point has the largest one
    i = int(ok[0])
    if curve.fpr[i] >= 1.0:
        return _operating_point(curve, len(curve.thresholds) - 1, unreachable=True)
    return _operating_point(curve, i)


def _resample(curve: RocCurve, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # rates at t equal those at the smallest curve threshold >= t
    asc = curve.thresholds[::-1]
    pos = np.searchsorted(asc, grid, side="left")
    idx = len(asc) - 1 - pos
    return curve.fpr[idx], curve.tpr[idx]


def average_curves(curves: list[RocCurve]) -> AveragedRoc:
    """Average fpr and tpr at each threshold of the union grid, then integrate.

    Each curve is read as a step function of the threshold.  Spread is the
    population standard deviation across curves.
    """
    if not curves:
        raise EvalError("no curves to average")
    grid = np.unique(np.concatenate([c.thresholds for c in curves]))[::-1]
    fprs, tprs = zip(*(_resample(c, grid) for c in curves))
    fprs, tprs = np.array(fprs), np.array(tprs)
    fpr, tpr = fprs.mean(axis=0), tprs.mean(axis=0)
    curve = RocCurve(grid, fpr, tpr, _trapezoid(fpr, tpr))
    return AveragedRoc(curve, fprs.std(axis=0), tprs.std(axis=0))


# --------------------------------------------------------------------------
# indications


def balanced_reference(ref: PredictionSet, exact_balance: bool = False) -> np.ndarray:
    """Reference predictions with the minority class replicated.

    By default each minority entry is repeated ``round(majority / minority)``
    times (halves round up).  With ``exact_balance`` the copies are topped up
    entry by entry until both classes have the same count.
    """
    ref.require_both_classes()
    pos = ref.p_mel[ref.labels == 1]
    neg = ref.p_mel[ref.labels == 0]
    minority, majority = (pos, neg) if pos.size <= neg.size else (neg, pos)
    if exact_balance:
        reps, extra = divmod(majority.size, minority.size)
        boosted = np.concatenate([np.repeat(minority, reps), minority[:extra]])
    else:
        r = int(math.floor(majority.size / minority.size + 0.5))
        boosted = np.repeat(minority, r)
    return np.concatenate([majority, boosted])


def indication_percentile(value: float, ref: PredictionSet, exact_balance: bool = False) -> float:
    """Mid-rank percentile of ``value`` within the balanced reference multiset."""
    values = balanced_reference(ref, exact_balance)
    below = np.count_nonzero(values < value)
    equal = np.count_nonzero(values == value)
    return 100.0 * (below + 0.5 * equal) / values.size


def indication_report(sample_id: str, values: dict, refs: dict, exact_balance: bool = False) -> IndicationReport:
    """Percentile per feature kind; ``refs[kind]`` is the reference set of the sample's fold."""
    report = IndicationReport(sample_id)
    for kind, value in values.items():
        if kind not in refs:
            raise EvalError(f"no reference predictions for {kind}")
        report.percentiles[kind] = indication_percentile(value, refs[kind], exact_balance)
    return report


# --------------------------------------------------------------------------
# tables


def split_by_tags(ps: PredictionSet) -> list[PredictionSet]:
    """One subset per (fold, repeat) tag pair; untagged sets are a single subset."""
    if ps.folds is None and ps.repeats is None:
        return [ps]
    folds = ps.folds if ps.folds is not None else np.zeros(len(ps), dtype=np.intp)
    repeats = ps.repeats if ps.repeats is not None else np.zeros(len(ps), dtype=np.intp)
    if np.any(folds < 0) or np.any(repeats < 0):
        raise EvalError("negative fold/repeat tag")
    keys = sorted(set(zip(folds.tolist(), repeats.tolist())))
    return [ps.subset((folds == f) & (repeats == r)) for f, r in keys]


def metrics_row(name: str, ps: PredictionSet, target_fnr: float = 0.1) -> MetricsRow:
    subsets = split_by_tags(ps)
    curves = []
    for sub in subsets:
        try:
            curves.append(roc_curve(sub))
        except EvalError as exc:
            raise EvalError(f"{name}: tagged subset lacks a class") from exc
    aucs = np.array([c.auc for c in curves])
    avg = average_curves(curves)
    best = best_balanced_accuracy(avg.curve)
    at_fnr = threshold_at_fnr(avg.curve, target_fnr)
    return MetricsRow(name, float(aucs.mean()), float(aucs.std()), len(curves), best.balanced_accuracy, at_fnr.fpr, target_fnr, avg)


def metrics_table(runs, target_fnr: float = 0.1) -> list[MetricsRow]:
    """One row per named run: AUC mean and population std over tagged subsets;
    best balanced accuracy and fpr at the target fnr from the averaged curve."""
    items = runs.items() if isinstance(runs, dict) else runs
    return [metrics_row(name, ps, target_fnr) for name, ps in items]


METRICS_HEADER = ["name", "roc_auc", "roc_auc_std", "best_balanced_accuracy", "fpr_at_fnr_0.1"]


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    write_csv(
        path,
        METRICS_HEADER,
        [(r.name, r.roc_auc_mean, r.roc_auc_std, r.best_balanced_accuracy, r.fpr_at_fnr) for r in rows],
    )


def write_roc_csv(path, curve: RocCurve, fpr_std=None, tpr_std=None) -> None:
    if fpr_std is None:
        write_csv(path, ["threshold", "fpr", "tpr"], zip(curve.thresholds, curve.fpr, curve.tpr))
    else:
        write_csv(
            path,
            ["threshold", "fpr", "tpr", "fpr_std", "tpr_std"],
            zip(curve.thresholds, curve.fpr, curve.tpr, fpr_std, tpr_std),
        )
