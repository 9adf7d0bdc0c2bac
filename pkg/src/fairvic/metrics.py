"""Performance, group-fairness and counterfactual evaluation.

Group encoding follows the datasets: 1 is the privileged group, 0 the
unprivileged one. Metrics whose denominators are empty raise
:class:`~fairvic.errors.UndefinedMetricError` rather than returning NaN.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np

from fairvic.errors import ShapeError, UndefinedMetricError
from fairvic.losses import flip_protected
from fairvic.nn import Mode, Network, forward

if TYPE_CHECKING:
    from fairvic.data import Dataset

METRIC_NAMES = (
    "accuracy", "f1", "equalized_odds", "absolute_odds",
    "statistical_parity", "disparate_impact",
)
DECISION_THRESHOLD = 0.5


def threshold(pred_probs) -> np.ndarray:
    """1 where probability >= 0.5, else 0."""
    return (np.asarray(pred_probs, dtype=np.float64) >= DECISION_THRESHOLD).astype(np.int64)


@dataclass(frozen=True)
class EvalBundle:
    pred_probs: np.ndarray
    pred_labels: np.ndarray
    true_labels: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        n = len(self.pred_labels)
        for name in ("pred_probs", "true_labels", "group"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"EvalBundle.{name} length differs from pred_labels ({n})")

    @classmethod
    def from_probs(cls, pred_probs, true_labels, group) -> "EvalBundle":
        probs = np.asarray(pred_probs, dtype=np.float64)
        return cls(probs, threshold(probs),
                   np.asarray(true_labels).astype(np.int64),
                   np.asarray(group).astype(np.int64))

    @classmethod
    def from_labels(cls, pred_labels, true_labels, group) -> "EvalBundle":
        labels = np.asarray(pred_labels).astype(np.int64)
        return cls(labels.astype(np.float64), labels,
                   np.asarray(true_labels).astype(np.int64),
                   np.asarray(group).astype(np.int64))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def size(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def positives_predicted(self) -> int:
        return self.tp + self.fp


@dataclass(frozen=True)
class GroupConfusion:
    unprivileged: Confusion
    privileged: Confusion


def _confusion(pred: np.ndarray, true: np.ndarray) -> Confusion:
    return Confusion(
        tp=int(np.count_nonzero((pred == 1) & (true == 1))),
        fp=int(np.count_nonzero((pred == 1) & (true == 0))),
        tn=int(np.count_nonzero((pred == 0) & (true == 0))),
        fn=int(np.count_nonzero((pred == 0) & (true == 1))),
    )


def group_confusion(b: EvalBundle) -> GroupConfusion:
    u = b.group == 0
    p = b.group == 1
    return GroupConfusion(
        _confusion(b.pred_labels[u], b.true_labels[u]),
        _confusion(b.pred_labels[p], b.true_labels[p]),
    )


def _rates(c: Confusion, side: str, metric: str) -> tuple[float, float]:
    if c.tp + c.fn == 0:
        raise UndefinedMetricError(metric, f"{side} group has no positive true labels (TPR)")
    if c.fp + c.tn == 0:
        raise UndefinedMetricError(metric, f"{side} group has no negative true labels (FPR)")
    return c.tp / (c.tp + c.fn), c.fp / (c.fp + c.tn)


def _rate_gaps(b: EvalBundle, metric: str) -> tuple[float, float]:
    gc = group_confusion(b)
    tpr_u, fpr_u = _rates(gc.unprivileged, "unprivileged", metric)
    tpr_p, fpr_p = _rates(gc.privileged, "privileged", metric)
    return abs(fpr_u - fpr_p), abs(tpr_u - tpr_p)


def equalized_odds_diff(b: EvalBundle) -> float:
    """max(|FPR_u - FPR_p|, |TPR_u - TPR_p|)"""
    fpr_gap, tpr_gap = _rate_gaps(b, "equalized_odds")
    return max(fpr_gap, tpr_gap)


def average_abs_odds_diff(b: EvalBundle) -> float:
    fpr_gap, tpr_gap = _rate_gaps(b, "absolute_odds")
    return 0.5 * (fpr_gap + tpr_gap)


def _positive_rates(b: EvalBundle, metric: str) -> tuple[float, float]:
    gc = group_confusion(b)
    if gc.unprivileged.size == 0:
        raise UndefinedMetricError(metric, "unprivileged group is empty")
    if gc.privileged.size == 0:
        raise UndefinedMetricError(metric, "privileged group is empty")
    return (gc.unprivileged.positives_predicted / gc.unprivileged.size,
            gc.privileged.positives_predicted / gc.privileged.size)


def statistical_parity_diff(b: EvalBundle) -> float:
    """Signed P(yhat=1 | unprivileged) - P(yhat=1 | privileged)."""
    rate_u, rate_p = _positive_rates(b, "statistical_parity")
    return rate_u - rate_p


def disparate_impact(b: EvalBundle) -> float:
    rate_u, rate_p = _positive_rates(b, "disparate_impact")
    if rate_p == 0:
        raise UndefinedMetricError("disparate_impact", "privileged group has no positive predictions")
    return rate_u / rate_p


def accuracy_f1(b: EvalBundle) -> tuple[float, float]:
    c = _confusion(b.pred_labels, b.true_labels)
    if c.size == 0:
        raise UndefinedMetricError("accuracy", "empty bundle")
    accuracy = (c.tp + c.tn) / c.size
    denom = 2 * c.tp + c.fp + c.fn
    f1 = 0.0 if denom == 0 else 2 * c.tp / denom
    return accuracy, f1


@dataclass(frozen=True)
class MetricReport:
    """Six metrics for one evaluated model; ``None`` marks an undefined metric."""

    accuracy: float | None
    f1: float | None
    equalized_odds: float | None
    absolute_odds: float | None
    statistical_parity: float | None
    disparate_impact: float | None
    undefined: dict[str, str] = field(default_factory=dict)

    def values(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def as_record(self) -> dict:
        """Flat metric-name -> value mapping (plus undefined reasons, if any)."""
        rec = self.values()
        if self.undefined:
            rec["undefined"] = dict(sorted(self.undefined.items()))
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "MetricReport":
        return cls(**{k: rec.get(k) for k in METRIC_NAMES}, undefined=dict(rec.get("undefined", {})))


def report(b: EvalBundle) -> MetricReport:
    """Compute all six metrics, recording undefined ones instead of raising."""
    values: dict[str, float | None] = {}
    undefined: dict[str, str] = {}
    try:
        values["accuracy"], values["f1"] = accuracy_f1(b)
    except UndefinedMetricError as exc:
        values["accuracy"] = values["f1"] = None
        undefined["accuracy"] = undefined["f1"] = exc.reason
    for name, fn in (
        ("equalized_odds", equalized_odds_diff),
        ("absolute_odds", average_abs_odds_diff),
        ("statistical_parity", statistical_parity_diff),
        ("disparate_impact", disparate_impact),
    ):
        try:
            values[name] = fn(b)
        except UndefinedMetricError as exc:
            values[name] = None
            undefined[name] = exc.reason
    return MetricReport(**values, undefined=undefined)


def predict_proba(model: "Network", features: np.ndarray) -> np.ndarray:
    preds, _, _ = forward(model, features, Mode.EVAL)
    return preds


def evaluate(model: "Network", data: "Dataset") -> MetricReport:
    return report(EvalBundle.from_probs(predict_proba(model, data.features),
                                        data.labels, data.protected))


CounterfactualGroups = Literal["flipped", "original"]


def abs_difference(a: MetricReport, b: MetricReport) -> MetricReport:
    values = {}
    undefined = {}
    for name in METRIC_NAMES:
        x, y = getattr(a, name), getattr(b, name)
        if x is None or y is None:
            values[name] = None
            undefined[name] = a.undefined.get(name) or b.undefined.get(name) or "undefined"
        else:
            values[name] = abs(x - y)
    return MetricReport(**values, undefined=undefined)


def counterfactual_report(
    model: "Network",
    test: "Dataset",
    groups: CounterfactualGroups = "flipped",
) -> tuple[MetricReport, MetricReport, MetricReport]:
    """Evaluate on ``test`` and on ``test`` with the protected column flipped.

    ``groups`` chooses how the counterfactual rows are partitioned:
    ``"flipped"`` uses the flipped attribute, ``"original"`` keeps each
    individual in their original group so only the predictions change.
    Returns ``(regular, counterfactual, abs_diff)``.
    """
    if groups not in ("flipped", "original"):
        raise ValueError(f"groups must be 'flipped' or 'original', got {groups!r}")
    regular = evaluate(model, test)
    flipped = flip_protected(test.features, test.protected_col)
    cf_group = 1.0 - test.protected if groups == "flipped" else test.protected
    cf = report(EvalBundle.from_probs(predict_proba(model, flipped), test.labels, cf_group))
    return regular, cf, abs_difference(regular, cf)


def mean_abs_difference(abs_diff: MetricReport) -> float:
    """Arithmetic mean of the six absolute differences."""
    vals = abs_diff.values()
    missing = [k for k, v in vals.items() if v is None]
    if missing:
        raise UndefinedMetricError("mean_abs_difference", f"undefined: {', '.join(missing)}")
    return sum(vals.values()) / len(vals)
