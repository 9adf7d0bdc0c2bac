"""Accuracy, variance, invariance and covariance loss terms.

Every loss returns its value together with the gradient with respect to its
differentiable inputs, so the trainer can feed them straight into
:func:`fairvic.nn.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fairvic.errors import InvalidArgumentError, ShapeError

BCE_CLIP = 1e-7
WEIGHT_SUM_TOL = 1e-6


@dataclass(frozen=True)
class LambdaWeights:
    acc: float
    var: float
    inv: float
    cov: float

    def __post_init__(self):
        values = self.as_tuple()
        if any(not np.isfinite(v) or v < 0 for v in values):
            raise InvalidArgumentError(f"lambda weights must be finite and nonnegative: {values}")
        if abs(sum(values) - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidArgumentError(f"lambda weights must sum to 1, got {sum(values)!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.acc, self.var, self.inv, self.cov)

    @classmethod
    def parse(cls, text: str) -> "LambdaWeights":
        """Parse ``"a,v,i,c"``."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 4:
            raise InvalidArgumentError(f"expected four comma-separated weights, got {text!r}")
        return cls(*(float(p) for p in parts))

    @classmethod
    def equal_split(cls, acc: float) -> "LambdaWeights":
        """``acc`` for accuracy, the remainder shared equally by the three fairness terms."""
        if not 0.0 < acc < 1.0:
            raise InvalidArgumentError(f"accuracy weight must lie in (0, 1), got {acc}")
        rest = (1.0 - acc) / 3.0
        return cls(acc, rest, rest, rest)


BASELINE_WEIGHTS = LambdaWeights(1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class VarianceConfig:
    gamma: float = 1.0
    epsilon: float = 1e-4

    def __post_init__(self):
        if not self.gamma > 0:
            raise InvalidArgumentError(f"gamma must be positive, got {self.gamma}")
        if self.epsilon < 0:
            raise InvalidArgumentError(f"epsilon must be nonnegative, got {self.epsilon}")


@dataclass(frozen=True)
class LossBreakdown:
    l_acc: float
    l_var: float
    l_inv: float
    l_cov: float
    l_reg: float
    l_total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "l_acc": self.l_acc, "l_var": self.l_var, "l_inv": self.l_inv,
            "l_cov": self.l_cov, "l_reg": self.l_reg, "l_total": self.l_total,
        }


def _same_length(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def bce_loss(preds, labels) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on clipped probabilities.

    The gradient is zero wherever clipping is active, matching the derivative
    of the clipped expression.
    """
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _same_length(p, y, "bce_loss")
    n = p.size
    pc = np.clip(p, BCE_CLIP, 1.0 - BCE_CLIP)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    grad = -(y / pc - (1.0 - y) / (1.0 - pc)) / n
    grad[(p < BCE_CLIP) | (p > 1.0 - BCE_CLIP)] = 0.0
    return float(loss), grad


def variance_loss(embeddings, cfg: VarianceConfig = VarianceConfig()) -> tuple[float, np.ndarray]:
    """Mean over embedding dimensions of ``max(0, gamma - std_j)``.

    ``std_j = sqrt(popvar_j + epsilon)`` is taken across the batch.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"embeddings must be 2-D, got shape {z.shape}")
    n, d = z.shape
    if n < 2:
        raise InvalidArgumentError("variance_loss needs at least two samples")
    centered = z - z.mean(axis=0)
    std = np.sqrt((centered * centered).mean(axis=0) + cfg.epsilon)
    hinge = cfg.gamma - std
    loss = np.maximum(hinge, 0.0).mean()
    active = (hinge > 0) & (std > 0)
    coef = np.zeros(d)
    coef[active] = -1.0 / (d * n * std[active])
    return float(loss), centered * coef


def invariance_loss(preds, preds_flipped) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared gap between original and protected-flipped predictions."""
    a = np.asarray(preds, dtype=np.float64)
    b = np.asarray(preds_flipped, dtype=np.float64)
    _same_length(a, b, "invariance_loss")
    diff = a - b
    grad = 2.0 * diff / a.size
    return float(np.mean(diff * diff)), grad, -grad


COVARIANCE_FORMS = ("sample", "batch")


def covariance_loss(preds, protected, form: str = "sample") -> tuple[float, np.ndarray]:
    """Magnitude of the prediction / protected-attribute covariance.

    ``form="sample"``: ``sqrt(sum(((y - mean y) * P)^2)) / N``.
    ``form="batch"``: ``|sum((y - mean y) * P)| / N``.
    Both take subgradient 0 at their kink.
    """
    if form not in COVARIANCE_FORMS:
        raise InvalidArgumentError(f"covariance form must be one of {COVARIANCE_FORMS}, got {form!r}")
    y = np.asarray(preds, dtype=np.float64)
    p = np.asarray(protected, dtype=np.float64)
    _same_length(y, p, "covariance_loss")
    n = y.size
    if n < 1:
        raise InvalidArgumentError("covariance_loss needs at least one sample")
    terms = (y - y.mean()) * p
    if form == "batch":
        s = float(terms.sum())
        if s == 0.0:
            return 0.0, np.zeros(n)
        g_centered = np.sign(s) * p / n
        return abs(s) / n, g_centered - g_centered.mean()
    root = np.sqrt(float(np.dot(terms, terms)))
    if root == 0.0:
        return 0.0, np.zeros(n)
    g_centered = terms * p / (n * root)
    return float(root / n), g_centered - g_centered.mean()


def total_loss(
    l_acc: float,
    l_var: float,
    l_inv: float,
    l_cov: float,
    weights: LambdaWeights,
    l_reg: float = 0.0,
) -> LossBreakdown:
    parts = (l_acc, l_var, l_inv, l_cov, l_reg)
    if not all(np.isfinite(parts)):
        raise InvalidArgumentError(f"loss parts must be finite: {parts}")
    total = (weights.acc * l_acc + weights.var * l_var + weights.inv * l_inv
             + weights.cov * l_cov + l_reg)
    return LossBreakdown(float(l_acc), float(l_var), float(l_inv), float(l_cov),
                         float(l_reg), float(total))


def flip_protected(batch, protected_col: int) -> np.ndarray:
    """Copy of ``batch`` with the binary protected column replaced by its complement."""
    x = np.array(batch, dtype=np.float64, copy=True)
    col = x[:, protected_col]
    if not np.all((col == 0.0) | (col == 1.0)):
        bad = np.unique(col[(col != 0.0) & (col != 1.0)])[:5]
        raise InvalidArgumentError(
            f"protected column {protected_col} must hold only 0/1, found {bad.tolist()}"
        )
    x[:, protected_col] = 1.0 - col
    return x
