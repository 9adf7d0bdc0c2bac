"""Mini-batch training with the combined fairness loss and Adam."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from fairvic.data import Dataset
from fairvic.errors import InvalidArgumentError, ShapeError
from fairvic.losses import (
    BASELINE_WEIGHTS,
    COVARIANCE_FORMS,
    LambdaWeights,
    LossBreakdown,
    VarianceConfig,
    bce_loss,
    covariance_loss,
    flip_protected,
    invariance_loss,
    total_loss,
    variance_loss,
)
from fairvic.nn import GradientSet, Mode, Network, backward, forward, regularization_penalty

log = logging.getLogger(__name__)

# stream tags so shuffling and dropout never share random draws
_SHUFFLE_TAG = 0x5348
_DROPOUT_TAG = 0x4450


REGULARIZATION_WEIGHTINGS = ("baseline_only", "accuracy", "unit")
COMPUTE_DTYPES = ("float32", "float64")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 5e-3
    seed: int = 0
    lambdas: LambdaWeights = BASELINE_WEIGHTS
    variance_cfg: VarianceConfig = VarianceConfig()
    covariance_form: str = "batch"
    # "baseline_only": the weight penalty applies only to pure cross-entropy
    # training; "accuracy": scaled by lambdas.acc; "unit": always added as is
    regularization_weighting: str = "baseline_only"
    compute_dtype: str = "float32"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise InvalidArgumentError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise InvalidArgumentError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.covariance_form not in COVARIANCE_FORMS:
            raise InvalidArgumentError(f"unknown covariance form {self.covariance_form!r}")
        if self.regularization_weighting not in REGULARIZATION_WEIGHTINGS:
            raise InvalidArgumentError(
                f"unknown regularization weighting {self.regularization_weighting!r}"
            )

        if self.compute_dtype not in COMPUTE_DTYPES:
            raise InvalidArgumentError(f"compute_dtype must be one of {COMPUTE_DTYPES}")

    @property
    def reg_scale(self) -> float:
        if self.regularization_weighting == "accuracy":
            return self.lambdas.acc
        if self.regularization_weighting == "baseline_only":
            return 1.0 if self.lambdas == BASELINE_WEIGHTS else 0.0
        return 1.0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_network(cls, net: Network) -> "AdamState":
        return cls(np.zeros_like(net.params), np.zeros_like(net.params))


@dataclass
class TrainHistory:
    epochs: list[LossBreakdown] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.epochs])


def adam_step(net: Network, grads: GradientSet, state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, applied in place to ``net`` and ``state``."""
    if grads.flat.shape != net.params.shape or state.m.shape != net.params.shape:
        raise ShapeError("gradient / optimizer state shapes do not match the network")
    g = grads.flat
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    net.params -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)


def batch_iterator(data: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Yield row-index batches of one seeded epoch permutation.

    A trailing batch of a single row is dropped; anything larger is kept.
    """
    n = data.n_rows
    if batch_size > n:
        raise InvalidArgumentError(f"batch_size {batch_size} exceeds dataset size {n}")
    perm = np.random.default_rng([seed, epoch, _SHUFFLE_TAG]).permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def train_step(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    p: np.ndarray,
    protected_col: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[GradientSet, LossBreakdown]:
    """Loss and summed gradient for one batch (both forward branches)."""
    lam = cfg.lambdas
    preds, z, cache = forward(net, x, Mode.TRAIN, rng, dtype=cfg.compute_dtype)
    l_acc, g_acc = bce_loss(preds, y)
    l_var, g_z = variance_loss(z, cfg.variance_cfg)
    l_cov, g_cov = covariance_loss(preds, p, cfg.covariance_form)
    # the counterfactual branch shares the dropout masks so the two predictions
    # differ only through the flipped attribute
    preds_f, _, cache_f = forward(net, flip_protected(x, protected_col), Mode.TRAIN,
                                  masks=cache.masks, dtype=cfg.compute_dtype)
    l_inv, g_a, g_b = invariance_loss(preds, preds_f)
    caches = [cache]
    out_grads = [lam.acc * g_acc + lam.cov * g_cov + lam.inv * g_a]
    # with a zero weight the flipped branch carries no gradient; skip its backward
    if lam.inv > 0.0:
        caches.append(cache_f)
        out_grads.append(lam.inv * g_b)
    emb_grad = lam.var * g_z if lam.var > 0.0 else None
    grads = backward(net, caches, out_grads, emb_grad, reg_scale=cfg.reg_scale)
    parts = total_loss(l_acc, l_var, l_inv, l_cov, lam, cfg.reg_scale * regularization_penalty(net))
    return grads, parts


def train(net: Network, data: Dataset, cfg: TrainConfig) -> tuple[Network, TrainHistory]:
    """Train a copy of ``net`` on ``data``; the input network is left untouched."""
    if data.n_features != net.n_inputs:
        raise InvalidArgumentError(
            f"dataset has {data.n_features} features, network expects {net.n_inputs}"
        )
    if cfg.batch_size > data.n_rows:
        raise InvalidArgumentError(
            f"batch_size {cfg.batch_size} exceeds dataset size {data.n_rows}"
        )
    net = net.copy()
    state = AdamState.for_network(net)
    dropout_rng = np.random.default_rng([cfg.seed, _DROPOUT_TAG])
    history = TrainHistory()
    x_all, y_all, p_all = data.features, data.labels, data.protected
    for epoch in range(cfg.epochs):
        sums = np.zeros(6)
        n_batches = 0
        for idx in batch_iterator(data, cfg.batch_size, cfg.seed, epoch):
            grads, parts = train_step(net, x_all[idx], y_all[idx], p_all[idx],
                                      data.protected_col, cfg, dropout_rng)
            adam_step(net, grads, state, cfg)
            sums += (parts.l_acc, parts.l_var, parts.l_inv, parts.l_cov, parts.l_reg, parts.l_total)
            n_batches += 1
        mean = sums / n_batches
        # rebuild the total from the averaged parts so the identity holds exactly per epoch
        history.epochs.append(total_loss(*mean[:4], cfg.lambdas, mean[4]))
        if log.isEnabledFor(logging.DEBUG):
            log.debug("epoch %d: %s", epoch, history.epochs[-1])
    return net, history
