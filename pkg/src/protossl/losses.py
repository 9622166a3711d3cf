"""Swapped-prediction losses and the hybrid self-supervised/supervised
objective.

Codes (q vectors) enter every loss as constants; gradients flow only through
the prediction side (features and prototypes). Batch losses average over
samples and, per code, over the views predicting it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .tensor import (Tensor, add, log_softmax_rows, matmul, mul, reduce_sum,
                     scale, take_rows, transpose)


@dataclass(frozen=True)
class LossConfig:
    """Weights and temperature of the combined objective."""

    temperature: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta == 0:
            raise ConfigError(f"need alpha, beta >= 0 and alpha + beta > 0, got {self.alpha}, {self.beta}")


def _as_row(z, name: str) -> Tensor:
    t = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    if t.data.ndim == 1:
        t = t.reshape((1, t.data.shape[0]))
    if t.data.ndim != 2 or t.data.shape[0] != 1:
        raise ConfigError(f"{name} must be a single feature row, got shape {t.data.shape}")
    return t


def _check_code(q: np.ndarray, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if abs(q.sum() - 1.0) > 1e-6:
        raise ConfigError(f"{name} must sum to 1 within 1e-6, sums to {q.sum()!r}")
    return q


def log_predictions(z: Tensor, prototypes: Tensor, temperature: float) -> Tensor:
    """Row log-probabilities over prototypes: log softmax of (z C) / temperature."""
    return log_softmax_rows(matmul(z, prototypes), temperature)


def swapped_loss(z1, z2, q1, q2, prototypes: Tensor, temperature: float) -> Tensor:
    """Cross-entropy of each view's prediction against the other view's code."""
    z1, z2 = _as_row(z1, "z1"), _as_row(z2, "z2")
    q1 = _check_code(q1, "q1").astype(z1.dtype)
    q2 = _check_code(q2, "q2").astype(z2.dtype)
    lp1 = log_predictions(z1, prototypes, temperature)
    lp2 = log_predictions(z2, prototypes, temperature)
    term1 = scale(reduce_sum(mul(lp1, Tensor(q2[None, :]))), -1.0)
    term2 = scale(reduce_sum(mul(lp2, Tensor(q1[None, :]))), -1.0)
    return add(term1, term2)


def grouped_swapped_loss(z_assigned: Tensor, z_other: Tensor | None, codes: np.ndarray,
                         prototypes: Tensor, temperature: float, n_items: int) -> Tensor:
    """Batched multi-crop loss over item-major view rows.

    ``z_assigned`` holds the coded views (n_items * A rows, item-major) and
    ``z_other`` the remaining views (n_items * O rows, item-major). Each code
    is averaged over the other V-1 views of its own item, then the result is
    summed per item and averaged over items.
    """
    rows_a = z_assigned.data.shape[0]
    if rows_a == 0 or rows_a % n_items:
        raise ConfigError(f"{rows_a} assigned rows do not split over {n_items} items")
    a_per = rows_a // n_items
    o_per = 0
    if z_other is not None:
        if z_other.data.shape[0] % n_items:
            raise ConfigError(f"{z_other.data.shape[0]} other rows do not split over {n_items} items")
        o_per = z_other.data.shape[0] // n_items
    views_per_item = a_per + o_per
    if views_per_item < 2:
        raise ConfigError("multi-crop loss needs at least two views per item")
    codes = np.asarray(codes)
    if codes.shape[0] != rows_a:
        raise ConfigError(f"{codes.shape[0]} codes for {rows_a} assigned views")

    dtype = z_assigned.dtype
    norm = 1.0 / ((views_per_item - 1) * n_items)
    item_a = np.repeat(np.arange(n_items), a_per)
    w_a = (item_a[:, None] == item_a[None, :]).astype(dtype)
    np.fill_diagonal(w_a, 0.0)
    w_a *= dtype.type(norm)

    lp_a = log_predictions(z_assigned, prototypes, temperature)
    pair_a = scale(matmul(Tensor(codes.astype(dtype)), transpose(lp_a)), -1.0)
    loss = reduce_sum(mul(pair_a, Tensor(w_a)))
    if z_other is not None and o_per:
        item_o = np.repeat(np.arange(n_items), o_per)
        w_o = (item_a[:, None] == item_o[None, :]).astype(dtype) * dtype.type(norm)
        lp_o = log_predictions(z_other, prototypes, temperature)
        pair_o = scale(matmul(Tensor(codes.astype(dtype)), transpose(lp_o)), -1.0)
        loss = add(loss, reduce_sum(mul(pair_o, Tensor(w_o))))
    return loss


def multicrop_swapped_loss(views: Tensor, assigned, codes, prototypes: Tensor,
                           temperature: float) -> Tensor:
    """Multi-crop loss for one item: codes exist exactly for the assigned views."""
    assigned = tuple(assigned)
    if not assigned:
        raise ConfigError("assigned view set is empty")
    n_views = views.data.shape[0]
    if any(not 0 <= i < n_views for i in assigned):
        raise ConfigError(f"assigned indices {assigned} outside view range 0..{n_views - 1}")
    codes = np.atleast_2d(np.asarray(codes))
    if codes.shape[0] != len(assigned):
        raise ConfigError(f"{codes.shape[0]} codes for {len(assigned)} assigned views")
    for row in codes:
        _check_code(row, "code")
    others = [v for v in range(n_views) if v not in assigned]
    z_a = take_rows(views, list(assigned))
    z_o = take_rows(views, others) if others else None
    return grouped_swapped_loss(z_a, z_o, codes, prototypes, temperature, n_items=1)


def supervised_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[Tensor | None, int]:
    """Mean cross-entropy over the labeled rows (label -1 marks unlabeled).

    Returns (loss, labeled_count); loss is None when nothing is labeled.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.data.shape[0]:
        raise ConfigError(f"{labels.shape[0]} labels for {logits.data.shape[0]} logit rows")
    n_classes = logits.data.shape[1]
    if (labels >= n_classes).any():
        bad = int(labels[labels >= n_classes][0])
        raise DataError(f"label {bad} out of range for {n_classes} classes")
    labeled = np.nonzero(labels >= 0)[0]
    if labeled.size == 0:
        return None, 0
    lp = log_softmax_rows(take_rows(logits, labeled))
    onehot = np.zeros((labeled.size, n_classes), dtype=logits.dtype)
    onehot[np.arange(labeled.size), labels[labeled]] = 1.0
    loss = scale(reduce_sum(mul(lp, Tensor(onehot))), -1.0 / labeled.size)
    return loss, int(labeled.size)


@dataclass
class HybridParts:
    total: Tensor
    ss_value: float
    sup_value: float
    labeled_count: int


def hybrid_loss(ss_loss: Tensor, logits: Tensor | None, labels, config: LossConfig) -> HybridParts:
    """Combine alpha * self-supervised loss with beta * supervised term.

    The supervised cross-entropy averages over the labeled rows of the batch
    (not over the whole batch) and vanishes when nothing is labeled or
    beta = 0. Degenerate weights reduce exactly to the surviving term.
    """
    sup = None
    count = 0
    if config.beta > 0 and logits is not None and labels is not None:
        sup, count = supervised_cross_entropy(logits, labels)
    sup_value = 0.0 if sup is None else float(sup.data)
    if config.alpha == 0:
        if sup is None:
            raise ConfigError("alpha=0 hybrid loss needs at least one labeled sample")
        total = scale(sup, config.beta)
    elif sup is None:
        total = scale(ss_loss, config.alpha)
    else:
        total = add(scale(ss_loss, config.alpha), scale(sup, config.beta))
    return HybridParts(total=total, ss_value=float(ss_loss.data), sup_value=sup_value,
                       labeled_count=count)
