"""Online code assignment: the entropy-regularized transport solver, the
per-modality prototype banks, and the feature queue.

Codes are continuous (never discretized) and are treated as constants by the
loss: no gradient flows through the solver. The solver always runs in 64-bit
because exponentials of scores/epsilon are numerically delicate at the
default epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .seeding import DOMAIN_PROTOTYPES, derived_rng
from .tensor import Tensor


@dataclass(frozen=True)
class CodeMatrix:
    """Soft codes for one modality partition.

    ``q`` holds the current-batch columns of the converged transport plan
    (rows: prototypes, columns: samples). ``total_columns`` is the column
    count of the full problem including any queue columns; rescaling by it
    turns each column into a probability distribution over prototypes.
    """

    q: np.ndarray
    total_columns: int

    def probabilities(self) -> np.ndarray:
        """Per-sample code distributions, one row per sample, rows sum to 1."""
        return np.ascontiguousarray((self.q * self.total_columns).T)


def sinkhorn_codes(scores: np.ndarray, epsilon: float, iterations: int) -> CodeMatrix:
    """Solve the equipartitioned assignment for a K x B score matrix.

    Returns the normalized exponential of scores/epsilon after ``iterations``
    alternating row/column renormalizations targeting row marginals 1/K and
    column marginals 1/B. The final step normalizes columns, so each column
    sums to exactly 1/B.
    """
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if iterations < 0:
        raise ConfigError(f"iterations must be nonnegative, got {iterations}")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"scores must be a matrix, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise NumericError("non-finite scores passed to the assignment solver")
    k, b = s.shape
    q = np.exp((s - s.max()) / epsilon)
    total = q.sum()
    if not np.isfinite(total) or total <= 0:
        raise NumericError("assignment exponentials under/overflowed; consider a larger epsilon")
    q /= total
    for _ in range(iterations):
        q /= q.sum(axis=1, keepdims=True) * k
        q /= q.sum(axis=0, keepdims=True) * b
    if not np.isfinite(q).all():
        raise NumericError("assignment normalization diverged; consider a larger epsilon")
    return CodeMatrix(q=q, total_columns=b)


class PrototypeBank:
    """Per-modality trainable prototype matrices; columns are prototypes.

    Columns are kept at unit norm by renormalizing after every optimizer step
    that touched them. While frozen (iteration < freeze_until) the bank takes
    no optimizer step at all, so its bytes are untouched.
    """

    def __init__(self, feature_dim: int, prototypes_per_modality: list[int],
                 seed: int = 0, freeze_until: int = 0, dtype=np.float32):
        if feature_dim < 1 or any(k < 1 for k in prototypes_per_modality):
            raise ConfigError("feature dimension and prototype counts must be positive")
        self.feature_dim = feature_dim
        self.freeze_until = int(freeze_until)
        self.tensors: list[Tensor] = []
        for m, k in enumerate(prototypes_per_modality):
            rng = derived_rng(seed, DOMAIN_PROTOTYPES, m)
            raw = rng.standard_normal((feature_dim, k))
            self.tensors.append(Tensor(raw / np.linalg.norm(raw, axis=0), requires_grad=True, dtype=dtype))

    @property
    def modalities(self) -> int:
        return len(self.tensors)

    def modality(self, m: int) -> Tensor:
        if not 0 <= m < len(self.tensors):
            raise ConfigError(f"no prototype bank for modality {m}")
        return self.tensors[m]

    def params(self) -> dict[str, Tensor]:
        return {f"proto.m{m}": t for m, t in enumerate(self.tensors)}

    def frozen(self, iteration: int) -> bool:
        return iteration < self.freeze_until

    def renormalize(self) -> None:
        renormalize_prototypes(self)


def renormalize_prototypes(bank: PrototypeBank) -> None:
    """Rescale every prototype column to unit Euclidean norm, in place."""
    for m, t in enumerate(bank.tensors):
        norms = np.sqrt((t.data.astype(np.float64) ** 2).sum(axis=0))
        if (norms < 1e-12).any():
            raise NumericError(f"degenerate prototype column in modality {m} bank")
        t.data /= norms.astype(t.data.dtype)


class FeatureQueue:
    """Per-modality FIFO of past feature vectors used to stabilize marginals.

    The queue is inactive (empty and ignored) before its activation epoch;
    queued features extend the solver's columns only and contribute no loss
    terms.
    """

    def __init__(self, capacity: int, feature_dim: int, modalities: int, start_epoch: int):
        if capacity < 0 or start_epoch < 0:
            raise ConfigError("queue capacity and start epoch must be nonnegative")
        self.capacity = int(capacity)
        self.feature_dim = int(feature_dim)
        self.start_epoch = int(start_epoch)
        self._buffers = [np.zeros((0, feature_dim), dtype=np.float32) for _ in range(modalities)]

    @property
    def modalities(self) -> int:
        return len(self._buffers)

    def active(self, epoch: int) -> bool:
        return self.capacity > 0 and epoch >= self.start_epoch

    def size(self, modality: int) -> int:
        return self._buffers[modality].shape[0]

    def features(self, modality: int) -> np.ndarray:
        """Queued rows, oldest first."""
        return self._buffers[modality]

    def push(self, modality: int, features: np.ndarray) -> None:
        feats = np.asarray(features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[1] != self.feature_dim:
            raise ShapeError(f"queue push expects rows of dimension {self.feature_dim}, got shape {feats.shape}")
        if not 0 <= modality < len(self._buffers):
            raise ConfigError(f"no queue partition for modality {modality}")
        buf = np.concatenate([self._buffers[modality], feats], axis=0)
        if buf.shape[0] > self.capacity:
            buf = buf[buf.shape[0] - self.capacity:]
        self._buffers[modality] = np.ascontiguousarray(buf)

    def snapshot(self) -> list[np.ndarray]:
        return [b.copy() for b in self._buffers]

    def restore(self, buffers: list[np.ndarray]) -> None:
        if len(buffers) != len(self._buffers):
            raise ConfigError("queue snapshot has a different modality count")
        for m, b in enumerate(buffers):
            arr = np.asarray(b, dtype=np.float32).reshape(-1, self.feature_dim)
            self._buffers[m] = np.ascontiguousarray(arr[-self.capacity:]) if self.capacity else arr[:0]


def assign_codes_multimodal(features_by_modality: list[np.ndarray], bank: PrototypeBank,
                            queue: FeatureQueue | None, epsilon: float, iterations: int,
                            epoch: int = 0) -> list[CodeMatrix]:
    """Assign codes independently per modality block.

    Each block is a (rows, F) array of unit features for one modality. When
    the queue is active its rows are appended as extra solver columns; codes
    are computed for them too but only current-batch columns are returned.
    """
    if len(features_by_modality) != bank.modalities:
        raise ConfigError(
            f"{len(features_by_modality)} feature blocks but {bank.modalities} prototype banks")
    sizes = {np.asarray(f).shape[0] for f in features_by_modality}
    if len(sizes) > 1:
        raise ConfigError(f"modality blocks must have equal size, got {sorted(sizes)}")
    codes: list[CodeMatrix] = []
    for m, block in enumerate(features_by_modality):
        z = np.asarray(block, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != bank.feature_dim:
            raise ConfigError(f"modality {m} features have shape {z.shape}, expected (*, {bank.feature_dim})")
        n_batch = z.shape[0]
        if queue is not None and queue.active(epoch) and queue.size(m) > 0:
            z = np.concatenate([z, queue.features(m).astype(np.float64)], axis=0)
        scores = bank.modality(m).data.astype(np.float64).T @ z.T  # (K_m, columns)
        full = sinkhorn_codes(scores, epsilon, iterations)
        codes.append(CodeMatrix(q=full.q[:, :n_batch], total_columns=full.total_columns))
    return codes
