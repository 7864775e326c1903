"""Hybrid imbalance-aware loss, class weighting, sampling, and splitting.

The objective mixes class-weighted binary cross-entropy with a focal term:

    per-sample  lam * WBCE + (1 - lam) * Focal,   averaged over the batch,

    WBCE  = -[w1 * y * ln p + w0 * (1 - y) * ln(1 - p)]
    Focal = -[alpha * y * (1 - p)^gamma * ln p
              + (1 - alpha) * (1 - y) * p^gamma * ln(1 - p)]

with p = sigmoid(z). Everything is computed from logits; log-probabilities
go through the softplus identity ln sigmoid(z) = -softplus(-z) so the loss
and its analytic gradient stay finite for |z| up to 1e3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch, MissingClass


@dataclass
class LossConfig:
    """Hybrid-loss hyperparameters.

    ``w1``/``w0`` are the positive/negative class weights; None means
    "derive from class counts" (resolved by resolve_class_weights before
    any loss is evaluated). ``lambda_`` is the WBCE/focal mixing weight.
    """

    w1: float | None = None
    w0: float | None = None
    alpha: float = 0.25
    gamma: float = 2.0
    lambda_: float = 0.5

    def __post_init__(self):
        if self.w1 is not None and self.w1 <= 0:
            raise ValueError("w1 must be positive")
        if self.w0 is not None and self.w0 <= 0:
            raise ValueError("w0 must be positive")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 <= self.lambda_ <= 1:
            raise ValueError("lambda must lie in [0, 1]")

    def resolved(self) -> "LossConfig":
        if self.w1 is None or self.w0 is None:
            raise ValueError(
                "class weights are unresolved; call resolve_class_weights first"
            )
        return self


@dataclass
class ClassCounts:
    n_pos: int
    n_neg: int

    def __post_init__(self):
        if self.n_pos < 0 or self.n_neg < 0 or self.n_pos + self.n_neg < 1:
            raise ValueError("counts must be non-negative with at least one sample")


def sigmoid_stable(z):
    """Overflow-free logistic function; vectorized."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out


def _log_p_and_1mp(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # ln sigmoid(z) = -softplus(-z); ln(1 - sigmoid(z)) = -softplus(z)
    return -np.logaddexp(0.0, -z), -np.logaddexp(0.0, z)


def _as_batch(labels, logits) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if y.shape != z.shape:
        raise ValueError("labels and logits must have matching lengths")
    return y, z


def wbce(labels, logits, cfg: LossConfig) -> np.ndarray:
    """Per-sample class-weighted BCE from logits."""
    cfg = cfg.resolved()
    y, z = _as_batch(labels, logits)
    log_p, log_1mp = _log_p_and_1mp(z)
    return -(cfg.w1 * y * log_p + cfg.w0 * (1.0 - y) * log_1mp)


def focal(labels, logits, cfg: LossConfig) -> np.ndarray:
    """Per-sample focal loss from logits."""
    y, z = _as_batch(labels, logits)
    p = sigmoid_stable(z)
    q = sigmoid_stable(-z)  # 1 - p, computed stably
    log_p, log_1mp = _log_p_and_1mp(z)
    pos = cfg.alpha * (q**cfg.gamma) * log_p
    neg = (1.0 - cfg.alpha) * (p**cfg.gamma) * log_1mp
    return -(y * pos + (1.0 - y) * neg)


def combined_loss(labels, logits, cfg: LossConfig) -> float:
    """Batch mean of lam * WBCE + (1 - lam) * Focal."""
    y, z = _as_batch(labels, logits)
    if y.size == 0:
        raise EmptyBatch("combined_loss of an empty batch")
    per_sample = cfg.lambda_ * wbce(y, z, cfg) + (1.0 - cfg.lambda_) * focal(y, z, cfg)
    return float(np.mean(per_sample))


def combined_grad(labels, logits, cfg: LossConfig) -> np.ndarray:
    """Analytic d(combined_loss)/dz per sample, including the 1/B factor."""
    cfg = cfg.resolved()
    y, z = _as_batch(labels, logits)
    if y.size == 0:
        raise EmptyBatch("combined_grad of an empty batch")
    p = sigmoid_stable(z)
    q = sigmoid_stable(-z)
    log_p, log_1mp = _log_p_and_1mp(z)

    wbce_grad = cfg.w1 * y * (p - 1.0) + cfg.w0 * (1.0 - y) * p

    a, g = cfg.alpha, cfg.gamma
    focal_pos = a * g * (q**g) * p * log_p - a * q ** (g + 1.0)
    focal_neg = -(1.0 - a) * g * (p**g) * q * log_1mp + (1.0 - a) * p ** (g + 1.0)
    focal_grad = y * focal_pos + (1.0 - y) * focal_neg

    grad = cfg.lambda_ * wbce_grad + (1.0 - cfg.lambda_) * focal_grad
    return grad / y.size


def class_weights(counts: ClassCounts) -> tuple[float, float]:
    """(w0, w1) with w_c = (n_pos + n_neg) / (2 * n_c).

    Balanced counts reduce to unit weights.
    """
    if counts.n_pos == 0 or counts.n_neg == 0:
        raise MissingClass("both classes are required to derive weights")
    total = counts.n_pos + counts.n_neg
    return total / (2.0 * counts.n_neg), total / (2.0 * counts.n_pos)


def resolve_class_weights(cfg: LossConfig, counts: ClassCounts) -> LossConfig:
    """Fill in auto (None) class weights from observed counts."""
    if cfg.w1 is not None and cfg.w0 is not None:
        return cfg
    w0, w1 = class_weights(counts)
    return LossConfig(
        w1=cfg.w1 if cfg.w1 is not None else w1,
        w0=cfg.w0 if cfg.w0 is not None else w0,
        alpha=cfg.alpha,
        gamma=cfg.gamma,
        lambda_=cfg.lambda_,
    )


def sampler_draw(
    counts: ClassCounts,
    labels,
    batch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample indices with replacement, probability proportional to 1/n_class.

    The expected class proportion per batch is 1/2 for each class.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    y = np.asarray(labels).reshape(-1)
    if counts.n_pos == 0 or counts.n_neg == 0:
        raise MissingClass("sampler requires both classes")
    per_class = np.array([1.0 / counts.n_neg, 1.0 / counts.n_pos])
    weights = per_class[y.astype(np.intp)]
    probs = weights / weights.sum()
    return rng.choice(y.size, size=batch_size, replace=True, p=probs)


def stratified_split(
    labels,
    val_fraction: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Class-stratified disjoint and exhaustive (train, val) index split.

    Per class, round(val_fraction * n_c) samples go to validation, at least
    one when the class has two or more samples. Deterministic given the
    generator state; returned index arrays are sorted.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    y = np.asarray(labels).reshape(-1)
    train_idx: list[np.ndarray] = []
    val_idx: list[np.ndarray] = []
    for cls in (0, 1):
        members = np.flatnonzero(y == cls)
        if members.size == 0:
            raise MissingClass(f"class {cls} absent from labels")
        n_val = int(round(val_fraction * members.size))
        if members.size >= 2:
            n_val = max(n_val, 1)
        order = rng.permutation(members.size)
        val_idx.append(members[order[:n_val]])
        train_idx.append(members[order[n_val:]])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))
