"""Softmax focal loss with per-class weights and analytic logit gradients."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import DomainError, ShapeMismatchError

_P_FLOOR = 1e-12


@dataclasses.dataclass
class FocalLossConfig:
    """gamma >= 0 is the focusing strength; class_weights default to uniform."""

    gamma: float = 2.0
    class_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise DomainError(f"gamma must be non-negative, got {self.gamma}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if w.ndim != 1 or not np.isfinite(w).all() or (w < 0).any():
                raise DomainError("class_weights must be finite non-negative reals")
            self.class_weights = w

    def weight_for(self, target: int) -> float:
        if self.class_weights is None:
            return 1.0
        return float(self.class_weights[target])


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def focal_loss(probs, target: int, cfg: FocalLossConfig) -> tuple[float, np.ndarray]:
    """Focal loss of one sample and its gradient with respect to the logits.

    ``probs`` must come from a softmax (sum to 1 within 1e-8). The loss is
    ``-w_c * (1 - p_t)^gamma * log(p_t)`` with ``p_t`` clamped to at least
    1e-12; at ``gamma = 0`` this is exactly weighted cross-entropy. The
    gradient is taken through the softmax, so it is a vector over logits.
    """
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1:
        raise ShapeMismatchError("probs must be a 1-D probability vector")
    if not np.isfinite(p).all():
        raise DomainError("probs contain NaN or Inf")
    if abs(p.sum() - 1.0) > 1e-8:
        raise DomainError(f"probs must sum to 1 within 1e-8, got sum {p.sum()!r}")
    n_classes = p.shape[0]
    if not 0 <= target < n_classes:
        raise DomainError(f"target {target} out of range for {n_classes} classes")
    if cfg.class_weights is not None and cfg.class_weights.shape[0] != n_classes:
        raise ShapeMismatchError(
            f"{cfg.class_weights.shape[0]} class weights for {n_classes} classes")

    w = cfg.weight_for(target)
    p_t = min(max(float(p[target]), _P_FLOOR), 1.0)
    rest = 1.0 - p_t
    log_pt = math.log(p_t)
    loss = -w * rest ** cfg.gamma * log_pt

    if rest == 0.0:
        return loss, np.zeros(n_classes)
    # dL/dp_t, then through softmax: dL/dz_j = dL/dp_t * p_t * (delta_tj - p_j)
    dl_dpt = -w * (rest ** cfg.gamma / p_t
                   - cfg.gamma * rest ** (cfg.gamma - 1.0) * log_pt)
    onehot = np.zeros(n_classes)
    onehot[target] = 1.0
    grad = dl_dpt * p_t * (onehot - p)
    return loss, grad


def focal_loss_batch(logits, targets, cfg: FocalLossConfig) -> tuple[float, np.ndarray]:
    """Mean focal loss over a batch of logits and the matching logit gradients."""
    z = np.asarray(logits, dtype=float)
    t = np.asarray(targets, dtype=int)
    if z.ndim != 2 or t.ndim != 1 or z.shape[0] != t.shape[0]:
        raise ShapeMismatchError(
            f"expected (n, c) logits with (n,) targets, got {z.shape} and {t.shape}")
    n, c = z.shape
    if ((t < 0) | (t >= c)).any():
        raise DomainError("targets out of range")

    p = softmax(z)
    rows = np.arange(n)
    p_t = np.clip(p[rows, t], _P_FLOOR, 1.0)
    rest = 1.0 - p_t
    log_pt = np.log(p_t)
    if cfg.class_weights is None:
        w = np.ones(n)
    else:
        if cfg.class_weights.shape[0] != c:
            raise ShapeMismatchError(
                f"{cfg.class_weights.shape[0]} class weights for {c} classes")
        w = cfg.class_weights[t]
    losses = -w * rest ** cfg.gamma * log_pt
    loss = float(losses.mean())

    live = rest > 0.0
    dl_dpt = np.zeros(n)
    dl_dpt[live] = -w[live] * (rest[live] ** cfg.gamma / p_t[live]
                               - cfg.gamma * rest[live] ** (cfg.gamma - 1.0) * log_pt[live])
    onehot = np.zeros_like(p)
    onehot[rows, t] = 1.0
    grad = (dl_dpt * p_t)[:, None] * (onehot - p) / n
    return loss, grad
