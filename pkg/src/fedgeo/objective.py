"""Loss components of the local objective and their weighted combination.

The composite local loss is
    beta1 * CE(original) + (1 - beta1) * KD + beta2 * CE(augmented embedding)
    + beta3 * prototype regularizer + beta4 * angular-margin loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError
from .models import classifier_forward
from .tensor import (Tensor, acos, add, clamp, cos, l2_normalize_rows,
                     logsumexp_rows, mean_all, mul, one_hot, reshape, sub,
                     sum_rows)

__all__ = [
    "LossWeights",
    "softmax_cross_entropy",
    "ce_original",
    "arcface_loss",
    "total_loss",
]

_ACOS_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the composite objective plus the shared loss hyperparameters.

    beta1 balances original-data CE against distillation; beta2..beta4 weight
    the embedding-augmentation CE, the prototype regularizer, and the angular
    loss.  ``tau`` is the distillation temperature, ``scale``/``margin`` the
    angular loss rescale and additive margin (radians).
    """

    beta1: float = 0.9
    beta2: float = 0.1
    beta3: float = 0.01
    beta4: float = 0.01
    tau: float = 0.2
    scale: float = 16.0
    margin: float = 0.2

    def __post_init__(self):
        vals = (self.beta1, self.beta2, self.beta3, self.beta4,
                self.tau, self.scale, self.margin)
        if not all(math.isfinite(v) for v in vals):
            raise ContractError("loss weights must be finite")
        if not 0.0 <= self.beta1 <= 1.0:
            raise ContractError(f"beta1 must lie in [0, 1], got {self.beta1}")
        if min(self.beta2, self.beta3, self.beta4) < 0:
            raise ContractError("beta weights must be non-negative")
        if self.tau <= 0:
            raise DomainError(f"temperature must be positive, got {self.tau}")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of row logits against integer labels.

    Computed as mean(logsumexp(row) - row[label]), which is exact for uniform
    logits (gives ln C) and stable for any finite logits.
    """
    if logits.data.ndim != 2:
        raise ContractError(f"expected (batch, classes) logits, got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ContractError(
            f"batch mismatch: {logits.shape[0]} logit rows, {labels.shape[0]} labels")
    onehot = one_hot(labels, logits.shape[1])
    label_logit = sum_rows(mul(logits, onehot))
    return mean_all(sub(logsumexp_rows(logits), label_logit))


def ce_original(classifier_params, embeddings: Tensor, labels) -> Tensor:
    """Plain classification loss of the student network on unaugmented data."""
    return softmax_cross_entropy(classifier_forward(classifier_params, embeddings), labels)


def arcface_loss(projected: Tensor, labels, scale: float, margin: float) -> Tensor:
    """Additive angular-margin loss against one-hot label directions.

    Each projected row z is L2-normalized; since one-hot labels are unit basis
    vectors, cos(theta_c) is simply component c of the normalized row.  The
    label component's angle gets the additive margin:

        L = -(1/B) sum_b log( e^{s cos(theta_y + h)} /
                              (e^{s cos(theta_y + h)} + sum_{c != y} e^{s cos theta_c}) )

    The label cosine is clamped to +/-(1 - 1e-7) before acos so the gradient
    stays finite.  Zero-norm rows are a contract error.
    """
    if projected.data.ndim != 2:
        raise ContractError(f"expected (batch, classes) projections, got shape {projected.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != projected.shape[0]:
        raise ContractError(
            f"batch mismatch: {projected.shape[0]} rows, {labels.shape[0]} labels")
    batch, n_classes = projected.shape

    z = l2_normalize_rows(projected)
    onehot = one_hot(labels, n_classes)
    cos_y = sum_rows(mul(z, onehot))
    theta = acos(clamp(cos_y, -1.0 + _ACOS_EPS, 1.0 - _ACOS_EPS))
    margin_cos = cos(add(theta, margin))

    # Replace the label entry of each row of s*z with s*cos(theta_y + h).
    plain = mul(mul(z, scale), sub(Tensor(np.ones((batch, n_classes))), onehot))
    shifted = mul(reshape(mul(margin_cos, scale), (batch, 1)), onehot)
    logits = add(plain, shifted)
    label_logit = sum_rows(mul(logits, onehot))
    return mean_all(sub(logsumexp_rows(logits), label_logit))


def total_loss(ce_orig: Tensor, kd: Tensor, ce_aug: Tensor, proto_reg: Tensor,
               angular: Tensor, w: LossWeights) -> Tensor:
    """Weighted sum of the five scalar loss components."""
    for name, t in (("ce_orig", ce_orig), ("kd", kd), ("ce_aug", ce_aug),
                    ("proto_reg", proto_reg), ("angular", angular)):
        if t.shape != ():
            raise ContractError(f"{name} must be a scalar, got shape {t.shape}")
    out = mul(ce_orig, w.beta1)
    out = add(out, mul(kd, 1.0 - w.beta1))
    out = add(out, mul(ce_aug, w.beta2))
    out = add(out, mul(proto_reg, w.beta3))
    return add(out, mul(angular, w.beta4))
