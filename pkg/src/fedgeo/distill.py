"""Teacher-encoder pretraining from augmented student encoders, plus the
teacher/student soft-label loss used during federated rounds.

Stage 1 trains several student encoders (each on a fixed augmented view of the
unlabeled local data) to match a teacher that is re-combined from the students
once per epoch by a weighted linear combination.  Stage 2's ``kd_loss``
compares teacher and student logits under temperature scaling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Augmentation, Sample, augment
from .errors import ContractError, ShapeError
from .models import (EncoderConfig, ModelParams, classifier_forward,
                     encoder_forward, init_params, require_same_layout, sgd_step)
from .seeds import derive_seed
from .tensor import (GradTape, Tensor, add, backward, log, mean_all, mul, relu,
                     reshape, softmax_with_temperature, sub, sum_all, sum_rows)

__all__ = [
    "PretrainConfig",
    "PretrainResult",
    "combine_students",
    "pretrain_ce_loss",
    "kd_loss",
    "pretrain_teacher",
]

_LOG_FLOOR = 1e-12

_DEFAULT_AUG_CYCLE = ("rotation", "gaussian_noise", "flip", "salt_pepper")


def default_augmentations(n_students: int) -> list[Augmentation]:
    """One augmentation kind per student encoder, cycled in fixed order."""
    return [Augmentation(_DEFAULT_AUG_CYCLE[k % len(_DEFAULT_AUG_CYCLE)])
            for k in range(n_students)]


@dataclass(frozen=True)
class PretrainConfig:
    """Settings for the teacher-encoder pretraining stage.

    ``lam`` defaults to uniform 1/K weights and must sum to 1 within 1e-12.
    The teacher softmax is sharpened harder than the students
    (temperatures 0.05 / 0.1) as a collapse safeguard.
    """

    encoder: EncoderConfig
    n_students: int = 4
    lam: tuple[float, ...] | None = None
    epochs: int = 40
    teacher_temperature: float = 0.05
    student_temperature: float = 0.1
    augmentations: tuple[Augmentation, ...] | None = None
    head_dim: int = 32
    learning_rate: float = 0.001
    batch_size: int = 32

    def __post_init__(self):
        if self.n_students < 2:
            raise ContractError(f"need at least 2 student encoders, got {self.n_students}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.teacher_temperature <= 0 or self.student_temperature <= 0:
            raise ContractError("temperatures must be positive")
        lam = self.lam
        if lam is None:
            lam = tuple(1.0 / self.n_students for _ in range(self.n_students))
            object.__setattr__(self, "lam", lam)
        else:
            lam = tuple(float(v) for v in lam)
            object.__setattr__(self, "lam", lam)
        if len(lam) != self.n_students:
            raise ContractError(f"lam has {len(lam)} weights for {self.n_students} students")
        if any(v < 0 for v in lam):
            raise ContractError("lam weights must be non-negative")
        if abs(sum(lam) - 1.0) > 1e-12:
            raise ContractError(f"lam weights must sum to 1, got {sum(lam)!r}")
        augs = self.augmentations
        if augs is None:
            augs = tuple(default_augmentations(self.n_students))
            object.__setattr__(self, "augmentations", augs)
        elif len(augs) != self.n_students:
            raise ContractError(
                f"augmentation assignment has {len(augs)} entries for {self.n_students} students")


@dataclass(frozen=True)
class PretrainResult:
    teacher: ModelParams
    students: tuple[ModelParams, ...] = field(default_factory=tuple)
    # (epoch, student index, mean batch loss) rows, CSV-ready.
    loss_curve: tuple[tuple[int, int, float], ...] = field(default_factory=tuple)


def combine_students(students: Sequence[ModelParams], lam: Sequence[float]) -> ModelParams:
    """Weighted linear combination of identically laid out student models."""
    if not students:
        raise ContractError("need at least one student model")
    if len(lam) != len(students):
        raise ContractError(f"{len(lam)} weights for {len(students)} students")
    first = students[0]
    for other in students[1:]:
        require_same_layout(first, other, "combine_students")
    out = {}
    for name in first.names():
        acc = np.zeros(first[name].shape, dtype=np.float64)
        for w, s in zip(lam, students):
            acc += float(w) * s[name].data
        out[name] = Tensor(acc)
    return ModelParams(out)


def _as_matrix(t: Tensor, who: str) -> Tensor:
    if t.data.ndim == 1:
        return reshape(t, (1, t.size))
    if t.data.ndim != 2:
        raise ContractError(f"{who} expects a 1-D or 2-D tensor, got shape {t.shape}")
    return t


def pretrain_ce_loss(p_te: Tensor, p_se: Tensor) -> Tensor:
    """Cross-entropy between teacher probabilities (on the original view) and
    student probabilities (on the augmented view), averaged over the batch.

    loss = mean_batch( -sum_j p_te[j] * log(p_se[j] + 1e-12) )
    The teacher side must already be detached from any tape.
    """
    p_te = _as_matrix(p_te, "pretrain_ce_loss")
    p_se = _as_matrix(p_se, "pretrain_ce_loss")
    if p_te.shape != p_se.shape:
        raise ShapeError("pretrain_ce_loss", p_te.shape, p_se.shape)
    if p_te.tracked:
        raise ContractError("teacher probabilities must be gradient-detached")
    for side, p in (("teacher", p_te), ("student", p_se)):
        if (p.data < 0).any():
            raise ContractError(f"{side} probabilities contain negative values")
        if np.abs(p.data.sum(axis=1) - 1.0).max() > 1e-9:
            raise ContractError(f"{side} rows must sum to 1 within 1e-9")
    batch = p_te.shape[0]
    total = sum_all(mul(p_te, log(add(p_se, _LOG_FLOOR))))
    return mul(total, -1.0 / batch)


def kd_loss(tn_logits: Tensor, sn_logits: Tensor, tau: float) -> Tensor:
    """Temperature-scaled distillation loss between teacher and student logits.

    tau^2 * mean_batch KL( softmax(tn/tau) || softmax(sn/tau) ), with a 1e-12
    floor inside both logs.  Per-row KL is clamped at 0 so floating-point
    roundoff near equality can never produce a negative loss.
    """
    if tn_logits.shape != sn_logits.shape:
        raise ShapeError("kd_loss", tn_logits.shape, sn_logits.shape)
    if tn_logits.tracked:
        raise ContractError("teacher logits must be gradient-detached")
    tn = _as_matrix(tn_logits, "kd_loss")
    sn = _as_matrix(sn_logits, "kd_loss")

    p = softmax_with_temperature(tn, tau)  # constant: teacher is untracked
    q = softmax_with_temperature(sn, tau)
    log_p = Tensor(np.log(p.data + _LOG_FLOOR))
    kl_rows = sum_rows(mul(p, sub(log_p, log(add(q, _LOG_FLOOR)))))
    return mul(mean_all(relu(kl_rows)), tau * tau)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain_teacher(data: Sequence[Sample], cfg: PretrainConfig, seed: int,
                     initial_students: Sequence[ModelParams] | None = None) -> PretrainResult:
    """Distill a teacher encoder from ``cfg.n_students`` student encoders.

    Per epoch the teacher is re-combined from the current students, then each
    student trains one epoch to match the (frozen) teacher's probabilities on
    the original data while seeing its own fixed augmented view.  Labels are
    never used.  Returns the final combined teacher, the final students, and
    the loss curve.  ``initial_students`` overrides the seeded initialization.
    """
    if not data:
        raise ContractError("pretraining requires a non-empty dataset")

    if initial_students is not None:
        if len(initial_students) != cfg.n_students:
            raise ContractError(
                f"{len(initial_students)} initial students for {cfg.n_students} slots")
        ses = [ModelParams(dict(s.tensors)) for s in initial_students]
    else:
        # Full student model = encoder + pretraining head, one layout for all.
        full = [init_params(cfg.encoder, cfg.head_dim, derive_seed(seed, "pretrain-init", k))
                for k in range(cfg.n_students)]
        ses = [ModelParams({**p.subset("encoder.").tensors,
                            **p.subset("classifier.").tensors}) for p in full]

    x_orig = np.stack([s.features.data for s in data])
    views = []
    if cfg.epochs > 0:
        for k, aug in enumerate(cfg.augmentations):
            view = [augment(s, aug, derive_seed(seed, "pretrain-augment", k, i))
                    for i, s in enumerate(data)]
            views.append(np.stack([v.features.data for v in view]))

    curve: list[tuple[int, int, float]] = []
    for epoch in range(cfg.epochs):
        teacher = combine_students(ses, cfg.lam)
        rng = np.random.default_rng(derive_seed(seed, "pretrain-order", epoch))
        batches = _epoch_batches(len(data), cfg.batch_size, rng)
        for k in range(cfg.n_students):
            losses = []
            for idx in batches:
                xt = Tensor(x_orig[idx])
                te_logits = classifier_forward(teacher, encoder_forward(teacher, xt))
                p_te = softmax_with_temperature(te_logits, cfg.teacher_temperature)

                tape = GradTape()
                tracked = ses[k].track(tape)
                xa = Tensor(views[k][idx])
                se_logits = classifier_forward(tracked, encoder_forward(tracked, xa))
                p_se = softmax_with_temperature(se_logits, cfg.student_temperature)
                loss = pretrain_ce_loss(p_te, p_se)
                losses.append(loss.item())
                grads = backward(tape, loss)
                ses[k] = sgd_step(ses[k], grads, cfg.learning_rate)
            curve.append((epoch, k, float(np.mean(losses))))

    return PretrainResult(teacher=combine_students(ses, cfg.lam),
                          students=tuple(ses), loss_curve=tuple(curve))
