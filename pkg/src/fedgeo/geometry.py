"""Per-class embedding statistics, server-side covariance pooling, and the
geometry-guided embedding augmentation.

Clients summarize teacher-encoder embeddings per class as (covariance, mean,
count).  The server pools those into a global per-class covariance (law of
total covariance), eigendecomposes it into a geometric shape, and samples one
scalar to synthesize a per-class global vector that clients add to their live
embeddings.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Sample
from .eig import EigenPairs
from .errors import ContractError, ParseError
from .models import classifier_forward, encoder_forward
from .objective import softmax_cross_entropy
from .tensor import Tensor, add

__all__ = [
    "ClassStats",
    "GeometricShape",
    "local_class_stats",
    "pool_global_cov",
    "global_vector_from",
    "make_global_vector",
    "augment_embedding",
    "ce_loss_augmented",
    "class_stats_to_bytes",
    "class_stats_from_bytes",
]


@dataclass(frozen=True)
class ClassStats:
    """Per-class embedding statistics on one client: count, mean, covariance."""

    class_id: int
    count: int
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if self.count < 1:
            raise ContractError(f"class {self.class_id}: count must be >= 1, got {self.count}")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ContractError(
                f"class {self.class_id}: covariance shape {cov.shape} does not match dim {d}")
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-9:
            raise ContractError(f"class {self.class_id}: covariance not symmetric within 1e-9")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class GeometricShape:
    """Eigen-decomposed global covariance of one class plus its sampled global vector."""

    class_id: int
    eigen: EigenPairs
    omega: np.ndarray
    alpha_used: float

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "omega", omega)
        expected = global_vector_from(self.eigen, self.alpha_used)
        if np.abs(omega - expected).max(initial=0.0) > 1e-10:
            raise ContractError(
                f"class {self.class_id}: omega is not alpha * sum(eigenvalue * eigenvector)")


def local_class_stats(te_params, samples: Sequence[Sample]) -> ClassStats:
    """Population mean/covariance of teacher embeddings for one class's samples.

    A singleton class yields a zero covariance with the embedding as mean.
    """
    if not samples:
        raise ContractError("local_class_stats requires at least one sample")
    labels = {s.label for s in samples}
    if len(labels) != 1:
        raise ContractError(f"samples span multiple classes: {sorted(labels)}")
    (class_id,) = labels

    x = Tensor(np.stack([s.features.data for s in samples]))
    emb = encoder_forward(te_params, x).data
    n = emb.shape[0]
    mean = emb.sum(axis=0) / n
    centered = emb - mean
    cov = (centered.T @ centered) / n
    cov = (cov + cov.T) / 2.0
    return ClassStats(class_id=class_id, count=n, mean=mean, cov=cov)


def pool_global_cov(stats: Sequence[ClassStats]) -> tuple[np.ndarray, np.ndarray, int]:
    """Pool one class's per-client statistics into the global (cov, mean, count).

    cov = (1/M) [ sum_n count_n * cov_n
                  + sum_n count_n * (mean_n - mean)(mean_n - mean)^T ]
    with M the total count — the law of total covariance, so the result equals
    the covariance of the concatenated raw embeddings.
    """
    if not stats:
        raise ContractError("pool_global_cov requires at least one ClassStats")
    dim = stats[0].dim
    class_id = stats[0].class_id
    for st in stats:
        if st.dim != dim:
            raise ContractError(f"dimension mismatch: {st.dim} vs {dim}")
        if st.class_id != class_id:
            raise ContractError(
                f"pooling mixes classes {st.class_id} and {class_id}")

    total = sum(st.count for st in stats)
    mean = np.zeros(dim)
    for st in stats:
        mean += st.count * st.mean
    mean /= total

    cov = np.zeros((dim, dim))
    for st in stats:
        cov += st.count * st.cov
        delta = st.mean - mean
        cov += st.count * np.outer(delta, delta)
    cov /= total
    cov = (cov + cov.T) / 2.0
    return cov, mean, total


def global_vector_from(eigen: EigenPairs, alpha: float) -> np.ndarray:
    """alpha * sum_g eigenvalue_g * eigenvector_g."""
    if eigen.dim == 0:
        raise ContractError("eigenpairs are empty")
    return alpha * (eigen.eigenvectors @ eigen.eigenvalues)


def make_global_vector(eigen: EigenPairs, seed: int) -> tuple[np.ndarray, float]:
    """Draw alpha ~ N(0, 1) from ``seed`` and scale the summed eigen directions by it."""
    rng = np.random.default_rng(seed)
    alpha = float(rng.standard_normal())
    return global_vector_from(eigen, alpha), alpha


def augment_embedding(emb: Tensor, omega) -> Tensor:
    """Add the class's global vector to each embedding row; omega is a constant."""
    omega_arr = omega.data if isinstance(omega, Tensor) else np.asarray(omega, dtype=np.float64)
    width = emb.shape[-1]
    if omega_arr.ndim != 1 or omega_arr.shape[0] != width:
        raise ContractError(
            f"global vector dim {omega_arr.shape} does not match embedding width {width}")
    return add(emb, Tensor(omega_arr))


def ce_loss_augmented(classifier_params, augmented: Tensor, labels) -> Tensor:
    """Mean cross-entropy of the classifier on globally-augmented embeddings."""
    return softmax_cross_entropy(classifier_forward(classifier_params, augmented), labels)


# ---------------------------------------------------------------------------
# wire format: class_id, count, mean, upper triangle of cov (little-endian f64)
# ---------------------------------------------------------------------------

def class_stats_to_bytes(stats: ClassStats) -> bytes:
    d = stats.dim
    iu = np.triu_indices(d)
    head = struct.pack("<iqI", stats.class_id, stats.count, d)
    return head + stats.mean.astype("<f8").tobytes() + stats.cov[iu].astype("<f8").tobytes()


def class_stats_from_bytes(blob: bytes) -> ClassStats:
    if len(blob) < 16:
        raise ParseError("class stats blob too short")
    class_id, count, d = struct.unpack_from("<iqI", blob, 0)
    off = 16
    n_tri = d * (d + 1) // 2
    expected = off + 8 * (d + n_tri)
    if len(blob) != expected:
        raise ParseError(f"class stats blob has {len(blob)} bytes, expected {expected}")
    mean = np.frombuffer(blob, dtype="<f8", count=d, offset=off).copy()
    tri = np.frombuffer(blob, dtype="<f8", count=n_tri, offset=off + 8 * d)
    cov = np.zeros((d, d))
    iu = np.triu_indices(d)
    cov[iu] = tri
    cov = cov + np.triu(cov, 1).T
    return ClassStats(class_id=class_id, count=count, mean=mean, cov=cov)
