"""Symmetric eigendecomposition via cyclic Jacobi rotations.

Built for the small covariance matrices this package produces (dims <= 64).
Eigenvalues come back sorted descending with orthonormal column eigenvectors;
tiny negative eigenvalues of nominally PSD inputs (in [-1e-10, 0)) are floored
to zero before downstream use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor

__all__ = ["EigenPairs", "sym_eig"]

_SYMMETRY_TOL = 1e-9
_OFFDIAG_TOL = 1e-12
_MAX_SWEEPS = 100
_EIGENVALUE_FLOOR = -1e-10


@dataclass(frozen=True)
class EigenPairs:
    """Eigenvalues (descending) with orthonormal eigenvectors as matrix columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=np.float64))
        object.__setattr__(self, "eigenvectors", np.asarray(self.eigenvectors, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def vector(self, g: int) -> np.ndarray:
        return self.eigenvectors[:, g]

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _offdiag_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt((off * off).sum()))


def sym_eig(a: Tensor | np.ndarray, max_sweeps: int = _MAX_SWEEPS) -> EigenPairs:
    """Decompose a square symmetric matrix into :class:`EigenPairs`.

    The input must be symmetric within 1e-9 (it is symmetrized as
    (A + A^T)/2 first).  Sweeps stop when the off-diagonal Frobenius norm
    falls below 1e-12 relative to max(1, ||A||_F); hitting the sweep cap
    before that raises :class:`NumericError` with the iteration count.
    """
    arr = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ContractError(f"sym_eig requires a square matrix, got shape {arr.shape}")
    if np.abs(arr - arr.T).max(initial=0.0) > _SYMMETRY_TOL:
        raise ContractError("sym_eig requires a symmetric matrix (within 1e-9)")

    n = arr.shape[0]
    work = (arr + arr.T) / 2.0
    vecs = np.eye(n)
    scale = max(1.0, float(np.sqrt((work * work).sum())))
    threshold = _OFFDIAG_TOL * scale

    if n == 1:
        vals = work.reshape(1).copy()
    else:
        sweeps = 0
        while _offdiag_norm(work) > threshold:
            if sweeps >= max_sweeps:
                raise NumericError(
                    f"Jacobi sweeps did not reduce off-diagonal norm below {threshold:g}",
                    iterations=sweeps,
                )
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = work[p, q]
                    if apq == 0.0:
                        continue
                    # Rotation angle that zeroes work[p, q] (Rutishauser's
                    # stable formula for tan of the half-angle system).
                    theta = (work[q, q] - work[p, p]) / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(1.0 + theta * theta))
                    c = 1.0 / math.sqrt(1.0 + t * t)
                    s = t * c

                    rp = work[p, :].copy()
                    rq = work[q, :].copy()
                    work[p, :] = c * rp - s * rq
                    work[q, :] = s * rp + c * rq
                    cp = work[:, p].copy()
                    cq = work[:, q].copy()
                    work[:, p] = c * cp - s * cq
                    work[:, q] = s * cp + c * cq
                    work[p, q] = 0.0
                    work[q, p] = 0.0

                    vp = vecs[:, p].copy()
                    vq = vecs[:, q].copy()
                    vecs[:, p] = c * vp - s * vq
                    vecs[:, q] = s * vp + c * vq
            sweeps += 1
        vals = np.diag(work).copy()

    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    # PSD inputs may pick up -eps eigenvalues from roundoff; floor those.
    roundoff = (vals >= _EIGENVALUE_FLOOR) & (vals < 0.0)
    vals[roundoff] = 0.0
    return EigenPairs(eigenvalues=vals, eigenvectors=vecs)
