"""K-Means multi-prototype generation, the squared-distance regularizer toward
global prototypes, and the server-side count-weighted prototype aggregation.

Clustering always runs on gradient-detached embeddings.  For training, the
regularizer re-expresses each prototype as the differentiable mean of the live
embeddings assigned to its cluster, so gradients pull the encoder outputs
toward the fixed global prototypes without differentiating Lloyd iterations.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import Sample
from .errors import ContractError, ParseError
from .models import encoder_forward
from .tensor import Tensor, add, matmul, mul, reshape, sub, sum_all

__all__ = [
    "PrototypeSet",
    "KMeansResult",
    "kmeans",
    "local_prototypes",
    "live_prototypes",
    "proto_regularizer",
    "aggregate_prototypes",
    "prototype_set_to_bytes",
    "prototype_set_from_bytes",
]

_MAX_LLOYD_ITERS = 100


@dataclass(frozen=True)
class PrototypeSet:
    """Class id -> list of prototype vectors; local sets also carry sample counts."""

    protos: dict[int, list[np.ndarray]]
    counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        cleaned: dict[int, list[np.ndarray]] = {}
        for cid, vecs in self.protos.items():
            vs = [np.asarray(v, dtype=np.float64).reshape(-1) for v in vecs]
            for v in vs:
                if not np.isfinite(v).all():
                    raise ContractError(f"class {cid}: prototype contains non-finite values")
            cleaned[int(cid)] = vs
        object.__setattr__(self, "protos", cleaned)
        object.__setattr__(self, "counts", {int(c): int(n) for c, n in self.counts.items()})

    def classes(self) -> list[int]:
        return sorted(self.protos)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.protos


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray          # (k, dim)
    assignments: np.ndarray        # (n,) cluster index per point
    inertia: float
    n_iterations: int


def _inertia(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    diff = points - centroids[assign]
    with np.errstate(over="ignore"):
        return float((diff * diff).sum())


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    with np.errstate(over="ignore"):
        return (diff * diff).sum(axis=2)


def _plus_plus_seeding(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(points, np.asarray(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a center; any choice works
            centers.append(points[rng.integers(n)])
            continue
        centers.append(points[rng.choice(n, p=d2 / total)])
    return np.asarray(centers)


def kmeans(points, k: int, seed: int) -> KMeansResult:
    """Seeded k-means++ initialization followed by Lloyd iterations.

    Runs until the assignment reaches a fixpoint or 100 iterations.  An empty
    cluster is repaired by stealing the farthest point from the largest
    cluster.  Inertia is asserted non-increasing across iterations.  With
    k >= number of points the points themselves are returned as centroids.
    """
    pts = np.asarray([p.data if isinstance(p, Tensor) else p for p in points], dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ContractError("kmeans requires a non-empty list of equal-length vectors")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    n = pts.shape[0]
    if k >= n:
        return KMeansResult(centroids=pts.copy(), assignments=np.arange(n),
                            inertia=0.0, n_iterations=0)

    rng = np.random.default_rng(seed)
    centers = _plus_plus_seeding(pts, k, rng)
    assign = _sq_dists(pts, centers).argmin(axis=1)
    prev_inertia = _inertia(pts, centers, assign)

    iters = 0
    while iters < _MAX_LLOYD_ITERS:
        iters += 1
        new_centers = centers.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new_centers[j] = pts[members].mean(axis=0)
        # Empty-cluster repair: centroid moves onto the farthest point of the
        # largest cluster, which can only reduce that point's distance.
        for j in range(k):
            if not (assign == j).any():
                sizes = np.bincount(assign, minlength=k)
                big = int(sizes.argmax())
                members = np.flatnonzero(assign == big)
                far = members[_sq_dists(pts[members], new_centers[big:big + 1])[:, 0].argmax()]
                new_centers[j] = pts[far]
                assign[far] = j

        new_assign = _sq_dists(pts, new_centers).argmin(axis=1)
        new_inertia = _inertia(pts, new_centers, new_assign)
        if new_inertia > prev_inertia + 1e-9 * max(1.0, prev_inertia):
            raise AssertionError(
                f"kmeans inertia increased: {prev_inertia} -> {new_inertia}")
        centers = new_centers
        converged = np.array_equal(new_assign, assign)
        assign = new_assign
        prev_inertia = new_inertia
        if converged:
            break

    return KMeansResult(centroids=centers, assignments=assign,
                        inertia=prev_inertia, n_iterations=iters)


def local_prototypes(sn_params, samples: Sequence[Sample], k_per_class: int,
                     seed: int) -> PrototypeSet:
    """Cluster the student encoder's embeddings of each locally present class."""
    if k_per_class < 1:
        raise ContractError(f"k_per_class must be >= 1, got {k_per_class}")
    by_class: dict[int, list[Sample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)

    protos: dict[int, list[np.ndarray]] = {}
    counts: dict[int, int] = {}
    for cid in sorted(by_class):
        group = by_class[cid]
        x = Tensor(np.stack([s.features.data for s in group]))
        emb = encoder_forward(sn_params, x).data
        result = kmeans(emb, k_per_class, seed=seed + cid)
        protos[cid] = [c.copy() for c in result.centroids]
        counts[cid] = len(group)
    return PrototypeSet(protos=protos, counts=counts)


def live_prototypes(embeddings: Tensor, labels, k_per_class: int,
                    seed: int) -> dict[int, list[Tensor]]:
    """Differentiable prototypes: cluster detached embeddings, then rebuild each
    centroid as the mean of the live (tracked) embeddings it was assigned.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != embeddings.shape[0]:
        raise ContractError("labels and embeddings disagree on batch size")
    detached = embeddings.data
    out: dict[int, list[Tensor]] = {}
    for cid in sorted(set(labels.tolist())):
        rows = np.flatnonzero(labels == cid)
        result = kmeans(detached[rows], min(k_per_class, rows.size), seed=seed + int(cid))
        vecs = []
        for j in range(result.centroids.shape[0]):
            members = rows[result.assignments == j]
            # selector @ embeddings averages the member rows differentiably
            sel = np.zeros((1, embeddings.shape[0]))
            sel[0, members] = 1.0 / members.size
            vecs.append(reshape(matmul(Tensor(sel), embeddings), (embeddings.shape[1],)))
        out[int(cid)] = vecs
    return out


def proto_regularizer(local: Mapping[int, Sequence], global_set: PrototypeSet) -> Tensor:
    """Mean squared distance between local prototypes and their class's global one.

    (1 / (n_classes * k)) * sum_c sum_i ||P_local[c][i] - P_global[c]||^2.
    Classes missing from the global set contribute zero (they still count in
    the denominator), so the first round with an empty global set yields 0.
    """
    if isinstance(local, PrototypeSet):
        local = local.protos
    if not local:
        return Tensor(0.0)
    n_classes = len(local)
    k = max(len(vs) for vs in local.values())
    terms: Tensor | None = None
    for cid, vecs in local.items():
        if cid not in global_set or not global_set.protos[cid]:
            continue
        target = Tensor(global_set.protos[cid][0])
        for v in vecs:
            vt = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
            diff = sub(vt, target)
            sq = sum_all(mul(diff, diff))
            terms = sq if terms is None else add(terms, sq)
    if terms is None:
        return Tensor(0.0)
    return mul(terms, 1.0 / (n_classes * k))


def aggregate_prototypes(client_sets: Sequence[PrototypeSet]) -> PrototypeSet:
    """Count-weighted multi-prototype aggregation into one global vector per class.

    P_c = (1 / (n_reporting_clients * k)) * sum_clients sum_i (count_n / total_count) * P_i
    implemented exactly as written; note the built-in 1/|N_c| damping, whose
    magnitude quirk is absorbed by the regularizer weight downstream.
    """
    by_class: dict[int, list[tuple[list[np.ndarray], int]]] = {}
    for cs in client_sets:
        for cid, vecs in cs.protos.items():
            if not vecs:
                continue
            if cid not in cs.counts:
                raise ContractError(f"class {cid}: prototype set is missing its sample count")
            by_class.setdefault(cid, []).append((vecs, cs.counts[cid]))

    protos: dict[int, list[np.ndarray]] = {}
    for cid in sorted(by_class):
        reports = by_class[cid]
        dims = {vs[0].shape[0] for vs, _ in reports}
        if len(dims) != 1:
            raise ContractError(f"class {cid}: inconsistent prototype dims {sorted(dims)}")
        k = max(len(vs) for vs, _ in reports)
        for vs, cnt in reports:
            # fewer prototypes than k is only legitimate when the client had
            # fewer samples than k (one prototype per sample)
            if len(vs) != k and len(vs) != cnt:
                raise ContractError(
                    f"class {cid}: client reports {len(vs)} prototypes for count {cnt} "
                    f"while others report {k}; prototype counts must match")
        n_clients = len(reports)
        total = sum(cnt for _, cnt in reports)
        acc = np.zeros(dims.pop())
        for vs, cnt in reports:
            weight = cnt / total
            for v in vs:
                acc += weight * v
        protos[cid] = [acc / (n_clients * k)]
    return PrototypeSet(protos=protos, counts={})


# ---------------------------------------------------------------------------
# wire format: per class (class_id, count, k, dim, k*dim little-endian f64)
# ---------------------------------------------------------------------------

def prototype_set_to_bytes(ps: PrototypeSet) -> bytes:
    out = [struct.pack("<I", len(ps.protos))]
    for cid in ps.classes():
        vecs = ps.protos[cid]
        dim = vecs[0].shape[0] if vecs else 0
        out.append(struct.pack("<iqII", cid, ps.counts.get(cid, 0), len(vecs), dim))
        for v in vecs:
            out.append(v.astype("<f8").tobytes())
    return b"".join(out)


def prototype_set_from_bytes(blob: bytes) -> PrototypeSet:
    if len(blob) < 4:
        raise ParseError("prototype blob too short")
    (n_classes,) = struct.unpack_from("<I", blob, 0)
    off = 4
    protos: dict[int, list[np.ndarray]] = {}
    counts: dict[int, int] = {}
    for _ in range(n_classes):
        if off + 20 > len(blob):
            raise ParseError("truncated prototype class header")
        cid, count, k, dim = struct.unpack_from("<iqII", blob, off)
        off += 20
        vecs = []
        for _ in range(k):
            if off + 8 * dim > len(blob):
                raise ParseError("truncated prototype vector")
            vecs.append(np.frombuffer(blob, dtype="<f8", count=dim, offset=off).copy())
            off += 8 * dim
        protos[cid] = vecs
        if count:
            counts[cid] = count
    if off != len(blob):
        raise ParseError("trailing bytes in prototype blob")
    return PrototypeSet(protos=protos, counts=counts)
