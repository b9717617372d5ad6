"""Affinity construction, graph Laplacian, eigen-embedding and density clustering.

These are the numerical core of spectral candidate generation. Everything
here is pure and deterministic: ties break by ascending index.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError, ValidationError


@dataclass
class AffinityMatrix:
    values: np.ndarray
    names: list[str] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValidationError("affinity matrix must be square")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class SpectralEmbedding:
    Q: np.ndarray
    eigenvalues: np.ndarray


@dataclass
class ClusterPartition:
    clusters: list[list[int]]
    noise: list[int] = field(default_factory=list)

    def labels(self, n: int) -> list[int]:
        out = [-1] * n
        for c, members in enumerate(self.clusters):
            for i in members:
                out[i] = c
        return out


def unit_rows(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalise; returns the normalised rows and a mask of zero-norm rows."""
    vectors = np.asarray(vectors, dtype=float)
    # rescale by the largest entry first so tiny or huge rows do not under/overflow
    peak = np.max(np.abs(vectors), axis=1) if vectors.size else np.zeros(len(vectors))
    zero = peak == 0
    scaled = vectors / np.where(zero, 1.0, peak)[:, None]
    norms = np.linalg.norm(scaled, axis=1)
    return scaled / np.where(zero, 1.0, norms)[:, None], zero


def cosine_to(query: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    [q], q_zero = unit_rows(np.asarray(query, dtype=float)[None, :])
    units, zero = unit_rows(vectors)
    if q_zero[0]:
        return np.zeros(len(units))
    sims = units @ q
    sims[zero] = 0.0
    return sims


def build_affinity(
    embeddings: np.ndarray,
    relations: Iterable[tuple[int, int, float]] = (),
    names: Sequence[str] | None = None,
) -> AffinityMatrix:
    """``A[p,q] = clamp(cos(v_p, v_q), 0, 1) * w(p,q)``.

    ``relations`` holds directed ``(p, q, weight)`` triples. Parallel relations
    in one direction keep the largest weight; when both directions carry a
    weight the two are averaged. Pairs without a relation get weight 1.
    """
    emb = np.asarray(embeddings, dtype=float)
    n = emb.shape[0]
    names = list(names) if names is not None else [str(i) for i in range(n)]
    units, zero = unit_rows(emb)
    diags = [f"entity {names[i]!r} has a zero-norm embedding; similarities set to 0" for i in np.flatnonzero(zero)]
    cos = np.clip(units @ units.T, 0.0, 1.0)
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0

    directed: dict[tuple[int, int], float] = {}
    for p, q, w in relations:
        if p == q:
            continue
        directed[(p, q)] = max(directed.get((p, q), -math.inf), float(w))
    weight = np.ones((n, n))
    for (p, q), w in directed.items():
        back = directed.get((q, p))
        val = w if back is None else (w + back) / 2.0
        weight[p, q] = weight[q, p] = val

    A = cos * weight
    A = (A + A.T) / 2.0  # exact symmetry against rounding in the dot products
    np.fill_diagonal(A, 0.0)
    return AffinityMatrix(A, names, diags)


def laplacian(A: AffinityMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalised Laplacian; returns ``(D, L)`` with ``L = D - A``."""
    a = A.values if isinstance(A, AffinityMatrix) else np.asarray(A, dtype=float)
    D = np.diag(a.sum(axis=1))
    return D, D - a


def _fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > tol)
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def full_eigendecomposition(L: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValidationError("Laplacian must be square")
    vals, vecs = np.linalg.eigh((L + L.T) / 2.0)
    return vals, _fix_signs(vecs)


def smallest_eigenvectors(L: np.ndarray, m: int) -> SpectralEmbedding:
    n = np.asarray(L).shape[0]
    if not 1 <= m <= n:
        raise ParameterError(f"m must be in [1, {n}], got {m}")
    vals, vecs = full_eigendecomposition(L)
    return SpectralEmbedding(vecs[:, :m], vals[:m])


def choose_m(pool_size: int) -> int:
    if pool_size < 1:
        raise ParameterError("pool_size must be >= 1")
    return min(max(math.ceil(math.sqrt(pool_size)), 2), min(8, pool_size))


def eigengap_m(eigenvalues: np.ndarray, m_max: int) -> int:
    """Number of leading eigenvectors before the largest eigenvalue gap, capped at ``m_max``."""
    n = len(eigenvalues)
    upper = min(m_max, n - 1)
    if upper < 1:
        return 1
    gaps = np.diff(eigenvalues[: upper + 1])
    return int(np.argmax(gaps)) + 1  # argmax returns the first maximum


def default_eps(rows: np.ndarray, scale: float = 0.5, floor: float = 1e-9) -> float:
    rows = np.asarray(rows, dtype=float)
    n = rows.shape[0]
    if n < 2:
        return floor
    d = _pairwise(rows)
    iu = np.triu_indices(n, k=1)
    return max(scale * float(np.median(d[iu])), floor)


def _pairwise(rows: np.ndarray) -> np.ndarray:
    diff = rows[:, None, :] - rows[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def cluster_rows(Q: np.ndarray, eps: float | None = None, min_pts: int = 2) -> ClusterPartition:
    """DBSCAN over the rows of ``Q`` with Euclidean distance.

    A point's neighbourhood includes itself (``dist <= eps``). Clusters are
    grown from core points in index order; a border point reachable from
    several clusters joins the first one that reaches it.
    """
    rows = np.atleast_2d(np.asarray(Q, dtype=float))
    n = rows.shape[0]
    if n == 0:
        return ClusterPartition([], [])
    if min_pts < 1:
        raise ParameterError("min_pts must be >= 1")
    if eps is None:
        eps = default_eps(rows)
    if eps < 0:
        raise ParameterError("eps must be >= 0")
    dist = _pairwise(rows)
    neigh = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = [len(nb) >= min_pts for nb in neigh]
    labels = [-1] * n
    next_label = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = next_label
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            for q in neigh[p]:
                if labels[q] == -1:
                    labels[q] = next_label
                    if core[q]:
                        queue.append(int(q))
        next_label += 1
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        if lab >= 0:
            groups.setdefault(lab, []).append(i)
    clusters = sorted(groups.values(), key=lambda c: c[0])
    return ClusterPartition(clusters, [i for i in range(n) if labels[i] == -1])


def select_clusters_knn(
    visual: np.ndarray, embeddings: np.ndarray, partition: ClusterPartition, delta: float = 0.05
) -> list[int]:
    """Indices of clusters whose mean cosine to ``visual`` is within ``delta`` of the best."""
    if not partition.clusters:
        return []
    sims = cosine_to(visual, embeddings)
    scores = [float(np.mean(sims[c])) for c in partition.clusters]
    best = max(scores)
    return [i for i, s in enumerate(scores) if s >= best - delta - 1e-12]
