"""Normalized Laplacian, Jacobi eigensolver, eigengap model selection and spectral k-means."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConvergenceFailure, TooFewEigenvalues

JACOBI_MAX_SIZE = 512
MAX_CLUSTERS = 32
KMEANS_MAX_ITER = 100


@dataclass(eq=False)
class SpectralResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    chosen_clusters: int
    assignment: dict[int, int]

    @property
    def num_clusters(self) -> int:
        return len(set(self.assignment.values()))

    def clusters(self) -> list[list[int]]:
        """Member ids per cluster id, ordered by cluster id."""
        out: dict[int, list[int]] = {}
        for sid, cid in self.assignment.items():
            out.setdefault(cid, []).append(sid)
        return [sorted(out[c]) for c in sorted(out)]

    def to_json(self) -> str:
        return json.dumps({
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "H": self.chosen_clusters,
            "assignment": {str(k): v for k, v in sorted(self.assignment.items())},
        })


def normalized_laplacian(affinity: np.ndarray) -> np.ndarray:
    """``D^-1/2 (D - A) D^-1/2``; zero-degree rows get a unit diagonal and zero off-diagonal."""
    a = np.asarray(affinity, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"affinity must be square, got {a.shape}")
    if np.any(a < 0):
        raise ValueError("affinity must be non-negative")
    a = (a + a.T) / 2.0
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    lap = np.eye(len(a)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return (lap + lap.T) / 2.0


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint (p, q) pair sets covering every unordered pair once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def eig_symmetric(matrix: np.ndarray, max_sweeps: int = 60, tol: float = 1e-15) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations of each round act on disjoint index pairs, so a whole round is
    applied with vectorized row/column updates. Returns ascending eigenvalues
    and the matching orthonormal eigenvectors as columns.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got {m.shape}")
    n = len(m)
    scale = np.linalg.norm(m)
    if n and not np.allclose(m, m.T, atol=1e-9 * max(scale, 1.0), rtol=0.0):
        raise ValueError("matrix is not symmetric")
    if n > JACOBI_MAX_SIZE:
        vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
        return vals, vecs
    a = (m + m.T) / 2.0
    v = np.eye(n)
    if n <= 1 or scale == 0.0:
        return np.diag(a).copy(), v
    rounds = _round_robin(n)
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if np.sqrt(np.sum(a[off_mask] ** 2)) <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            # for |tau| beyond ~1e154 the square overflows and t correctly collapses to 0
            with np.errstate(over="ignore"):
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rows_p, rows_q = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rows_p - s[:, None] * rows_q
            a[q, :] = s[:, None] * rows_p + c[:, None] * rows_q
            cols_p, cols_q = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cols_p * c - cols_q * s
            a[:, q] = cols_p * s + cols_q * c
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
    else:
        if np.sqrt(np.sum(a[off_mask] ** 2)) > tol * scale:
            raise ConvergenceFailure(f"Jacobi did not converge in {max_sweeps} sweeps")
    vals = np.diag(a).copy()
    order = np.argsort(vals, kind="stable")
    return vals[order], v[:, order]


def eigengap_select(eigenvalues: Sequence[float], j_max: Optional[int] = None) -> int:
    """1-indexed ``argmax_j (lambda_{j+1} - lambda_j)`` over ``1 <= j <= j_max``; ties go to the smaller j."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if len(lam) < 3:
        raise TooFewEigenvalues(f"need at least 3 eigenvalues, got {len(lam)}")
    limit = min(len(lam) - 2, MAX_CLUSTERS) if j_max is None else min(j_max, len(lam) - 1)
    if limit < 1:
        raise ValueError("j_max must be at least 1")
    gaps = np.diff(lam[: limit + 1])
    best = gaps.max()
    tied = gaps >= best - 1e-12 * max(abs(best), np.abs(lam).max(), 1e-300)
    return int(np.flatnonzero(tied)[0]) + 1


def kmeans(points: np.ndarray, k: int, max_iter: int = KMEANS_MAX_ITER) -> np.ndarray:
    """Lloyd's k-means with farthest-point seeding starting from row 0."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"k={k} invalid for {n} points")
    centers = [x[0]]
    dist = np.sum((x - x[0]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dist))
        centers.append(x[nxt])
        dist = np.minimum(dist, np.sum((x - x[nxt]) ** 2, axis=1))
    centers = np.array(centers)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(d2, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
    return labels


def connected_components(affinity: np.ndarray) -> np.ndarray:
    """Component index per node of the graph with edges where ``A_ij > 0`` (i != j)."""
    a = np.asarray(affinity)
    n = len(a)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in zip(*np.nonzero(np.triu(a, 1) > 0)):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = [find(i) for i in range(n)]
    relabel: dict[int, int] = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots], dtype=int)


def _canonical_labels(labels: Sequence[int]) -> list[int]:
    relabel: dict[int, int] = {}
    return [relabel.setdefault(int(l), len(relabel)) for l in labels]


def spectral_cluster(affinity: np.ndarray, ids: Optional[Sequence[int]] = None,
                     j_max: Optional[int] = None) -> SpectralResult:
    """Cluster superpoints from their similarity matrix.

    Zero-degree superpoints are singleton clusters. The Laplacian is block
    diagonal with an identity block for them, so the remaining block is
    decomposed on its own and the spectrum is reassembled exactly.
    """
    a = np.asarray(affinity, dtype=np.float64)
    n = len(a)
    ids = list(range(n)) if ids is None else [int(i) for i in ids]
    if len(ids) != n:
        raise ValueError("ids must match the affinity size")
    if n < 3:
        raise TooFewEigenvalues(f"spectral clustering needs S >= 3, got {n}")
    lap = normalized_laplacian(a)
    degree = np.asarray((a + a.T) / 2.0).sum(axis=1)
    live = np.flatnonzero(degree > 0)
    dead = np.flatnonzero(degree <= 0)

    vals = np.ones(n)
    vecs = np.zeros((n, n))
    live_vals = np.zeros(0)
    if len(live):
        live_vals, live_vecs = eig_symmetric(lap[np.ix_(live, live)])
        vals[: len(live)] = live_vals
        vecs[np.ix_(live, np.arange(len(live)))] = live_vecs
    for k, i in enumerate(dead):
        vecs[i, len(live) + k] = 1.0
    order = np.argsort(vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]

    labels = np.zeros(n, dtype=int)
    h = 0
    if len(live) >= 3:
        limit = min(len(live) - 2, MAX_CLUSTERS) if j_max is None else j_max
        h = eigengap_select(live_vals, limit)
        emb = live_vecs[:, :h].copy()
        norms = np.linalg.norm(emb, axis=1)
        nz = norms > 1e-12
        emb[nz] /= norms[nz, None]
        live_labels = _canonical_labels(kmeans(emb, h))
    elif len(live):
        live_labels = list(connected_components(a[np.ix_(live, live)]))
        h = max(live_labels) + 1
    else:
        live_labels = []
    next_id = (max(live_labels) + 1) if live_labels else 0
    for i, lbl in zip(live, live_labels):
        labels[i] = lbl
    for k, i in enumerate(dead):
        labels[i] = next_id + k
    return SpectralResult(vals, vecs, h, {sid: int(l) for sid, l in zip(ids, labels)})
