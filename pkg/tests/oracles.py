"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import numpy as np


def count_below(matrix: np.ndarray, x: float) -> int:
    """Eigenvalues of a symmetric matrix below ``x``: negative pivots of LDL^T of (M - xI) (Sylvester inertia)."""
    a = [list(map(float, row)) for row in matrix]
    n = len(a)
    for i in range(n):
        a[i][i] -= x
    negatives = 0
    for k in range(n):
        pivot = a[k][k]
        if pivot == 0.0:
            pivot = -1e-300
        if pivot < 0:
            negatives += 1
        for i in range(k + 1, n):
            f = a[i][k] / pivot
            for j in range(k + 1, n):
                a[i][j] -= f * a[k][j]
    return negatives


def bisection_eigenvalues(matrix: np.ndarray, tol: float = 1e-11) -> list[float]:
    """All eigenvalues of a symmetric matrix by bisection on the characteristic-polynomial sign count."""
    m = np.asarray(matrix, dtype=float)
    n = len(m)
    radius = max(sum(abs(v) for v in row) for row in m.tolist())
    out = []
    for k in range(n):
        lo, hi = -radius - 1.0, radius + 1.0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if count_below(m, mid) > k:
                hi = mid
            else:
                lo = mid
        out.append(0.5 * (lo + hi))
    return out


def union_find_components(adjacency: np.ndarray) -> int:
    n = len(adjacency)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if adjacency[i][j] > 0:
                parent[find(i)] = find(j)
    return len({find(i) for i in range(n)})


def kruskal(weights: np.ndarray) -> set[tuple[int, int]]:
    n = len(weights)
    edges = sorted((weights[i][j], i, j) for i in range(n) for j in range(i + 1, n))
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    tree = set()
    for _, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            tree.add((i, j))
    return tree


def voxel_box_iou(a_min, a_max, b_min, b_max, res: float = 0.01, lo: float = 0.0, hi: float = 4.0) -> float:
    """Box IoU by counting voxel centers of a regular grid; per-axis counts multiply for axis-aligned boxes."""
    centers = np.arange(lo + res / 2, hi, res)
    in_a = [(centers >= a_min[d]) & (centers <= a_max[d]) for d in range(3)]
    in_b = [(centers >= b_min[d]) & (centers <= b_max[d]) for d in range(3)]
    na = np.prod([m.sum() for m in in_a])
    nb = np.prod([m.sum() for m in in_b])
    ni = np.prod([(x & y).sum() for x, y in zip(in_a, in_b)])
    union = na + nb - ni
    return float(ni / union) if union else 0.0


def pinhole(point, fx, fy, cx, cy):
    """Pixel (row, col) of a camera-frame point, nearest-pixel rounding."""
    x, y, z = point
    u = fx * x / z + cx
    v = fy * y / z + cy
    return int(np.floor(v + 0.5)), int(np.floor(u + 0.5))
