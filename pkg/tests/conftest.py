"""Shared independent oracles for the test suite.

These deliberately avoid the library's own code paths: brute-force grid
searches, exact small-case geometry, cofactor inverses, characteristic
polynomials, and finite differences.
"""

import itertools
import math

import numpy as np
import pytest


def simplex_grid(k, step):
    """All grid points on the (k-1)-simplex with the given resolution."""
    m = int(round(1.0 / step))
    if k == 1:
        return np.ones((1, 1))
    if k == 2:
        t = np.arange(m + 1) / m
        return np.column_stack([t, 1.0 - t])
    if k == 3:
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        keep = i + j <= m
        i, j = i[keep], j[keep]
        return np.column_stack([i, j, m - i - j]) / m
    points = []
    for combo in itertools.combinations_with_replacement(range(k), m):
        counts = np.bincount(combo, minlength=k)
        points.append(counts / m)
    return np.array(points)


def grid_max_qp(q, hmat, step):
    """Brute-force maximum of q'g - 0.5 g'H g over a simplex grid."""
    q = np.asarray(q, dtype=float)
    hmat = np.asarray(hmat, dtype=float)
    grid = simplex_grid(q.size, step)
    values = grid @ q - 0.5 * np.einsum("ij,jk,ik->i", grid, hmat, grid)
    best = int(np.argmax(values))
    return grid[best], float(values[best])


def grid_max_qp_refined(q, hmat, coarse, fine):
    """Two-stage grid maximum: coarse sweep, then a fine local sweep.

    The fine stage re-parametrizes the simplex around the coarse winner
    by blending grid points toward it, which preserves feasibility.
    """
    q = np.asarray(q, dtype=float)
    hmat = np.asarray(hmat, dtype=float)

    def evaluate(grid):
        return grid @ q - 0.5 * np.einsum("ij,jk,ik->i", grid, hmat, grid)

    grid = simplex_grid(q.size, coarse)
    values = evaluate(grid)
    center = grid[int(np.argmax(values))]
    local = simplex_grid(q.size, fine / (2.0 * coarse))
    blended = center + 2.0 * coarse * (local - center)
    blended = np.clip(blended, 0.0, None)
    blended /= blended.sum(axis=1, keepdims=True)
    both = np.vstack([grid, blended])
    values = evaluate(both)
    best = int(np.argmax(values))
    return both[best], float(values[best])


def adjugate_inverse(mat):
    """Matrix inverse via cofactor expansion (exact, O(n!) — small n only)."""
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[0]

    def det(sub):
        if sub.shape[0] == 1:
            return sub[0, 0]
        total = 0.0
        for j in range(sub.shape[0]):
            minor = np.delete(np.delete(sub, 0, axis=0), j, axis=1)
            total += (-1.0) ** j * sub[0, j] * det(minor)
        return total

    d = det(mat)
    cof = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            minor = np.delete(np.delete(mat, i, axis=0), j, axis=1)
            cof[i, j] = (-1.0) ** (i + j) * det(minor)
    return cof.T / d


def charpoly_max_eigenvalue(mat):
    """Largest eigenvalue via roots of the characteristic polynomial."""
    coeffs = np.poly(np.asarray(mat, dtype=float))
    roots = np.roots(coeffs)
    real = roots[np.abs(roots.imag) < 1e-8].real
    return float(np.max(real))


def central_diff_gradient(fn, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        bump = np.zeros_like(x)
        bump[i] = h
        grad[i] = (fn(x + bump) - fn(x - bump)) / (2.0 * h)
    return grad


# --- exact smallest enclosing circle (p = 2), Welzl-style -------------------


def _circle_two(a, b):
    center = (a + b) / 2.0
    return center, float(np.linalg.norm(a - center))


def _circle_three(a, b, c):
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-14:
        return None
    ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / d
    uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / d
    center = np.array([ux, uy])
    return center, float(np.linalg.norm(a - center))


def smallest_enclosing_circle(points):
    """Exact minimal enclosing circle of 2-D points by support enumeration."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if n == 1:
        return points[0], 0.0
    best = None
    candidates = []
    for i, j in itertools.combinations(range(n), 2):
        candidates.append(_circle_two(points[i], points[j]))
    for i, j, k in itertools.combinations(range(n), 3):
        circ = _circle_three(points[i], points[j], points[k])
        if circ is not None:
            candidates.append(circ)
    for center, radius in candidates:
        if np.all(np.linalg.norm(points - center, axis=1) <= radius + 1e-9 * (1 + radius)):
            if best is None or radius < best[1]:
                best = (center, radius)
    return best


def min_norm_point_of_hull(points):
    """Exact closest point of conv(points) to the origin, by support enumeration."""
    points = np.asarray(points, dtype=float)
    n, p = points.shape
    best = None
    for size in range(1, n + 1):
        for combo in itertools.combinations(range(n), size):
            sub = points[list(combo)]
            # minimize ||w' sub||^2 s.t. sum w = 1 via the KKT system
            gram = sub @ sub.T
            kkt = np.zeros((size + 1, size + 1))
            kkt[:size, :size] = 2.0 * gram
            kkt[:size, size] = 1.0
            kkt[size, :size] = 1.0
            rhs = np.zeros(size + 1)
            rhs[size] = 1.0
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            w = sol[:size]
            if np.any(w < -1e-12):
                continue
            w = np.clip(w, 0.0, None)
            w /= w.sum()
            point = sub.T @ w
            norm = float(point @ point)
            if best is None or norm < best[1]:
                best = (point, norm)
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
