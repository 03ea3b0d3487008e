"""Hand-rolled oracles, kept independent of the library's linear-algebra path.

The library computes polar factors through LAPACK's divide-and-conquer SVD;
the tests check it against a one-sided Jacobi SVD written here from scratch
(plane rotations on column pairs until all columns are orthogonal).  Jacobi
converges slowly but with high relative accuracy, which is what an oracle
needs.
"""

from __future__ import annotations

import numpy as np


def jacobi_svd(matrix: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60):
    """One-sided Jacobi SVD: returns (u, s, v) with matrix = u @ diag(s) @ v.T.

    u is m x r and v is n x r with orthonormal columns, r = min(m, n), and s
    sorted descending (zero columns give zero singular values with zeroed u
    columns).
    """
    work = np.array(matrix, dtype=np.float64)
    m, n = work.shape
    transposed = m < n
    if transposed:
        work = work.T
        m, n = n, m
    v = np.eye(n)
    for _ in range(max_sweeps):
        off_diag = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = float(work[:, p] @ work[:, p])
                aqq = float(work[:, q] @ work[:, q])
                apq = float(work[:, p] @ work[:, q])
                if abs(apq) <= tol * np.sqrt(app * aqq) or apq == 0.0:
                    continue
                off_diag = max(off_diag, abs(apq) / np.sqrt(app * aqq))
                theta = 0.5 * np.arctan2(2.0 * apq, app - aqq)
                c, s = np.cos(theta), np.sin(theta)
                col_p = work[:, p].copy()
                work[:, p] = c * col_p + s * work[:, q]
                work[:, q] = -s * col_p + c * work[:, q]
                vcol_p = v[:, p].copy()
                v[:, p] = c * vcol_p + s * v[:, q]
                v[:, q] = -s * vcol_p + c * v[:, q]
        if off_diag == 0.0:
            break
    sing = np.linalg.norm(work, axis=0)
    order = np.argsort(sing)[::-1]
    sing = sing[order]
    work = work[:, order]
    v = v[:, order]
    u = np.zeros_like(work)
    nonzero = sing > 0
    u[:, nonzero] = work[:, nonzero] / sing[nonzero]
    if transposed:
        return v, sing, u
    return u, sing, v


def polar_via_jacobi(matrix: np.ndarray, sv_cutoff: float | None = None):
    """Polar factor and retained rank from the Jacobi SVD above."""
    u, s, v = jacobi_svd(matrix)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros_like(np.asarray(matrix, dtype=float)), 0
    cutoff = sv_cutoff if sv_cutoff is not None else 1e-12 * s[0]
    rank = int(np.count_nonzero(s > cutoff))
    return u[:, :rank] @ v[:, :rank].T, rank


def min_polar_distance(matrix: np.ndarray, sv_cutoff: float | None = None) -> float:
    """Minimal Frobenius distance from ``matrix`` to a rank-retained
    orthonormal factor, computed from Jacobi singular values alone:
    sqrt(sum_{i<=r} (s_i - 1)^2 + sum_{i>r} s_i^2)."""
    _, s, _ = jacobi_svd(matrix)
    if s.size == 0 or s[0] == 0.0:
        return 0.0
    cutoff = sv_cutoff if sv_cutoff is not None else 1e-12 * s[0]
    kept = s > cutoff
    return float(np.sqrt(np.sum((s[kept] - 1.0) ** 2) + np.sum(s[~kept] ** 2)))


def random_matrix_with_condition(
    gen: np.random.Generator, m: int, n: int, cond: float, scale: float = 1.0
) -> np.ndarray:
    """Random m x n matrix with prescribed 2-norm condition number."""
    r = min(m, n)
    qu, _ = np.linalg.qr(gen.standard_normal((m, r)))
    qv, _ = np.linalg.qr(gen.standard_normal((n, r)))
    if r == 1:
        sing = np.array([1.0])
    else:
        sing = np.geomspace(1.0, 1.0 / cond, r)
    return scale * (qu * sing) @ qv.T


def sgdm_scalar_recurrence(x0: float, g0: float, eta: float, beta: float, steps: int):
    """Per-entry oracle for the momentum baseline on f(x) = x^2 / 2.

    Returns the iterate sequence [x_0, x_1, ..., x_steps] where
    x' = x - eta * m and m' = (1 - beta) * m + beta * x'.
    """
    xs = [x0]
    x, mom = x0, g0
    for _ in range(steps):
        x = x - eta * mom
        mom = (1.0 - beta) * mom + beta * x
        xs.append(x)
    return xs


def principal_angles(basis_a: np.ndarray, basis_b: np.ndarray) -> np.ndarray:
    """Principal angles (radians) between the column spaces of two matrices."""
    qa, _ = np.linalg.qr(basis_a)
    qb, _ = np.linalg.qr(basis_b)
    cosines = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(cosines, -1.0, 1.0))
