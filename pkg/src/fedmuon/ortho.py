"""Orthonormal polar factors of momentum matrices.

Two routes compute the nearest matrix with orthonormal columns (in Frobenius
distance) to a given real matrix:

* ``orthonormalize_exact`` takes the thin SVD and returns U @ Vt restricted
  to singular values above a cutoff.  Rank-deficient inputs get the rank-r
  factor; the zero matrix maps to zero with rank 0.
* ``newton_schulz`` runs a quintic matrix-polynomial iteration on the
  Frobenius-normalized input, driving all singular values toward 1 without
  an SVD.  With the default 5 iterations the singular values of the output
  cluster in roughly [0.7, 1.3] provided the smallest normalized singular
  value is not far below ~1e-3 (tiny singular values are only partially
  pulled up; callers needing exactness use the SVD route).

Both functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArg, NonFiniteInput, ZeroMatrix

# Quintic coefficients and iteration count used by the reference Muon
# optimizer; configurable per call.
QUINTIC_COEFFS: tuple[float, float, float] = (3.4445, -4.7750, 2.0315)
DEFAULT_NS_ITERS = 5

# Singular values of the exact factor sit within this of 1.
EXACT_SV_TOL = 1e-10
# Five quintic iterations leave singular values within this band of 1.
NEWTON_SCHULZ_SV_TOL = 0.35
# Default sv_cutoff is this fraction of the largest singular value.
RANK_CUTOFF_REL = 1e-12


@dataclass(frozen=True)
class OrthoResult:
    """An orthonormal factor together with the rank it retained.

    ``residual`` is the Frobenius distance to the exact polar factor when
    the method knows it (0.0 for the SVD route, None for Newton-Schulz,
    whose error is characterized statistically rather than per call).
    """

    factor: np.ndarray
    rank: int
    residual: float | None = None


def _require_finite(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise InvalidArg(f"expected a 2-D matrix, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise NonFiniteInput("matrix contains NaN or Inf")
    return matrix


def orthonormalize_exact(matrix: np.ndarray, sv_cutoff: float | None = None) -> OrthoResult:
    """Exact polar factor U @ Vt via the thin SVD.

    Singular values <= ``sv_cutoff`` are dropped before forming the factor
    (default cutoff: 1e-12 times the largest singular value).  The result
    has ``rank`` orthonormal columns/rows embedded in the input shape; its
    Frobenius norm is sqrt(rank) and its spectral norm is 1, both to
    machine precision.  The thin SVD handles tall and wide inputs alike,
    so the Frobenius norm is bounded by sqrt(min(m, n)).
    """
    matrix = _require_finite(matrix)
    if sv_cutoff is not None and sv_cutoff < 0:
        raise InvalidArg("sv_cutoff must be nonnegative")
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return OrthoResult(factor=np.zeros_like(matrix), rank=0, residual=0.0)
    cutoff = sv_cutoff if sv_cutoff is not None else RANK_CUTOFF_REL * s[0]
    rank = int(np.count_nonzero(s > cutoff))
    if rank == 0:
        return OrthoResult(factor=np.zeros_like(matrix), rank=0, residual=0.0)
    factor = u[:, :rank] @ vt[:rank, :]
    return OrthoResult(factor=factor, rank=rank, residual=0.0)


def newton_schulz(
    matrix: np.ndarray,
    iters: int = DEFAULT_NS_ITERS,
    coeffs: tuple[float, float, float] = QUINTIC_COEFFS,
) -> OrthoResult:
    """Approximate polar factor via the quintic Newton-Schulz iteration.

    Normalizes Z0 = M / ||M||_F, then iterates

        Z <- a*Z + b*Z (Z^T Z) + c*Z (Z^T Z)^2

    which maps each singular value z to a*z + b*z^3 + c*z^5.  Raises
    ``ZeroMatrix`` for all-zero input; callers holding zero momentum must
    use the rank-0 convention (zero factor) instead.

    The reported rank is min(m, n): the iteration preserves the rank of its
    input and is meant for the full-rank basin, where the factor's column
    space equals the input's.  Callers needing the true retained rank of a
    degenerate matrix should use ``orthonormalize_exact``.
    """
    matrix = _require_finite(matrix)
    if iters < 1:
        raise InvalidArg("iters must be >= 1")
    fro = np.linalg.norm(matrix)
    if fro == 0.0:
        raise ZeroMatrix("cannot Newton-Schulz orthonormalize the zero matrix")
    a, b, c = coeffs
    z = matrix / fro
    for _ in range(iters):
        gram = z.T @ z
        z = a * z + z @ (b * gram + c * (gram @ gram))
    return OrthoResult(factor=z, rank=min(matrix.shape), residual=None)
