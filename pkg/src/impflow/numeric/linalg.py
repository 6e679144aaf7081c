"""Small dense linear-algebra helpers: LU log-determinant, 2x2 eigenvalues,
power iteration for the spectral norm."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class SingularMatrixError(ValueError):
    pass


def lu_logdet(M) -> tuple[float, float]:
    """Return ``(sign, log|det M|)`` from an LU factorisation with partial pivoting."""
    A = np.array(M, dtype=np.float64, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"lu_logdet needs a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("lu_logdet: matrix has non-finite entries")
    n = A.shape[0]
    sign = 1.0
    logabs = 0.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(A[k:, k])))
        pivot = A[p, k]
        if abs(pivot) < 1e-300:
            raise SingularMatrixError(f"pivot {pivot!r} at column {k}")
        if p != k:
            A[[k, p]] = A[[p, k]]
            sign = -sign
        if pivot < 0:
            sign = -sign
        logabs += math.log(abs(pivot))
        if k + 1 < n:
            A[k + 1:, k] /= pivot
            A[k + 1:, k + 1:] -= np.outer(A[k + 1:, k], A[k, k + 1:])
    return sign, logabs


def eig_2x2(M):
    """Eigenvalues of a 2x2 matrix from its trace and determinant.

    Real roots come back as floats sorted in descending order; a complex
    pair comes back as ``(a+bi, a-bi)`` with ``b > 0``.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (2, 2):
        raise ValueError(f"eig_2x2 needs a 2x2 matrix, got shape {M.shape}")
    tr = M[0, 0] + M[1, 1]
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    # discriminant as (a-d)^2 + 4bc avoids cancellation in tr^2 - 4det
    disc = (M[0, 0] - M[1, 1]) ** 2 + 4.0 * M[0, 1] * M[1, 0]
    if disc >= 0:
        q = 0.5 * (tr + math.copysign(math.sqrt(disc), tr if tr != 0 else 1.0))
        if q == 0.0:
            return (0.0, 0.0)
        l1, l2 = q, det / q
        return (max(l1, l2), min(l1, l2))
    re = 0.5 * tr
    im = 0.5 * math.sqrt(-disc)
    return (complex(re, im), complex(re, -im))


# stop-rule margins for power_iteration_norm
_RATIO_WINDOW = 5
_TAIL_SAFETY = 0.05
_STREAK = 3


class PowerIterationResult(NamedTuple):
    sigma: float
    u: np.ndarray  # left singular vector estimate
    v: np.ndarray  # right singular vector estimate
    n_iter: int
    converged: bool


def power_iteration_norm(M, max_iters: int = 200, tol: float = 1e-3, rng=None,
                         v0=None, min_iters: int = 0) -> PowerIterationResult:
    """Estimate the largest singular value of ``M`` by power iteration on M^T M.

    The estimate ``||M v||`` with unit ``v`` never exceeds the true norm.
    Iteration stops once the last change is below ``tol * sigma`` and the
    remaining error, extrapolated as a geometric tail with the slowest of the
    recent contraction rates, stays well inside that for a few consecutive
    steps.  ``v0`` warm-starts from a previous right vector.  The stop rule
    is not consulted before ``min_iters`` iterations.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    M = np.asarray(M, dtype=np.float64)
    rows, cols = M.shape
    if v0 is not None and v0.shape == (cols,) and np.linalg.norm(v0) > 0:
        v = np.array(v0, dtype=np.float64)
    elif rng is not None:
        v = rng.normal(cols)
    else:
        v = np.ones(cols)
    v /= np.linalg.norm(v)
    u = M @ v
    sigma = float(np.linalg.norm(u))
    if sigma == 0.0:
        # v may sit in the null space; one retry from a dense start
        v = np.ones(cols) / math.sqrt(cols)
        u = M @ v
        sigma = float(np.linalg.norm(u))
        if sigma == 0.0 and not np.any(M):
            return PowerIterationResult(0.0, np.zeros(rows), v, 1, True)
    deltas: list[float] = []
    streak = 0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        w = M.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            converged = True
            break
        v = w / nw
        u = M @ v
        new_sigma = float(np.linalg.norm(u))
        delta = abs(new_sigma - sigma)
        sigma = new_sigma
        if delta == 0.0:
            converged = True
            break
        deltas.append(delta)
        if len(deltas) <= _RATIO_WINDOW or it < min_iters:
            continue
        # slowest recent contraction rate drives the tail estimate
        q = max(deltas[-i] / deltas[-i - 1] if deltas[-i - 1] > 0 else 1.0
                for i in range(1, _RATIO_WINDOW + 1))
        q = min(q, 0.999)
        tail = delta * q / (1.0 - q)
        if delta <= tol * sigma and tail <= _TAIL_SAFETY * tol * sigma:
            streak += 1
            if streak >= _STREAK:
                converged = True
                break
        else:
            streak = 0
    un = np.linalg.norm(u)
    u = u / un if un > 0 else u
    return PowerIterationResult(sigma, u, v, it, converged)
