"""Root finding: Broyden's method with backtracking, Banach fixed-point iteration,
and the transposed linear solve used by implicit backward passes.

All solvers work on a batch of independent problems stored as rows of an
``(n, d)`` array; a 1-D starting point is treated as a batch of one.
Residual callables receive ``(Z, rows)`` when ``rowwise=True`` (``rows``
indexes the batch rows held in ``Z``) and the full ``(n, d)`` array
otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SolverConfig:
    eps_f: float = 1e-6
    eps_b: float = 1e-10
    max_iter: int = 200
    ls_shrink: float = 0.5
    ls_max_trials: int = 20
    init_mode: str = "passthrough"

    def __post_init__(self):
        if not (self.eps_f > 0 and self.eps_b > 0):
            raise ValueError("solver tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 < self.ls_shrink < 1.0:
            raise ValueError("ls_shrink must lie in (0, 1)")
        if self.ls_max_trials < 1:
            raise ValueError("ls_max_trials must be >= 1")
        if self.init_mode not in ("zero", "passthrough"):
            raise ValueError(f"init_mode must be 'zero' or 'passthrough', got {self.init_mode!r}")


@dataclass
class SolveReport:
    root: np.ndarray
    residual_norm: np.ndarray  # per row
    n_iter: int
    n_evals: int
    converged: np.ndarray  # per row
    tol: float = 0.0

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residual_norm)) if self.residual_norm.size else 0.0

    def squeeze(self) -> "SolveReport":
        """Single-problem view: scalars instead of length-1 arrays."""
        return SolveReport(self.root[0], float(self.residual_norm[0]), self.n_iter,
                           self.n_evals, bool(self.converged[0]), self.tol)


class _Counted:
    """Adapts a residual callable to the ``(Z, rows)`` convention and counts calls."""

    def __init__(self, fn, rowwise: bool, single: bool, full: np.ndarray):
        self.fn, self.rowwise, self.single, self.full = fn, rowwise, single, full
        self.calls = 0

    def __call__(self, Z, rows):
        self.calls += 1
        if self.single:
            return np.asarray(self.fn(Z[0]), dtype=np.float64)[None]
        if self.rowwise:
            return np.asarray(self.fn(Z, rows), dtype=np.float64)
        full = self.full.copy()
        full[rows] = Z
        return np.asarray(self.fn(full), dtype=np.float64)[rows]


def _prepare(z0):
    z0 = np.array(z0, dtype=np.float64)
    single = z0.ndim == 1
    Z = z0[None].copy() if single else z0.copy()
    if not np.all(np.isfinite(Z)):
        raise ValueError("starting point must be finite")
    return Z, single


def _finish(Z, nrm, it, calls, tol, single):
    rep = SolveReport(Z, nrm, it, calls, nrm < tol, tol)
    return rep.squeeze() if single else rep


def broyden_solve(h, z0, cfg: SolverConfig | None = None, tol: float | None = None,
                  inv_jac0: float = -1.0, rowwise: bool = False) -> SolveReport:
    """Solve ``h(z) = 0`` by Broyden's method with a backtracking line search.

    Iterates ``z <- z - alpha B h(z)`` where ``B`` (one per row, starting at
    ``inv_jac0 * I``) approximates the inverse Jacobian and is refreshed with
    the "good" Broyden rank-one update.  ``alpha`` starts at 1 and shrinks
    until ``||h||`` strictly decreases; when no trial decreases it, the row
    stays put and ``B`` is reset (with the sign of the initial scale flipped
    if the row was already freshly reset).
    """
    cfg = cfg or SolverConfig()
    tol = cfg.eps_f if tol is None else tol
    Z, single = _prepare(z0)
    n, d = Z.shape
    hh = _Counted(h, rowwise, single, Z)
    all_rows = np.arange(n)
    H = hh(Z, all_rows)
    nrm = np.linalg.norm(H, axis=1)
    eye = np.eye(d)
    B = np.broadcast_to(inv_jac0 * eye, (n, d, d)).copy()
    # per-row initial scale; flipped when a freshly reset model cannot descend
    scale0 = np.full(n, float(inv_jac0))
    fresh = np.ones(n, dtype=bool)
    it = 0
    while it < cfg.max_iter:
        act = np.flatnonzero(nrm >= tol)
        if act.size == 0:
            break
        it += 1
        Ba, Ha = B[act], H[act]
        step = -np.einsum("nij,nj->ni", Ba, Ha)
        alpha = np.ones(act.size)
        pending = np.arange(act.size)
        newZ = np.empty((act.size, d))
        newH = np.empty((act.size, d))
        accepted = np.zeros(act.size, dtype=bool)
        for _ in range(cfg.ls_max_trials):
            rows = act[pending]
            Zt = Z[rows] + alpha[pending, None] * step[pending]
            Ht = hh(Zt, rows)
            ok = np.linalg.norm(Ht, axis=1) < nrm[rows]
            ok &= np.all(np.isfinite(Ht), axis=1)
            good = pending[ok]
            newZ[good], newH[good] = Zt[ok], Ht[ok]
            accepted[good] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            alpha[pending] *= cfg.ls_shrink
        # rows without a decreasing step: restart the inverse-Jacobian model
        stuck = act[~accepted]
        if stuck.size:
            scale0[stuck] = np.where(fresh[stuck], -scale0[stuck], scale0[stuck])
            B[stuck] = scale0[stuck, None, None] * eye
            fresh[stuck] = True
        acc = np.flatnonzero(accepted)
        if acc.size:
            rows = act[acc]
            dz = newZ[acc] - Z[rows]
            dh = newH[acc] - H[rows]
            Bk = B[rows]
            Bdh = np.einsum("nij,nj->ni", Bk, dh)
            denom = np.einsum("ni,ni->n", dz, Bdh)
            upd = np.abs(denom) >= 1e-30
            if upd.any():
                dzB = np.einsum("ni,nij->nj", dz[upd], Bk[upd])
                corr = (dz[upd] - Bdh[upd]) / denom[upd, None]
                Bk[upd] += corr[:, :, None] * dzB[:, None, :]
                B[rows] = Bk
            fresh[rows] = False
            Z[rows] = newZ[acc]
            H[rows] = newH[acc]
            nrm[rows] = np.linalg.norm(newH[acc], axis=1)
    return _finish(Z, nrm, it, hh.calls, tol, single)


def fixed_point_solve(mapping, z0, cfg: SolverConfig | None = None, tol: float | None = None,
                      rowwise: bool = False, history: list | None = None) -> SolveReport:
    """Banach iteration ``z <- mapping(z)`` until ``||mapping(z) - z|| < tol``.

    Converges whenever ``mapping`` is a contraction.  If ``history`` is a
    list, every iterate (as an array) is appended to it.
    """
    cfg = cfg or SolverConfig()
    tol = cfg.eps_f if tol is None else tol
    Z, single = _prepare(z0)
    n = Z.shape[0]
    mm = _Counted(mapping, rowwise, single, Z)
    M = mm(Z, np.arange(n))
    nrm = np.linalg.norm(M - Z, axis=1)
    if history is not None:
        history.append(Z.copy())
    it = 0
    while it < cfg.max_iter:
        act = np.flatnonzero(nrm >= tol)
        if act.size == 0:
            break
        it += 1
        Z[act] = M[act]
        Ma = mm(Z[act], act)
        M[act] = Ma
        nrm[act] = np.linalg.norm(Ma - Z[act], axis=1)
        if history is not None:
            history.append(Z.copy())
    return _finish(Z, nrm, it, mm.calls, tol, single)


def linear_transpose_solve(vjp_of_G, rhs, cfg: SolverConfig | None = None,
                           tol: float | None = None, rowwise: bool = False) -> SolveReport:
    """Solve ``y J_G = rhs`` given ``u -> u J_G`` by Broyden on ``h(y) = y J_G - rhs``.

    Starts from ``y = 0`` with ``B = I`` (J_G is close to the identity for
    the blocks used here).  Default tolerance is ``cfg.eps_b``.
    """
    cfg = cfg or SolverConfig()
    tol = cfg.eps_b if tol is None else tol
    R = np.asarray(rhs, dtype=np.float64)
    single = R.ndim == 1
    R2 = R[None] if single else R

    if single:
        def h(y):
            return np.asarray(vjp_of_G(y), dtype=np.float64) - R
    elif rowwise:
        def h(Y, rows):
            return np.asarray(vjp_of_G(Y, rows), dtype=np.float64) - R2[rows]
    else:
        def h(Y):
            return np.asarray(vjp_of_G(Y), dtype=np.float64) - R2

    return broyden_solve(h, np.zeros_like(R), cfg, tol, inv_jac0=1.0, rowwise=rowwise and not single)


def neumann_transpose_solve(vjp_of_gz, rhs, tol: float = 1e-12, max_terms: int = 100000):
    """Series oracle ``y = rhs sum_k (-J)^k`` for ``y (I + J) = rhs``.

    ``vjp_of_gz`` maps ``u -> u J``.  Stops when the next term is below ``tol``.
    """
    R = np.asarray(rhs, dtype=np.float64)
    term = R.copy()
    y = R.copy()
    for _ in range(max_terms):
        term = -np.asarray(vjp_of_gz(term), dtype=np.float64)
        y = y + term
        if np.max(np.abs(term)) < tol:
            return y
    raise RuntimeError("Neumann series did not reach the requested tolerance")
