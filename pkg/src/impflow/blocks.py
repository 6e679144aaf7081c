"""Invertible units: the explicit residual block ``z = x + g(x)`` and the implicit
block defined by the root of ``F(z, x) = g_x(x) - g_z(z) + x - z``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lipschitz_net import LipschitzMlp
from .logdet import (EstimatorConfig, draw_series_sample, exact_logdet,
                     series_logdet_estimate, taped_logdet)
from .numeric import RandomState
from .numeric import tape as T
from .solvers import (SolveReport, SolverConfig, broyden_solve, fixed_point_solve,
                      linear_transpose_solve)


DENSE_VJP_MAX_DIM = 16


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, report: SolveReport | None = None):
        super().__init__(msg)
        self.report = report


class StaleRootError(ValueError):
    pass


@dataclass
class BlockResult:
    output: np.ndarray
    logdet: np.ndarray | float
    report: SolveReport | None = None


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("input contains NaN")
    single = x.ndim == 1
    return (x[None] if single else x), single


def _unbatch(res: BlockResult, single: bool) -> BlockResult:
    if not single:
        return res
    ld = res.logdet[0] if np.ndim(res.logdet) else res.logdet
    rep = res.report.squeeze() if res.report is not None and np.ndim(res.report.converged) else res.report
    return BlockResult(res.output[0], float(ld), rep)


def _check_contractive(net: LipschitzMlp, name: str):
    bound = net.lipschitz_bound()
    if not bound < 1.0:
        raise ValueError(f"{name} is not contractive: spectral-norm product {bound:.6g} >= 1")


def _block_logdet(net, X, mode, est_cfg, rng, sample=None):
    if mode == "exact":
        return exact_logdet(net.jacobian(X))
    if est_cfg is None:
        est_cfg = EstimatorConfig(mode="stochastic")
    vjp = lambda U, rows: net.vjp_input(X[rows], U).value  # noqa: E731
    return series_logdet_estimate(vjp, X.shape[1], est_cfg, rng, rows=len(X), sample=sample)


class ResBlock:
    kind = "res"

    def __init__(self, g: LipschitzMlp, check: bool = True):
        if check:
            _check_contractive(g, "g")
        self.g = g

    @property
    def dim(self) -> int:
        return self.g.dim

    @property
    def nets(self) -> list[LipschitzMlp]:
        return [self.g]

    def forward(self, x, mode: str = "exact", est_cfg: EstimatorConfig | None = None,
                rng: RandomState | None = None) -> BlockResult:
        X, single = _batch(x)
        Z = X + self.g(X)
        ld = _block_logdet(self.g, X, mode, est_cfg, rng)
        return _unbatch(BlockResult(Z, ld), single)

    def inverse(self, z, cfg: SolverConfig | None = None, tol: float | None = None,
                check: bool = True, with_logdet: bool = True) -> BlockResult:
        """Fixed-point iteration ``x <- z - g(x)``; logdet is that of the inverse map."""
        cfg = cfg or SolverConfig()
        Zb, single = _batch(z)
        rep = fixed_point_solve(lambda Xs, rows: Zb[rows] - self.g(Xs), Zb.copy(), cfg,
                                tol=cfg.eps_f if tol is None else tol, rowwise=True)
        if check and not rep.all_converged:
            raise ConvergenceError("ResBlock inverse did not converge", rep)
        ld = -exact_logdet(self.g.jacobian(rep.root)) if with_logdet else np.zeros(len(Zb))
        return _unbatch(BlockResult(rep.root, ld, rep), single)

    def traced(self, x: T.Tensor, params, cfg: SolverConfig | None = None,
               est_cfg: EstimatorConfig | None = None, rng: RandomState | None = None):
        est_cfg = est_cfg or EstimatorConfig()
        x = T.as_tensor(x)
        if est_cfg.mode == "exact":
            out, J = self.g.traced_with_jacobian(x, params)
            return x + out, T.logdet(J + np.eye(self.dim)), None
        z = self.traced_map(x, params)
        ld = taped_logdet(self.g, x, params, est_cfg, rng)
        return z, ld, None

    def traced_map(self, x, params, cfg: SolverConfig | None = None) -> T.Tensor:
        return x + self.g.traced(x, params)

    def to_dict(self) -> dict:
        return {"format": "impflow.block", "version": 1, "type": "res", "nets": [self.g.to_dict()]}


class ImpBlock:
    """``z = f(x)`` with ``g_x(x) + x = g_z(z) + z``; ``g_x`` and ``g_z`` are independent nets."""

    kind = "imp"

    def __init__(self, g_x: LipschitzMlp, g_z: LipschitzMlp, check: bool = True,
                 dense_vjp: bool | None = None):
        if g_x.dim != g_z.dim:
            raise ValueError("g_x and g_z must share the data dimension")
        if check:
            _check_contractive(g_x, "g_x")
            _check_contractive(g_z, "g_z")
        self.g_x, self.g_z = g_x, g_z
        # backward solves use a dense J_gz(z) for small d (None: decide by dimension)
        self.dense_vjp = g_z.dim <= DENSE_VJP_MAX_DIM if dense_vjp is None else dense_vjp

    @property
    def dim(self) -> int:
        return self.g_x.dim

    @property
    def nets(self) -> list[LipschitzMlp]:
        return [self.g_x, self.g_z]

    def swapped(self) -> "ImpBlock":
        return ImpBlock(self.g_z, self.g_x, check=False, dense_vjp=self.dense_vjp)

    def residual(self, z, x):
        """``F(z, x) = g_x(x) - g_z(z) + x - z``."""
        z = np.asarray(z, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        return self.g_x(x) - self.g_z(z) + x - z

    def solve(self, x, cfg: SolverConfig | None = None, tol: float | None = None) -> SolveReport:
        """Root in ``z`` of ``F(z, x)`` by Broyden (rows of ``x`` are independent problems)."""
        cfg = cfg or SolverConfig()
        X, single = _batch(x)
        target = self.g_x(X) + X

        def h(Zs, rows):
            return target[rows] - self.g_z(Zs) - Zs

        z0 = X.copy() if cfg.init_mode == "passthrough" else np.zeros_like(X)
        rep = broyden_solve(h, z0, cfg, tol=tol, inv_jac0=-1.0, rowwise=True)
        return rep.squeeze() if single else rep

    def forward(self, x, cfg: SolverConfig | None = None, mode: str = "exact",
                est_cfg: EstimatorConfig | None = None, rng: RandomState | None = None,
                shared_draws: bool = True, check: bool = True, tol: float | None = None) -> BlockResult:
        X, single = _batch(x)
        rep = self.solve(X, cfg, tol)
        if check and not rep.all_converged:
            raise ConvergenceError("ImpBlock forward solve did not converge", rep)
        if mode is None:
            ld = np.zeros(len(X))
        else:
            ld = self.logdensity_terms(X, rep.root, mode, est_cfg, rng, shared_draws)
        return _unbatch(BlockResult(rep.root, ld, rep), single)

    def inverse(self, z, cfg: SolverConfig | None = None, mode: str = "exact",
                est_cfg: EstimatorConfig | None = None, rng: RandomState | None = None,
                shared_draws: bool = True, check: bool = True, tol: float | None = None) -> BlockResult:
        """Root in ``x`` of ``F(z, x)``: the forward pass of the swapped block."""
        return self.swapped().forward(z, cfg, mode, est_cfg, rng, shared_draws, check, tol)

    def logdensity_terms(self, x, z, mode: str = "exact", est_cfg: EstimatorConfig | None = None,
                         rng: RandomState | None = None, shared_draws: bool = True):
        """``ln det(I + J_gx(x)) - ln det(I + J_gz(z))`` per row."""
        X, single = _batch(x)
        Z, _ = _batch(z)
        if mode == "exact":
            out = exact_logdet(self.g_x.jacobian(X)) - exact_logdet(self.g_z.jacobian(Z))
        else:
            est_cfg = est_cfg or EstimatorConfig(mode="stochastic")
            if shared_draws:
                out = np.zeros(len(X))
                for _ in range(est_cfg.probes_per_sample):
                    s = draw_series_sample(est_cfg, rng, len(X), self.dim)
                    out += (_block_logdet(self.g_x, X, mode, est_cfg, rng, s)
                            - _block_logdet(self.g_z, Z, mode, est_cfg, rng, s))
                out /= est_cfg.probes_per_sample
            else:
                out = (_block_logdet(self.g_x, X, mode, est_cfg, rng)
                       - _block_logdet(self.g_z, Z, mode, est_cfg, rng))
        return float(out[0]) if single else out

    # -- implicit gradients

    def _vjp_G(self, Z):
        if self.dense_vjp:
            J = self.g_z.jacobian(Z)
            return lambda Y, rows: Y + np.einsum("ni,nij->nj", Y, J[rows])
        return lambda Y, rows: Y + self.g_z.vjp_input(Z[rows], Y).value

    def vjp(self, x, z, cotangent, cfg: SolverConfig | None = None):
        """Backward pass through the root: ``(dL/dx, grads_gx, grads_gz, report)``.

        Solves ``y (I + J_gz(z)) = dL/dz`` to ``eps_b``, then
        ``dL/dx = y (I + J_gx(x))`` and ``dL/dtheta = y (dg_x/dtheta - dg_z/dtheta)``.
        Parameter gradients are lists aligned with ``net.params()``.
        """
        cfg = cfg or SolverConfig()
        X, single = _batch(x)
        Z, _ = _batch(z)
        C, _ = _batch(cotangent)
        res = np.linalg.norm(self.residual(Z, X), axis=1)
        if np.any(res > 10 * cfg.eps_f):
            raise StaleRootError(f"(x, z) is not a root pair: ||F|| = {res.max():.3g}")
        rep = linear_transpose_solve(self._vjp_G(Z), C, cfg, rowwise=True)
        if not rep.all_converged:
            raise ConvergenceError("backward linear solve did not converge", rep)
        Y = rep.root
        xt = T.Tensor(X, True)
        px = self.g_x.param_tensors()
        with T._grad_mode(True):
            out_x = self.g_x.traced(xt, px)
        gx = T.grad(out_x, px + [xt], grad_output=Y)
        zt = T.Tensor(Z)
        pz = self.g_z.param_tensors()
        with T._grad_mode(True):
            out_z = self.g_z.traced(zt, pz)
        gz = T.grad(out_z, pz, grad_output=Y)
        dx = Y + gx[-1].value
        grads_x = [g.value for g in gx[:-1]]
        grads_z = [-g.value for g in gz]
        return (dx[0] if single else dx), grads_x, grads_z, (rep.squeeze() if single else rep)

    def traced(self, x: T.Tensor, params, cfg: SolverConfig | None = None,
               est_cfg: EstimatorConfig | None = None, rng: RandomState | None = None):
        """Taped forward: ``(z, logdet, report)``; ``params`` = g_x params then g_z params."""
        est_cfg = est_cfg or EstimatorConfig()
        x = T.as_tensor(x)
        nx = 2 * self.g_x.n_linear
        px, pz = list(params[:nx]), list(params[nx:])
        z, rep = self._traced_root(x, px, pz, cfg)
        X = x.value
        sample = None
        if est_cfg.mode == "stochastic":
            sample = draw_series_sample(est_cfg, rng, len(X), self.dim)
        ld = (taped_logdet(self.g_x, x, px, est_cfg, rng, sample)
              - taped_logdet(self.g_z, z, pz, est_cfg, rng, sample))
        return z, ld, rep

    def _traced_root(self, x: T.Tensor, px, pz, cfg: SolverConfig | None):
        cfg = cfg or SolverConfig()
        rep = self.solve(x.value, cfg)
        if not rep.all_converged:
            raise ConvergenceError("ImpBlock forward solve did not converge", rep)
        X, Zv = x.value, rep.root

        def backward(g):
            dx, gxs, gzs, _ = self.vjp(X, Zv, g, cfg)
            return (dx, *gxs, *gzs)

        return T.custom(Zv, [x, *px, *pz], backward), rep

    def traced_map(self, x, params, cfg: SolverConfig | None = None) -> T.Tensor:
        """Taped root ``z(x)`` whose backward pass is the implicit gradient."""
        x = T.as_tensor(x)
        nx = 2 * self.g_x.n_linear
        return self._traced_root(x, list(params[:nx]), list(params[nx:]), cfg)[0]

    def to_dict(self) -> dict:
        return {"format": "impflow.block", "version": 1, "type": "imp",
                "nets": [self.g_x.to_dict(), self.g_z.to_dict()]}


def block_from_dict(d: dict, check: bool = False):
    if d.get("format") != "impflow.block" or d.get("version") != 1:
        raise ValueError("not an impflow.block v1 checkpoint")
    nets = [LipschitzMlp.from_dict(n) for n in d["nets"]]
    if d["type"] == "res":
        return ResBlock(nets[0], check=check)
    if d["type"] == "imp":
        return ImpBlock(nets[0], nets[1], check=check)
    raise ValueError(f"unknown block type {d['type']!r}")


def res_forward(b: ResBlock, x, mode="exact", est_cfg=None, rng=None) -> BlockResult:
    return b.forward(x, mode, est_cfg, rng)


def res_inverse(b: ResBlock, z, cfg: SolverConfig | None = None) -> BlockResult:
    return b.inverse(z, cfg)


def imp_residual(b: ImpBlock, z, x):
    return b.residual(z, x)


def imp_forward(b: ImpBlock, x, cfg: SolverConfig | None = None, **kw) -> BlockResult:
    return b.forward(x, cfg, **kw)


def imp_inverse(b: ImpBlock, z, cfg: SolverConfig | None = None, **kw) -> BlockResult:
    return b.inverse(z, cfg, **kw)


def imp_vjp(b: ImpBlock, x, z, cotangent, cfg: SolverConfig | None = None):
    return b.vjp(x, z, cotangent, cfg)


def block_logdensity_terms(b: ImpBlock, x, z, mode="exact", est_cfg=None, rng=None,
                           shared_draws: bool = True):
    return b.logdensity_terms(x, z, mode, est_cfg, rng, shared_draws)
