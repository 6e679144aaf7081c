"""Flows built from stacked blocks with a standard-normal prior."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import ConvergenceError, ImpBlock, ResBlock, block_from_dict
from .logdet import EstimatorConfig
from .numeric import RandomState
from .numeric import tape as T
from .solvers import SolverConfig

LN2 = math.log(2.0)
SAMPLE_TOL = 1e-5


def prior_logp(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    return -0.5 * d * math.log(2 * math.pi) - 0.5 * np.sum(z * z, axis=-1)


@dataclass
class LogProbResult:
    logp: np.ndarray
    z: np.ndarray
    contributions: np.ndarray  # (n_blocks, n)
    solver_evals: int = 0


@dataclass
class SampleResult:
    samples: np.ndarray
    n_failed: int
    converged: np.ndarray  # mask over the requested draws


@dataclass
class NllReport:
    bits: float
    nats: float
    se_nats: float
    n: int


class FlowModel:
    """Blocks in data-to-latent order; ``logp(x) = prior(f(x)) + sum of block log-dets``."""

    def __init__(self, blocks: list, dim: int | None = None):
        self.blocks = list(blocks)
        if dim is None:
            if not self.blocks:
                raise ValueError("an empty model needs an explicit dim")
            dim = self.blocks[0].dim
        for i, b in enumerate(self.blocks):
            if b.dim != dim:
                raise ValueError(f"block {i} has dim {b.dim}, model dim is {dim}")
        self.dim = dim

    @property
    def nets(self):
        return [net for b in self.blocks for net in b.nets]

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params()]

    def set_params(self, arrays) -> None:
        i = 0
        for net in self.nets:
            k = 2 * net.n_linear
            net.set_params(arrays[i:i + k])
            i += k

    @property
    def n_params(self) -> int:
        return sum(net.n_params for net in self.nets)

    def normalize(self, rng: RandomState | None = None, n_iters: int | None = None) -> None:
        for net in self.nets:
            net.normalize(rng, n_iters)

    def _check_x(self, x):
        X = np.asarray(x, dtype=np.float64)
        single = X.ndim == 1
        X = X[None] if single else X
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValueError(f"expected inputs of dim {self.dim}, got shape {np.shape(x)}")
        if np.isnan(X).any():
            raise ValueError("input contains NaN")
        return X, single

    def logprob(self, x, mode: str = "exact", cfg: SolverConfig | None = None,
                rng: RandomState | None = None, est_cfg: EstimatorConfig | None = None,
                shared_draws: bool = True, workers: int = 1) -> LogProbResult:
        cfg = cfg or SolverConfig()
        X, single = self._check_x(x)
        if workers > 1 and len(X) > 1 and mode == "exact":
            res = self._logprob_parallel(X, cfg, workers)
        else:
            res = self._logprob(X, mode, cfg, rng, est_cfg, shared_draws)
        if single:
            return LogProbResult(float(res.logp[0]), res.z[0], res.contributions[:, 0], res.solver_evals)
        return res

    def _logprob(self, X, mode, cfg, rng, est_cfg, shared_draws) -> LogProbResult:
        h = X
        contribs = np.zeros((len(self.blocks), len(X)))
        evals = 0
        for i, b in enumerate(self.blocks):
            if isinstance(b, ImpBlock):
                try:
                    r = b.forward(h, cfg, mode=mode, est_cfg=est_cfg, rng=rng, shared_draws=shared_draws)
                except ConvergenceError as e:
                    raise ConvergenceError(f"block {i}: {e}", e.report) from e
                evals += r.report.n_evals
            else:
                r = b.forward(h, mode, est_cfg, rng)
            h = r.output
            contribs[i] = r.logdet
        logp = prior_logp(h) + contribs.sum(axis=0)
        return LogProbResult(logp, h, contribs, evals)

    def _logprob_parallel(self, X, cfg, workers) -> LogProbResult:
        chunks = np.array_split(np.arange(len(X)), workers)
        chunks = [c for c in chunks if c.size]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda c: self._logprob(X[c], "exact", cfg, None, None, True), chunks))
        return LogProbResult(np.concatenate([p.logp for p in parts]),
                             np.concatenate([p.z for p in parts]),
                             np.concatenate([p.contributions for p in parts], axis=1),
                             sum(p.solver_evals for p in parts))

    def traced_logprob(self, X, params, cfg: SolverConfig | None = None,
                       est_cfg: EstimatorConfig | None = None, rng: RandomState | None = None):
        """Taped per-row log-likelihood; ``params`` aligned with ``self.params()``.

        Returns ``(logp, solver_evals)``.
        """
        cfg = cfg or SolverConfig()
        est_cfg = est_cfg or EstimatorConfig()
        h = T.as_tensor(np.asarray(X, dtype=np.float64))
        total = None
        evals = 0
        i = 0
        for bi, b in enumerate(self.blocks):
            k = sum(2 * net.n_linear for net in b.nets)
            try:
                h, ld, rep = b.traced(h, params[i:i + k], cfg, est_cfg, rng)
            except ConvergenceError as e:
                raise ConvergenceError(f"block {bi}: {e}", e.report) from e
            i += k
            if rep is not None:
                evals += rep.n_evals
            total = ld if total is None else total + ld
        d = self.dim
        prior = (h * h).sum(axis=1) * -0.5 - 0.5 * d * math.log(2 * math.pi)
        return (prior if total is None else prior + total), evals

    def traced_map(self, X, params, cfg: SolverConfig | None = None) -> T.Tensor:
        """Taped data-to-latent map (no log-determinants)."""
        h = T.as_tensor(np.asarray(X, dtype=np.float64))
        i = 0
        for b in self.blocks:
            k = sum(2 * net.n_linear for net in b.nets)
            h = b.traced_map(h, params[i:i + k], cfg)
            i += k
        return h

    def forward(self, x, cfg: SolverConfig | None = None) -> np.ndarray:
        """Data-to-latent map without log-determinants."""
        X, single = self._check_x(x)
        for i, b in enumerate(self.blocks):
            if isinstance(b, ImpBlock):
                try:
                    X = b.forward(X, cfg, mode=None).output
                except ConvergenceError as e:
                    raise ConvergenceError(f"block {i}: {e}", e.report) from e
            else:
                X = X + b.g(X)
        return X[0] if single else X

    def sample(self, rng: RandomState, n: int, cfg: SolverConfig | None = None,
               tol: float = SAMPLE_TOL) -> SampleResult:
        """Draw ``z ~ N(0, I)`` and invert the blocks in reverse order.

        Draws whose inversion fails to reach ``tol`` are dropped and counted.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        cfg = cfg or SolverConfig()
        h = rng.normal((n, self.dim))
        ok = np.ones(n, dtype=bool)
        for b in reversed(self.blocks):
            if isinstance(b, ImpBlock):
                r = b.inverse(h, cfg, mode=None, check=False, tol=tol)
            else:
                r = b.inverse(h, cfg, tol=tol, check=False, with_logdet=False)
            ok &= np.asarray(r.report.converged) & np.all(np.isfinite(r.output), axis=1)
            h = np.where(np.isfinite(r.output), r.output, 0.0)
        return SampleResult(h[ok], int(n - ok.sum()), ok)

    def nll(self, x, mode: str = "exact", cfg: SolverConfig | None = None,
            rng: RandomState | None = None, est_cfg: EstimatorConfig | None = None,
            workers: int = 1) -> NllReport:
        X, _ = self._check_x(x)
        if len(X) == 0:
            raise ValueError("empty sample")
        lp = self.logprob(X, mode, cfg, rng, est_cfg, workers=workers).logp
        # correctly rounded mean: order- and duplication-independent
        nats = -math.fsum(lp) / len(lp)
        se = float(np.std(lp, ddof=1) / math.sqrt(len(lp))) if len(lp) > 1 else 0.0
        return NllReport(nats / LN2, nats, se, len(lp))

    def to_dict(self) -> dict:
        return {"format": "impflow.model", "version": 1, "dim": self.dim, "prior": "standard_normal",
                "blocks": [b.to_dict() for b in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "FlowModel":
        if d.get("format") != "impflow.model" or d.get("version") != 1:
            raise ValueError("not an impflow.model v1 checkpoint")
        if d.get("prior") != "standard_normal":
            raise ValueError(f"unsupported prior {d.get('prior')!r}")
        return cls([block_from_dict(b) for b in d["blocks"]], dim=int(d["dim"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FlowModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def flow_logprob(m: FlowModel, x, mode: str = "exact", cfg: SolverConfig | None = None,
                 rng: RandomState | None = None, **kw) -> LogProbResult:
    return m.logprob(x, mode, cfg, rng, **kw)


def flow_sample(m: FlowModel, rng: RandomState, n: int, cfg: SolverConfig | None = None,
                tol: float = SAMPLE_TOL) -> SampleResult:
    return m.sample(rng, n, cfg, tol)


def nll_bits(m: FlowModel, x, mode: str = "exact", cfg: SolverConfig | None = None,
             rng: RandomState | None = None, **kw) -> NllReport:
    return m.nll(x, mode, cfg, rng, **kw)


def build_flow(kind: str, dim: int, n_blocks: int, hidden: int = 128, n_layers: int = 4,
               activation_name: str = "lipswish", c: float = 0.9, rng: RandomState | None = None,
               init_scale: float = 1.0, n_power_iters: int = 200) -> FlowModel:
    """``kind`` is ``"imp"`` or ``"res"``; every net gets its own parameters."""
    from .lipschitz_net import build_mlp

    rng = rng or RandomState(0)

    def net():
        return build_mlp(dim, hidden, n_layers, activation_name, c, rng,
                         n_power_iters=n_power_iters, init_scale=init_scale)

    if kind == "imp":
        blocks = [ImpBlock(net(), net(), check=False) for _ in range(n_blocks)]
    elif kind == "res":
        blocks = [ResBlock(net(), check=False) for _ in range(n_blocks)]
    else:
        raise ValueError(f"unknown flow kind {kind!r}")
    return FlowModel(blocks, dim)


def density_grid(m: FlowModel, bounds=(-4.0, 4.0, -4.0, 4.0), resolution: int = 100,
                 cfg: SolverConfig | None = None, workers: int = 1) -> np.ndarray:
    """Rows ``(x1, x2, logp)`` over a ``resolution x resolution`` lattice (exact mode)."""
    if m.dim != 2:
        raise ValueError(f"density grids need a 2-D model, got dim {m.dim}")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    x0, x1, y0, y1 = bounds
    gx = np.linspace(x0, x1, resolution)
    gy = np.linspace(y0, y1, resolution)
    XX, YY = np.meshgrid(gx, gy, indexing="ij")
    pts = np.column_stack([XX.ravel(), YY.ravel()])
    lp = m.logprob(pts, "exact", cfg, workers=workers).logp
    return np.column_stack([pts, lp])


def emit_density_grid(m: FlowModel, bounds, resolution: int, out, cfg: SolverConfig | None = None,
                      workers: int = 1) -> np.ndarray:
    rows = density_grid(m, bounds, resolution, cfg, workers)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "logp_nats"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    return rows
