"""Executable checks of constructive claims about residual and implicit flows."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import ImpBlock, ResBlock
from .flow import FlowModel
from .lipschitz_net import LinearLayer, LipschitzMlp, build_mlp, linear_mlp
from .logdet import EstimatorConfig, exact_logdet, series_logdet_estimate
from .numeric import RandomState, eig_2x2, power_iteration_norm
from .solvers import SolverConfig
from .training import target_1d

# residual parts of three linear residual maps whose composition has two
# negative real Jacobian eigenvalues
COUNTEREXAMPLE_MATRICES = (
    np.array([[-0.46, -0.20], [0.85, 0.00]]),
    np.array([[-0.20, -0.70], [0.30, -0.60]]),
    np.array([[-0.50, -0.60], [-0.20, -0.55]]),
)


@dataclass
class BallSpec:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=np.float64))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")


@dataclass
class BoundReport:
    name: str
    bound: object
    measured: object
    passed: bool | None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


# -- exact 1-D construction


def _relu_chain(w1: float, w2: float) -> LipschitzMlp:
    layers = [LinearLayer(np.array([[w1]]), np.zeros(1), 1.0),
              LinearLayer(np.array([[w2]]), np.zeros(1), 1.0)]
    return LipschitzMlp(layers, "relu")


def construct_exact_impflow_1d() -> ImpBlock:
    """``g_x(x) = relu(-0.9 x)`` and ``g_z(z) = -sqrt(0.9) relu(sqrt(0.9) z)``.

    The induced map is ``0.1 x`` for ``x < 0`` and ``10 x`` for ``x >= 0``.
    Weights are assigned exactly; both nets have Lipschitz constant 0.9.
    """
    s = math.sqrt(0.9)
    return ImpBlock(_relu_chain(-0.9, 1.0), _relu_chain(s, -s))


def exact_construction_error(block: ImpBlock | None = None, n: int = 1001,
                             cfg: SolverConfig | None = None) -> float:
    block = block or construct_exact_impflow_1d()
    x = np.linspace(-1.0, 1.0, n)[:, None]
    z = block.forward(x, cfg, mode=None).output[:, 0]
    return float(np.max(np.abs(z - target_1d(x[:, 0]))))


def exact_construction_check(tol: float = 1e-5, cfg: SolverConfig | None = None) -> BoundReport:
    err = exact_construction_error(cfg=cfg)
    return BoundReport("exact_impflow_1d", tol, err, err <= tol, {"grid_points": 1001})


def tolerance_sweep_1d(eps_values=(1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3), factor: float = 10.0) -> BoundReport:
    """Error of the exact construction as the root tolerance loosens; must stay <= factor * eps."""
    block = construct_exact_impflow_1d()
    errs = [exact_construction_error(block, cfg=SolverConfig(eps_f=e)) for e in eps_values]
    ok = all(err <= factor * e for err, e in zip(errs, eps_values))
    return BoundReport("exact_impflow_1d_tolerance_sweep", [factor * e for e in eps_values], errs, ok,
                       {"eps_f": list(eps_values)})


# -- three-block counterexample


@dataclass
class CounterexampleResult:
    product: np.ndarray
    eigenvalues: tuple
    residual_norms: list
    residual_norms_exact: list

    @property
    def all_contractive(self) -> bool:
        return all(s < 1 for s in self.residual_norms)

    @property
    def both_negative(self) -> bool:
        return all(abs(complex(e).imag) == 0 and complex(e).real < 0 for e in self.eigenvalues)


def corollary6_counterexample(rng: RandomState | None = None, max_iters: int = 1000) -> CounterexampleResult:
    """Jacobian of ``f_1 o f_2 o f_3`` for three linear residual maps, and its eigenvalues."""
    rng = rng or RandomState(0)
    blocks = [ResBlock(linear_mlp(A)) for A in COUNTEREXAMPLE_MATRICES]
    J = np.eye(2)
    for b in blocks:
        J = J @ (np.eye(2) + b.g.jacobian(np.zeros(2)))
    norms = [power_iteration_norm(A, max_iters, 1e-12, rng).sigma for A in COUNTEREXAMPLE_MATRICES]
    return CounterexampleResult(J, eig_2x2(J), norms,
                                [float(np.linalg.norm(A, 2)) for A in COUNTEREXAMPLE_MATRICES])


# -- Lipschitz ratios


def block_ratio_interval(block) -> tuple[float, float]:
    """Bi-Lipschitz interval of one block from the exact spectral-norm products of its nets."""
    if isinstance(block, ResBlock):
        k = block.g.lipschitz_bound()
        return 1.0 - k, 1.0 + k
    k = max(block.g_x.lipschitz_bound(), block.g_z.lipschitz_bound())
    return (1.0 - k) / (1.0 + k), (1.0 + k) / (1.0 - k)


def model_ratio_interval(model: FlowModel) -> tuple[float, float]:
    lo, hi = 1.0, 1.0
    for b in model.blocks:
        a, c = block_ratio_interval(b)
        lo, hi = lo * a, hi * c
    return lo, hi


def pairwise_ratios(model: FlowModel, rng: RandomState, n_pairs: int = 10_000, scale: float = 2.0,
                    cfg: SolverConfig | None = None) -> np.ndarray:
    """``||f(x1) - f(x2)|| / ||x1 - x2||`` over random pairs at mixed separations."""
    cfg = cfg or SolverConfig(eps_f=1e-11)
    d = model.dim
    x1 = scale * rng.normal((n_pairs, d))
    # half the pairs far apart, half at separations between 1e-2 and 1
    sep = np.where(np.arange(n_pairs) < n_pairs // 2, scale,
                   10.0 ** rng.uniform(n_pairs, -2.0, 0.0))
    x2 = x1 + sep[:, None] * rng.normal((n_pairs, d))
    f = model.forward(np.vstack([x1, x2]), cfg)
    num = np.linalg.norm(f[:n_pairs] - f[n_pairs:], axis=1)
    return num / np.linalg.norm(x1 - x2, axis=1)


def lipschitz_ratio_check(model: FlowModel, n_pairs: int = 10_000, rng: RandomState | None = None,
                          cfg: SolverConfig | None = None) -> BoundReport:
    rng = rng or RandomState(0)
    lo, hi = model_ratio_interval(model)
    r = pairwise_ratios(model, rng, n_pairs, cfg=cfg)
    ok = bool(r.min() >= lo and r.max() <= hi)
    return BoundReport("lipschitz_ratio", [lo, hi], [float(r.min()), float(r.max())], ok,
                       {"n_pairs": n_pairs, "n_blocks": len(model.blocks)})


# -- depth lower bound for residual flows


def theorem3_bound(ell: int, radius: float, slope: float) -> float:
    return 0.5 * radius * (slope - 2 ** ell)


def theorem3_bound_check(ell: int, model: FlowModel, ball: BallSpec | None = None, slope: float = 10.0,
                         slack: float = 0.01, n: int = 2001, cfg: SolverConfig | None = None) -> BoundReport:
    """Sup error of an ``ell``-block residual fit of ``target_1d`` on a ball where its slope is ``slope``."""
    ball = ball or BallSpec([0.5], 0.25)
    if model.dim != 1 or ball.center.size != 1:
        raise ValueError("the depth bound check is one-dimensional")
    c, r = float(ball.center[0]), ball.radius
    if c - r < 0:
        raise ValueError("ball leaves the region x >= 0 where the target has slope 10")
    x = np.linspace(c - r, c + r, n)[:, None]
    err = float(np.max(np.abs(model.forward(x, cfg)[:, 0] - target_1d(x[:, 0]))))
    bound = theorem3_bound(ell, r, slope)
    return BoundReport(f"depth_bound_l{ell}", bound, err, err >= bound - slack,
                       {"ball": [c - r, c + r], "slope": slope, "slack": slack})


# -- informational spectrum sweep for single implicit blocks


def implicit_jacobian(block: ImpBlock, x, cfg: SolverConfig | None = None) -> np.ndarray:
    """``dz/dx = (I + J_gz(z))^-1 (I + J_gx(x))`` per row."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    Z = block.forward(X, cfg or SolverConfig(eps_f=1e-10), mode=None).output
    eye = np.eye(block.dim)
    return np.linalg.solve(eye + block.g_z.jacobian(Z), eye + block.g_x.jacobian(X))


def negative_eigenvalue_sweep(n_blocks: int = 20, n_points: int = 200, rng: RandomState | None = None,
                              c: float = 0.99, hidden: int = 32) -> BoundReport:
    """Search random 2-D implicit blocks for a Jacobian with a negative real eigenvalue.

    Informational only: finding none proves nothing, so ``passed`` is None.
    """
    rng = rng or RandomState(0)
    found, smallest = 0, math.inf
    for _ in range(n_blocks):
        b = ImpBlock(build_mlp(2, hidden, 3, "lipswish", c, rng, init_scale=3.0),
                     build_mlp(2, hidden, 3, "lipswish", c, rng, init_scale=3.0), check=False)
        for J in implicit_jacobian(b, 3.0 * rng.normal((n_points, 2))):
            for e in eig_2x2(J):
                e = complex(e)
                if e.imag == 0:
                    smallest = min(smallest, e.real)
                    found += e.real < 0
    return BoundReport("negative_eigenvalue_search", "none expected", int(found), None,
                       {"smallest_real_eigenvalue": smallest, "blocks": n_blocks, "points": n_points})


# -- numerical sensitivity and estimator audit


def sensitivity_sweep(model: FlowModel, X, eps_values=(1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3),
                      limit: float = 0.02) -> BoundReport:
    """Test NLL (nats) as the forward root tolerance varies; spread must stay within ``limit``."""
    nlls = [model.nll(X, "exact", SolverConfig(eps_f=e)).nats for e in eps_values]
    spread = max(nlls) - min(nlls)
    return BoundReport("eps_f_sensitivity", limit, spread, spread <= limit,
                       {"eps_f": list(eps_values), "nll_nats": nlls})


def estimator_audit(net: LipschitzMlp, x, cfg: EstimatorConfig, n_samples: int = 100_000,
                    rng: RandomState | None = None, z_limit: float = 3.0) -> BoundReport:
    """Mean and standard error of the stochastic log-det estimate against the LU value at ``x``."""
    rng = rng or RandomState(0)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    exact = float(exact_logdet(net.jacobian(x[0])))
    X = np.repeat(x, n_samples, axis=0)
    est = series_logdet_estimate(lambda U, rows: net.vjp_input(X[rows], U).value, net.dim, cfg, rng,
                                 rows=n_samples)
    mean = float(est.mean())
    se = float(est.std(ddof=1) / math.sqrt(n_samples))
    z = abs(mean - exact) / se if se > 0 else (0.0 if mean == exact else math.inf)
    return BoundReport("logdet_estimator", exact, mean, z <= z_limit,
                       {"standard_error": se, "z_score": z, "variance": float(est.var(ddof=1)),
                        "dist": cfg.dist, "n_exact": cfg.n_exact, "n_samples": n_samples})
