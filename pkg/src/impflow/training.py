"""Maximum-likelihood training with Adam, the 1-D regression protocol, and toy data."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import ConvergenceError, ImpBlock, ResBlock
from .flow import LN2, FlowModel
from .lipschitz_net import build_mlp
from .logdet import EstimatorConfig
from .numeric import RandomState, power_iteration_norm
from .numeric import tape as T
from .solvers import SolverConfig

HISTORY_COLUMNS = ("iteration", "nll_nats", "nll_bits", "grad_norm", "solver_evals", "skipped_batches")


# -- data


def target_1d(x):
    """``0.1 x`` for ``x < 0`` and ``10 x`` otherwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x < 0, 0.1 * x, 10.0 * x)
    return float(out) if out.ndim == 0 else out


def checkerboard_parity(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.floor(x[..., 0] / 2) + np.floor(x[..., 1] / 2)) % 2 == 0


def checkerboard_sampler(rng: RandomState, n: int | None = None, bound: float = 4.0):
    """Uniform on the parity-even cells of side 2 in ``[-bound, bound]^2``.

    Accept-reject from the uniform square; returns one point when ``n`` is None.
    """
    want = 1 if n is None else int(n)
    out = np.empty((0, 2))
    while len(out) < want:
        prop = rng.uniform((2 * (want - len(out)) + 16, 2), -bound, bound)
        out = np.vstack([out, prop[checkerboard_parity(prop)]])
    out = out[:want]
    return out[0] if n is None else out


def checkerboard_logp(x, bound: float = 4.0) -> np.ndarray:
    """Exact log-density of the checkerboard data (``-ln 32`` on the support for bound 4)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    inside = np.all(np.abs(x) <= bound, axis=1) & checkerboard_parity(x)
    area = (2 * bound) ** 2 / 2
    return np.where(inside, -math.log(area), -np.inf)


@dataclass
class DatasetSpec:
    kind: str = "checkerboard2d"
    dim: int = 2
    bound: float = 4.0  # checkerboard half-width
    low: float = -1.0  # target1d input range
    high: float = 1.0
    mean: float = 0.0  # gaussian
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("checkerboard2d", "target1d", "gaussian"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "checkerboard2d":
            self.dim = 2
        if self.kind == "target1d":
            self.dim = 1
        if self.bound <= 0 or self.std <= 0 or self.high <= self.low or self.dim < 1:
            raise ValueError("invalid dataset parameters")

    def sample(self, rng: RandomState, n: int) -> np.ndarray:
        if self.kind == "checkerboard2d":
            return checkerboard_sampler(rng, n, self.bound)
        if self.kind == "target1d":
            return rng.uniform((n, 1), self.low, self.high)
        return self.mean + self.std * rng.normal((n, self.dim))


# -- optimisation


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float = 1e-3, weight_decay: float = 0.0,
              project=None) -> list[np.ndarray]:
    """One Adam update with ``grad += weight_decay * param``; returns new arrays.

    ``project`` (called with the new arrays) re-imposes constraints after the step.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch for parameter {i}: {np.shape(p)} vs {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {i} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g + weight_decay * p
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        out.append(p - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    if project is not None:
        out = project(out)
    return out


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 500
    n_iters: int = 5000
    seed: int = 0
    eval_interval: int = 500
    solver: SolverConfig = field(default_factory=SolverConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    sn_iters: int | None = None  # power iterations per projection (None: layer default)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_iters < 0:
            raise ValueError("n_iters must be >= 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (iteration, message)
    seconds: float = 0.0

    @property
    def nll_nats(self) -> np.ndarray:
        return np.array([r["nll_nats"] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _make_projector(model: FlowModel, rng: RandomState, n_iters):
    def project(arrays):
        model.set_params(arrays)
        model.normalize(rng, n_iters)
        return model.params()
    return project


def train_density(model: FlowModel, data: DatasetSpec, cfg: TrainConfig, history_path=None,
                  checkpoint_dir=None, log=None, callback=None) -> TrainHistory:
    """Minimise the mean negative log-likelihood of fresh batches drawn from ``data``.

    A batch whose root solve fails is skipped and counted; training continues.
    """
    if model.dim != data.dim:
        raise ValueError(f"model dim {model.dim} does not match data dim {data.dim}")
    rng = RandomState(cfg.seed)
    data_rng, est_rng, sn_rng = rng.spawn(3)
    state = AdamState.zeros_like(model.params())
    project = _make_projector(model, sn_rng, cfg.sn_iters)
    hist = TrainHistory()
    t0 = time.perf_counter()
    for it in range(1, cfg.n_iters + 1):
        X = data.sample(data_rng, cfg.batch_size)
        params = [T.Tensor(p, requires_grad=True) for p in model.params()]
        try:
            logp, evals = model.traced_logprob(X, params, cfg.solver, cfg.estimator, est_rng)
            loss = -logp.sum() * (1.0 / len(X))
            grads = [g.value for g in T.grad(loss, params)]
        except ConvergenceError as e:
            hist.skipped.append((it, str(e)))
            if log:
                log(f"iteration {it}: skipped batch ({e})")
            continue
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        try:
            new = adam_step(model.params(), grads, state, cfg.lr, cfg.weight_decay, project)
        except FloatingPointError as e:
            raise FloatingPointError(f"iteration {it}: {e} (loss {loss.value!r})") from e
        model.set_params(new)
        nats = float(loss.value)
        hist.rows.append({"iteration": it, "nll_nats": nats, "nll_bits": nats / LN2,
                          "grad_norm": gnorm, "solver_evals": int(evals),
                          "skipped_batches": len(hist.skipped)})
        if it % cfg.eval_interval == 0 or it == cfg.n_iters:
            if log:
                log(f"iteration {it}: nll {nats:.4f} nats ({nats / LN2:.4f} bits)")
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                model.save(Path(checkpoint_dir) / f"model_{it:06d}.json")
            if callback is not None:
                callback(it, model)
    hist.seconds = time.perf_counter() - t0
    if history_path is not None:
        hist.to_csv(history_path)
    return hist


# -- 1-D regression


@dataclass
class RegressionConfig:
    kind: str = "res"  # "res" or "imp"
    n_blocks: int = 1
    hidden: int = 128
    n_layers: int = 4
    c: float = 0.99
    activation_name: str = "relu"
    n_power_iters: int = 200
    spectral: str = "reparam"  # "reparam" or "project"
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 1000
    window: int = 1000
    rel_improvement: float = 1e-4
    max_iters: int = 5000  # iteration budget; the plateau rule usually does not fire first
    n_eval: int = 100_000
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.kind not in ("res", "imp"):
            raise ValueError("kind must be 'res' or 'imp'")
        if self.spectral not in ("reparam", "project"):
            raise ValueError("spectral must be 'reparam' or 'project'")
        if self.n_blocks < 1 or self.batch_size < 1 or self.window < 1:
            raise ValueError("n_blocks, batch_size and window must be >= 1")


@dataclass
class RegressionResult:
    mse: float
    sup_error: float
    n_iters: int
    window_losses: list
    model: FlowModel
    seconds: float = 0.0


def sup_error(model: FlowModel, lo: float = 0.25, hi: float = 0.75, n: int = 2001,
              cfg: SolverConfig | None = None) -> float:
    x = np.linspace(lo, hi, n)[:, None]
    return float(np.max(np.abs(model.forward(x, cfg)[:, 0] - target_1d(x[:, 0]))))


def build_regression_model(cfg: RegressionConfig, rng: RandomState) -> FlowModel:
    def net():
        return build_mlp(1, cfg.hidden, cfg.n_layers, cfg.activation_name, cfg.c, rng,
                         n_power_iters=cfg.n_power_iters)

    if cfg.kind == "res":
        return FlowModel([ResBlock(net(), check=False) for _ in range(cfg.n_blocks)], 1)
    return FlowModel([ImpBlock(net(), net(), check=False) for _ in range(cfg.n_blocks)], 1)


class SpectralReparam:
    """Raw weights ``V`` mapped to ``W = V * min(1, c / sigma(V))`` with the gradient taken through sigma.

    Biases pass through.  ``sigma`` and its singular vectors come from warm-started
    power iteration, so ``d sigma / d V = u v^T``.
    """

    def __init__(self, model: FlowModel, rng: RandomState, n_iters: int = 200):
        self.layers = [layer for net in model.nets for layer in net.layers]
        self.raw = model.params()
        self.rng, self.n_iters = rng, n_iters
        self._cache = []

    def effective(self) -> list[np.ndarray]:
        out, self._cache = [], []
        for layer, V, b in zip(self.layers, self.raw[0::2], self.raw[1::2]):
            res = power_iteration_norm(V, self.n_iters, 1e-6, self.rng, v0=layer.v)
            layer.u, layer.v = res.u, res.v
            if res.sigma > layer.c:
                out.append(V * (layer.c / res.sigma))
                self._cache.append((res.sigma, res.u, res.v))
            else:
                out.append(V)
                self._cache.append(None)
            out.append(b)
        return out

    def backward(self, grads) -> list[np.ndarray]:
        """Map gradients w.r.t. the effective weights to gradients w.r.t. the raw ones."""
        grads = list(grads)
        for i, (layer, info) in enumerate(zip(self.layers, self._cache)):
            if info is None:
                continue
            sigma, u, v = info
            G, V = grads[2 * i], self.raw[2 * i]
            grads[2 * i] = (layer.c / sigma) * G - (layer.c * np.sum(G * V) / sigma ** 2) * np.outer(u, v)
        return grads


def fit_1d_regression(cfg: RegressionConfig, log=None) -> RegressionResult:
    """Fit ``f_theta`` to ``target_1d`` on ``U(-1, 1)`` by squared error.

    Stops once the mean loss over a window of ``cfg.window`` iterations improves
    on the previous window by less than ``cfg.rel_improvement`` (relative).
    """
    rng = RandomState(cfg.seed)
    init_rng, data_rng, sn_rng, eval_rng = rng.spawn(4)
    model = build_regression_model(cfg, init_rng)
    state = AdamState.zeros_like(model.params())
    reparam = SpectralReparam(model, sn_rng, cfg.n_power_iters) if cfg.spectral == "reparam" else None
    project = None if reparam else _make_projector(model, sn_rng, None)
    if reparam:
        model.set_params(reparam.effective())
    windows, acc, prev = [], 0.0, None
    t0 = time.perf_counter()
    it = 0
    while it < cfg.max_iters:
        it += 1
        X = data_rng.uniform((cfg.batch_size, 1), -1.0, 1.0)
        Y = target_1d(X)
        params = [T.Tensor(p, requires_grad=True) for p in model.params()]
        out = model.traced_map(X, params, cfg.solver)
        r = out - Y
        loss = (r * r).sum() * (1.0 / len(X))
        grads = [g.value for g in T.grad(loss, params)]
        if reparam:
            reparam.raw = adam_step(reparam.raw, reparam.backward(grads), state, cfg.lr, cfg.weight_decay)
            model.set_params(reparam.effective())
        else:
            model.set_params(adam_step(model.params(), grads, state, cfg.lr, cfg.weight_decay, project))
        acc += float(loss.value)
        if it % cfg.window == 0:
            cur = acc / cfg.window
            windows.append(cur)
            acc = 0.0
            if log:
                log(f"iteration {it}: window mse {cur:.5f}")
            if prev is not None and (prev - cur) / prev < cfg.rel_improvement:
                break
            prev = cur
    Xe = eval_rng.uniform((cfg.n_eval, 1), -1.0, 1.0)
    mse = float(np.mean((model.forward(Xe, cfg.solver) - target_1d(Xe)) ** 2))
    return RegressionResult(mse, sup_error(model, cfg=cfg.solver), it, windows, model,
                            time.perf_counter() - t0)
