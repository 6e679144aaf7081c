"""Exact and unbiased stochastic evaluation of ``ln det(I + J_g)`` and its gradients.

The stochastic estimator truncates the power series

    ln det(I + J) = sum_{k>=1} (-1)^(k+1)/k tr(J^k)

at a random index ``n ~ p(N)`` (Russian roulette) and replaces traces by
Hutchinson probes ``v^T J^k v``.  The first ``n_exact`` terms are always
included with weight 1; later terms ``K + j`` (j = 1..n) are reweighted by
``1 / P(N >= j)``.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .lipschitz_net import LipschitzMlp
from .numeric import RandomState, lu_logdet
from .numeric import tape as T


class ContractionGuardError(ValueError):
    """The Jacobian violates ``||J||_2 < 1``."""


@dataclass
class EstimatorConfig:
    dist: str = "geometric"
    p: float = 0.5
    lam: float = 2.0
    n_exact: int = 0
    probes_per_sample: int = 1
    mode: str = "exact"

    def __post_init__(self):
        if self.dist not in ("geometric", "poisson"):
            raise ValueError(f"dist must be 'geometric' or 'poisson', got {self.dist!r}")
        if self.dist == "geometric" and not 0.0 < self.p <= 1.0:
            raise ValueError("geometric p must lie in (0, 1]")
        if self.dist == "poisson" and not self.lam > 0:
            raise ValueError("poisson lam must be positive")
        if self.n_exact < 0:
            raise ValueError("n_exact must be >= 0")
        if self.probes_per_sample < 1:
            raise ValueError("probes_per_sample must be >= 1")
        if self.mode not in ("exact", "stochastic"):
            raise ValueError(f"mode must be 'exact' or 'stochastic', got {self.mode!r}")

    def tail_prob(self, k):
        """``P(N >= k)`` for the truncation law (supported on 1, 2, ...)."""
        k = np.asarray(k, dtype=np.float64)
        if self.dist == "geometric":
            return np.where(k <= 1, 1.0, (1.0 - self.p) ** np.maximum(k - 1, 0))
        # N = 1 + Poisson(lam), so P(N >= k) = P(Poisson >= k - 1)
        return np.where(k <= 1, 1.0, stats.poisson.sf(k - 2, self.lam))

    def draw_n(self, rng: RandomState, size):
        if self.dist == "geometric":
            return np.asarray(rng.geometric(self.p, size), dtype=np.int64)
        return 1 + np.asarray(rng.poisson(self.lam, size), dtype=np.int64)


@dataclass
class SeriesSample:
    n: np.ndarray  # (rows,) truncation indices
    v: np.ndarray  # (rows, d) probes

    def weights(self, cfg: EstimatorConfig, row: int = 0) -> np.ndarray:
        """Weights ``w_k`` (k = 1 .. K + n) of the log-det series for one row."""
        K = cfg.n_exact
        k = np.arange(1, K + int(self.n[row]) + 1)
        return np.where(k <= K, 1.0, 1.0 / cfg.tail_prob(k - K))


def draw_series_sample(cfg: EstimatorConfig, rng: RandomState, rows: int, d: int) -> SeriesSample:
    n = cfg.draw_n(rng, rows)
    v = rng.normal((rows, d))
    return SeriesSample(n, v)


def logdet_weight(cfg: EstimatorConfig, k: int, n: np.ndarray) -> np.ndarray:
    """Per-row weight of series term ``k`` (k >= 1); zero once the row has stopped."""
    K = cfg.n_exact
    if k <= K:
        return np.ones(n.shape)
    j = k - K
    return np.where(j <= n, 1.0 / cfg.tail_prob(j), 0.0)


def grad_weight(cfg: EstimatorConfig, m: int, n: np.ndarray) -> np.ndarray:
    """Per-row weight of the gradient series term ``m`` (m >= 0).

    Terms ``m <= K`` are exact; ``m = K + j`` is kept while ``j <= n`` with
    weight ``1 / P(N >= j)``.  With ``K = 0`` this is the usual Neumann
    gradient series with ``P(N >= 0) = 1``.
    """
    K = cfg.n_exact
    if m <= K:
        return np.ones(n.shape)
    j = m - K
    return np.where(j <= n, 1.0 / cfg.tail_prob(j), 0.0)


def _check_contraction(J):
    J = np.asarray(J, dtype=np.float64)
    norms = np.linalg.norm(J, 2, axis=(-2, -1))
    if np.any(norms >= 1.0):
        raise ContractionGuardError(f"||J||_2 = {float(np.max(norms)):.6g} >= 1")
    return J


def exact_logdet(J) -> float | np.ndarray:
    """``ln det(I + J)`` for ``||J||_2 < 1``; batched over leading axes."""
    J = _check_contraction(J)
    if J.ndim == 2:
        sign, ld = lu_logdet(np.eye(J.shape[0]) + J)
        return ld
    sign, ld = np.linalg.slogdet(np.eye(J.shape[-1]) + J)
    return ld


def _as_rowwise(vjp):
    try:
        n_args = len(inspect.signature(vjp).parameters)
    except (TypeError, ValueError):
        n_args = 1
    if n_args >= 2:
        return vjp
    return lambda U, idx: vjp(U)


def series_logdet_estimate(vjp, d: int, cfg: EstimatorConfig, rng: RandomState | None = None,
                           rows: int = 1, sample: SeriesSample | None = None):
    """Unbiased estimate of ``ln det(I + J)`` per row.

    ``vjp(U)`` (or ``vjp(U, rows)``) returns the rows ``u_i^T J_i``.  Each
    row uses its own ``(n, v)`` draw unless ``sample`` supplies them.  With
    ``probes_per_sample > 1`` several independent draws are averaged.
    """
    if sample is None:
        P = cfg.probes_per_sample
        total = np.zeros(rows)
        for _ in range(P):
            total += _series_value(vjp, cfg, draw_series_sample(cfg, rng, rows, d))
        return total / P
    return _series_value(vjp, cfg, sample)


def _series_value(vjp, cfg: EstimatorConfig, sample: SeriesSample) -> np.ndarray:
    call = _as_rowwise(vjp)
    V = np.asarray(sample.v, dtype=np.float64)
    n = np.asarray(sample.n)
    rows = V.shape[0]
    est = np.zeros(rows)
    W = V.copy()
    kmax = cfg.n_exact + int(n.max()) if rows else 0
    all_rows = np.arange(rows)
    for k in range(1, kmax + 1):
        w = logdet_weight(cfg, k, n)
        live = np.flatnonzero(w > 0)
        if live.size == 0:
            break
        idx = all_rows[live]
        W[idx] = call(W[idx], idx)
        sgn = 1.0 if k % 2 == 1 else -1.0
        est[idx] += sgn / k * w[idx] * np.einsum("ij,ij->i", W[idx], V[idx])
    return est


def series_logdet_surrogate(net: LipschitzMlp, x: T.Tensor, params, cfg: EstimatorConfig,
                            rng: RandomState | None = None,
                            sample: SeriesSample | None = None) -> T.Tensor:
    """Taped per-row log-det estimate whose gradient is the unbiased gradient estimator.

    The value equals the series estimate; differentiating it yields
    ``u^T (dJ) v`` with ``u = sum_m w_m (-1)^m v^T J^m`` held fixed, i.e.
    the Neumann gradient series truncated by the same roulette draw.
    """
    x = T.as_tensor(x)
    rows, d = x.shape
    if sample is None:
        sample = draw_series_sample(cfg, rng, rows, d)
    V = np.asarray(sample.v, dtype=np.float64)
    n = np.asarray(sample.n)
    xv = x.value
    consts = [T.Tensor(p.value) for p in params]

    def vjp(U, idx):
        return net.vjp_input(xv[idx], U, consts).value

    value = np.zeros(rows)
    U = grad_weight(cfg, 0, n)[:, None] * V
    W = V.copy()
    kmax = cfg.n_exact + int(n.max())
    all_rows = np.arange(rows)
    with T.no_grad():
        for k in range(1, kmax + 1):
            wl = logdet_weight(cfg, k, n)
            wg = grad_weight(cfg, k, n)
            live = np.flatnonzero((wl > 0) | (wg > 0))
            if live.size == 0:
                break
            idx = all_rows[live]
            W[idx] = vjp(W[idx], idx)
            sgn = 1.0 if k % 2 == 1 else -1.0
            value[idx] += sgn / k * wl[idx] * np.einsum("ij,ij->i", W[idx], V[idx])
            # gradient series term m = k carries (-1)^k
            U[idx] += (-sgn) * wg[idx, None] * W[idx]
    with T._grad_mode(True):
        xt = x if x.requires_grad else T.Tensor(xv, True)
        uJ = net.vjp_input(xt, U, params, create_graph=True)
        s = (uJ * V).sum(axis=1)
    return s - T.detach(s) + value


def taped_logdet(net: LipschitzMlp, x, params, cfg: EstimatorConfig,
                 rng: RandomState | None = None, sample: SeriesSample | None = None) -> T.Tensor:
    """Per-row ``ln det(I + J_g(x))`` on the tape, exact (LU) or stochastic."""
    if cfg.mode == "exact":
        J = net.traced_jacobian(x, params)
        d = J.shape[-1]
        return T.logdet(J + np.eye(d))
    return series_logdet_surrogate(net, x, params, cfg, rng, sample)


def series_logdet_grad_estimate(net: LipschitzMlp, x, cfg: EstimatorConfig,
                                rng: RandomState | None = None,
                                sample: SeriesSample | None = None):
    """Gradient estimate of ``sum_rows ln det(I + J_g(x_i))``.

    Returns ``(param_grads, input_grad)`` as ndarrays.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    params = net.param_tensors()
    xt = T.Tensor(x, True)
    sur = series_logdet_surrogate(net, xt, params, cfg, rng, sample)
    grads = T.grad(sur.sum(), params + [xt])
    return [g.value for g in grads[:-1]], grads[-1].value


def exact_logdet_grad_oracle(net: LipschitzMlp, x, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``sum_rows exact_logdet`` over the flat parameters."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if net.dim > 64 or net.n_params > 10_000:
        raise ValueError("finite-difference oracle limited to d <= 64 and <= 10000 parameters")
    flat = net.get_flat()
    out = np.zeros_like(flat)
    work = net.copy()
    for i in range(flat.size):
        fp = flat.copy()
        fp[i] += step
        work.set_flat(fp)
        lp = np.sum(exact_logdet(work.jacobian(x)))
        fp[i] -= 2 * step
        work.set_flat(fp)
        lm = np.sum(exact_logdet(work.jacobian(x)))
        out[i] = (lp - lm) / (2 * step)
    return out
