"""Spectrally normalised MLPs ``g: R^d -> R^d`` with Lip(g) <= c^(#linear layers)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .numeric import RandomState, power_iteration_norm
from .numeric import tape as T

MAX_JACOBIAN_DIM = 64

TWO_PI = 2.0 * math.pi


def _relu(x, k):
    if k == 0:
        return np.maximum(x, 0.0)
    if k == 1:
        # subgradient at 0 taken as 0
        return (x > 0).astype(np.float64)
    return np.zeros_like(x)


def _sigmoid_derivs(x, kmax):
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    out = [s]
    if kmax >= 1:
        s1 = s * (1.0 - s)
        out.append(s1)
    if kmax >= 2:
        s2 = s1 * (1.0 - 2.0 * s)
        out.append(s2)
    if kmax >= 3:
        out.append(s2 * (1.0 - 2.0 * s) - 2.0 * s1 * s1)
    if kmax >= 4:
        s3 = out[3]
        out.append(s3 * (1.0 - 2.0 * s) - 6.0 * s1 * s2)
    if kmax >= 5:
        raise NotImplementedError("LipSwish derivatives above order 4")
    return out


def _lipswish(x, k):
    # f = x s(x) / 1.1, f^(k) = (k s^(k-1) + x s^(k)) / 1.1
    s = _sigmoid_derivs(x, k)
    if k == 0:
        return x * s[0] / 1.1
    return (k * s[k - 1] + x * s[k]) / 1.1


def _sine(x, k):
    # f = sin(2 pi x) / (2 pi)
    return TWO_PI ** (k - 1) * np.sin(TWO_PI * x + 0.5 * k * math.pi)


ACTIVATIONS = {"relu": _relu, "lipswish": _lipswish, "sine": _sine}


def activation(name: str):
    try:
        return ACTIVATIONS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


_COLD_ROUNDS = 10


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    c: float = 0.9
    n_power_iters: int = 200
    tol: float = 1e-3
    u: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.c <= 1.0:
            raise ValueError(f"Lipschitz coefficient must lie in (0, 1], got {self.c}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)

    @property
    def shape(self):
        return self.weight.shape


def spectral_normalize(layer: LinearLayer, rng: RandomState | None = None,
                       n_iters: int | None = None) -> np.ndarray:
    """Project ``layer.weight`` onto ``sigma <= c`` and return the new weight.

    ``W <- W * min(1, c / sigma_hat)``; the singular-vector estimate is kept
    on the layer so the next call warm-starts.  A cold start runs the full
    iteration budget.
    """
    iters = layer.n_power_iters if n_iters is None else n_iters
    # a cold start can pause near a smaller singular value when the top two are close,
    # which the stop rule cannot see, so it spends whole budgets until the rule is met
    cold = layer.v is None
    res = power_iteration_norm(layer.weight, iters, layer.tol, rng, v0=layer.v, min_iters=iters if cold else 0)
    rounds = 1
    while cold and not res.converged and rounds < _COLD_ROUNDS:
        res = power_iteration_norm(layer.weight, iters, layer.tol, v0=res.v, min_iters=iters)
        rounds += 1
    layer.u, layer.v = res.u, res.v
    if res.sigma > layer.c:
        layer.weight = layer.weight * (layer.c / res.sigma)
    return layer.weight


class LipschitzMlp:
    """Alternating linear layers and a 1-Lipschitz activation; no activation after the last layer."""

    def __init__(self, layers: list[LinearLayer], activation_name: str = "lipswish"):
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError(f"layer shapes {a.shape} -> {b.shape} do not chain")
        if layers[0].shape[1] != layers[-1].shape[0]:
            raise ValueError("input and output dimensions must match")
        self.layers = layers
        self.activation_name = activation_name.lower()
        self._act = activation(activation_name)

    @property
    def dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def n_linear(self) -> int:
        return len(self.layers)

    @property
    def kappa(self) -> float:
        """Nominal Lipschitz bound c_1 * ... * c_L."""
        return math.prod(layer.c for layer in self.layers)

    def lipschitz_bound(self) -> float:
        """Product of the layers' exact spectral norms (an upper bound on Lip(g))."""
        return math.prod(float(np.linalg.norm(layer.weight, 2)) for layer in self.layers)

    def normalize(self, rng: RandomState | None = None, n_iters: int | None = None) -> None:
        for layer in self.layers:
            spectral_normalize(layer, rng, n_iters)

    # -- parameters

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def set_params(self, arrays) -> None:
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.layers):
            raise ValueError("wrong number of parameter arrays")
        for i, layer in enumerate(self.layers):
            W, b = np.asarray(arrays[2 * i], float), np.asarray(arrays[2 * i + 1], float)
            if W.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ValueError("parameter shape mismatch")
            layer.weight, layer.bias = W.copy(), b.copy()

    def param_tensors(self) -> list[T.Tensor]:
        return [T.Tensor(p, requires_grad=True) for p in self.params()]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        out, i = [], 0
        for p in self.params():
            out.append(flat[i:i + p.size].reshape(p.shape))
            i += p.size
        self.set_params(out)

    def copy(self) -> "LipschitzMlp":
        layers = [LinearLayer(l.weight.copy(), l.bias.copy(), l.c, l.n_power_iters, l.tol,
                              None if l.u is None else l.u.copy(),
                              None if l.v is None else l.v.copy()) for l in self.layers]
        return LipschitzMlp(layers, self.activation_name)

    # -- numpy evaluation

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected last dimension {self.dim}, got {x.shape}")
        if np.isnan(x).any():
            raise ValueError("input contains NaN")
        return x

    def __call__(self, x):
        x = self._check(x)
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = h @ layer.weight.T + layer.bias
            if i < last:
                h = self._act(h, 0)
        return h

    def jacobian(self, x):
        """Exact J_g(x); shape (d, d) for one point or (n, d, d) for a batch."""
        x = self._check(x)
        if self.dim > MAX_JACOBIAN_DIM:
            raise ValueError(f"dense Jacobian limited to d <= {MAX_JACOBIAN_DIM}")
        single = x.ndim == 1
        X = x[None] if single else x
        n, d = X.shape
        h = X
        JT = None  # rows of J^T per sample, stacked as (n * d, width)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            a = h @ layer.weight.T + layer.bias
            if i < last:
                D = self._act(a, 1)
                if JT is None:
                    JT = (layer.weight.T[None] * D[:, None, :]).reshape(n * d, -1)
                else:
                    JT = ((JT @ layer.weight.T).reshape(n, d, -1) * D[:, None, :]).reshape(n * d, -1)
                h = self._act(a, 0)
            elif JT is None:
                J = np.broadcast_to(layer.weight, (n, d, d)).copy()
            else:
                J = np.swapaxes((JT @ layer.weight.T).reshape(n, d, d), 1, 2)
        return J[0] if single else J

    # -- taped evaluation

    def traced(self, x, params=None) -> T.Tensor:
        """Forward pass recorded on the tape; ``x`` is (n, d)."""
        params = self.param_tensors() if params is None else params
        h = T.as_tensor(x)
        last = len(self.layers) - 1
        for i in range(len(self.layers)):
            W, b = params[2 * i], params[2 * i + 1]
            h = T.matmul(h, T.mT(W)) + b
            if i < last:
                h = T.unary(h, self._act, 0)
        return h

    def traced_with_jacobian(self, x, params=None):
        """Taped ``(g(x), J_g(x))`` sharing one pass; the Jacobian is forward mode, (n, d, d)."""
        if self.dim > MAX_JACOBIAN_DIM:
            raise ValueError(f"dense Jacobian limited to d <= {MAX_JACOBIAN_DIM}")
        params = self.param_tensors() if params is None else params
        h = T.as_tensor(x)
        n, d = h.shape
        JT = None
        last = len(self.layers) - 1
        for i in range(len(self.layers)):
            W, b = params[2 * i], params[2 * i + 1]
            Wt = T.mT(W)
            a = T.matmul(h, Wt) + b
            if i < last:
                D = T.reshape(T.unary(a, self._act, 1), (n, 1, W.shape[0]))
                if JT is None:
                    JT = T.reshape(Wt, (1, d, W.shape[0])) * D
                else:
                    JT = T.reshape(T.matmul(JT, Wt), (n, d, W.shape[0])) * D
                JT = T.reshape(JT, (n * d, W.shape[0]))
                h = T.unary(a, self._act, 0)
            else:
                h = a
                if JT is None:
                    J = T.broadcast_to(W, (n, d, d))
                else:
                    J = T.mT(T.reshape(T.matmul(JT, Wt), (n, d, d)))
        return h, J

    def traced_jacobian(self, x, params=None) -> T.Tensor:
        """Forward-mode Jacobian (n, d, d) built from taped operations."""
        return self.traced_with_jacobian(x, params)[1]

    def vjp_input(self, x, u, params=None, create_graph: bool = False) -> T.Tensor:
        """Rows ``u_i^T J_g(x_i)``.  With ``create_graph`` the result stays on the tape."""
        xt = x if isinstance(x, T.Tensor) and x.requires_grad else T.Tensor(T.as_tensor(x).value, True)
        with T._grad_mode(True):
            out = self.traced(xt, params)
        (g,) = T.grad(out, [xt], grad_output=u, create_graph=create_graph)
        return g

    # -- checkpoints

    def to_dict(self) -> dict:
        return {
            "format": "impflow.mlp",
            "version": 1,
            "dims": [self.layers[0].shape[1]] + [l.shape[0] for l in self.layers],
            "activation": self.activation_name,
            "c": [l.c for l in self.layers],
            "layers": [{"rows": l.shape[0], "cols": l.shape[1],
                        "weight": l.weight.ravel().tolist(), "bias": l.bias.tolist()}
                       for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LipschitzMlp":
        if d.get("format") != "impflow.mlp" or d.get("version") != 1:
            raise ValueError("not an impflow.mlp v1 checkpoint")
        layers = []
        for spec, c in zip(d["layers"], d["c"]):
            W = np.asarray(spec["weight"], dtype=np.float64).reshape(spec["rows"], spec["cols"])
            layers.append(LinearLayer(W, np.asarray(spec["bias"], dtype=np.float64), c))
        return cls(layers, d["activation"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def build_mlp(dim: int, hidden: int = 128, n_layers: int = 4, activation_name: str = "lipswish",
              c: float = 0.9, rng: RandomState | None = None, n_power_iters: int = 200,
              tol: float = 1e-3, init_scale: float = 1.0) -> LipschitzMlp:
    """Random MLP: weights and biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)), then normalised."""
    rng = rng if rng is not None else RandomState(0)
    sizes = [dim] + [hidden] * (n_layers - 1) + [dim]
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = init_scale / math.sqrt(fan_in)
        W = rng.uniform((fan_out, fan_in), -bound, bound)
        b = rng.uniform(fan_out, -bound, bound)
        layers.append(LinearLayer(W, b, c, n_power_iters, tol))
    net = LipschitzMlp(layers, activation_name)
    net.normalize(rng)
    return net


def linear_mlp(A, c: float = 1.0) -> LipschitzMlp:
    """``g(x) = A x`` as a one-layer network (weights taken as given)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    return LipschitzMlp([LinearLayer(A, np.zeros(A.shape[0]), c)], "relu")


def zero_mlp(dim: int, hidden: int = 8, n_layers: int = 2, activation_name: str = "lipswish") -> LipschitzMlp:
    sizes = [dim] + [hidden] * (n_layers - 1) + [dim]
    layers = [LinearLayer(np.zeros((o, i)), np.zeros(o), 1.0) for i, o in zip(sizes, sizes[1:])]
    return LipschitzMlp(layers, activation_name)


def mlp_forward(net: LipschitzMlp, x):
    return net(x)


def mlp_jacobian(net: LipschitzMlp, x):
    return net.jacobian(x)


def mlp_vjp_input(net: LipschitzMlp, x, u):
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != x.shape:
        raise ValueError(f"u shape {u.shape} does not match x shape {x.shape}")
    single = x.ndim == 1
    g = net.vjp_input(x[None] if single else x, u[None] if single else u)
    return g.value[0] if single else g.value


def empirical_lipschitz(net: LipschitzMlp, rng: RandomState, n_pairs: int = 1000,
                        scale: float = 2.0) -> float:
    """Largest observed ||g(x1) - g(x2)|| / ||x1 - x2|| over random pairs.

    Half the pairs are far apart, half are close (to probe local slopes).
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    d = net.dim
    x1 = scale * rng.normal((n_pairs, d))
    far = scale * rng.normal((n_pairs, d))
    near = x1 + 1e-3 * rng.normal((n_pairs, d))
    x2 = np.where((np.arange(n_pairs) % 2 == 0)[:, None], far, near)
    num = np.linalg.norm(net(x1) - net(x2), axis=1)
    den = np.linalg.norm(x1 - x2, axis=1)
    ok = den > 0
    return float(np.max(num[ok] / den[ok])) if ok.any() else 0.0
