import math

import numpy as np
import pytest

from impflow.lipschitz_net import (LinearLayer, LipschitzMlp, build_mlp, empirical_lipschitz, linear_mlp,
                                   mlp_forward, mlp_jacobian, mlp_vjp_input, spectral_normalize, zero_mlp)
from impflow.numeric import RandomState
from impflow.numeric import tape as T
from impflow.theory import construct_exact_impflow_1d


def brute_force_norm(M, steps=10_000):
    v = np.ones(M.shape[1]) / math.sqrt(M.shape[1])
    for _ in range(steps):
        w = M.T @ (M @ v)
        v = w / np.linalg.norm(w)
    return float(np.linalg.norm(M @ v))


def fd_jacobian(f, x, h=1e-6):
    d = x.size
    J = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (f(x + e) - f(x - e)) / (2 * h)
    return J


class TestSpectralNormalize:
    def test_scales_down(self):
        layer = LinearLayer(np.diag([2.0, 2.0]), np.zeros(2), c=0.9)
        W = spectral_normalize(layer, RandomState(0))
        np.testing.assert_allclose(W, np.diag([0.9, 0.9]), atol=1e-9)

    def test_no_op_below_c(self):
        W0 = np.array([[0.5, 0.0], [0.0, 0.2]])
        layer = LinearLayer(W0.copy(), np.zeros(2), c=0.9)
        np.testing.assert_array_equal(spectral_normalize(layer, RandomState(0)), W0)

    def test_random_16x16_within_tolerance(self):
        rng = RandomState(3)
        for _ in range(20):
            layer = LinearLayer(rng.normal((16, 16)), np.zeros(16), c=0.99)
            W = spectral_normalize(layer, rng)
            assert brute_force_norm(W) <= 0.99 * (1 + 1e-3)

    def test_warm_start_vectors_persist(self):
        rng = RandomState(1)
        layer = LinearLayer(rng.normal((6, 4)), np.zeros(6), c=0.5)
        spectral_normalize(layer, rng)
        assert layer.v is not None and layer.v.shape == (4,)
        assert layer.u.shape == (6,)

    def test_rejects_bad_c(self):
        with pytest.raises(ValueError):
            LinearLayer(np.eye(2), np.zeros(2), c=1.5)
        with pytest.raises(ValueError):
            LinearLayer(np.eye(2), np.zeros(2), c=0.0)


    def test_close_top_singular_values(self):
        # cold starts on matrices whose top two singular values nearly coincide
        rng = RandomState(12)
        for _ in range(200):
            Q1, _ = np.linalg.qr(rng.normal((8, 8)))
            Q2, _ = np.linalg.qr(rng.normal((8, 8)))
            s = np.array([3.0, 3.0 * rng.uniform((), 0.95, 0.999)] + list(rng.uniform(6, 0.0, 2.0)))
            layer = LinearLayer(Q1 @ np.diag(s) @ Q2.T, np.zeros(8), 0.9)
            spectral_normalize(layer, rng)
            assert np.linalg.norm(layer.weight, 2) <= 0.9 * (1 + 1e-3)


class TestMlpForward:
    def test_zero_net(self):
        net = zero_mlp(3)
        np.testing.assert_array_equal(mlp_forward(net, np.array([1.0, -2.0, 3.0])), np.zeros(3))

    def test_zero_weights_pass_bias_through(self):
        layers = [LinearLayer(np.zeros((4, 2)), np.ones(4), 1.0),
                  LinearLayer(np.zeros((2, 4)), np.array([0.3, -0.2]), 1.0)]
        net = LipschitzMlp(layers, "relu")
        np.testing.assert_allclose(net(np.array([5.0, 7.0])), [0.3, -0.2])

    def test_single_identity_layer(self):
        net = linear_mlp(np.eye(3))
        x = np.array([-1.0, 0.5, 2.0])
        np.testing.assert_array_equal(net(x), x)

    def test_batched_matches_rows(self):
        net = build_mlp(3, 16, 3, "lipswish", 0.9, RandomState(2))
        X = RandomState(3).normal((5, 3))
        np.testing.assert_allclose(net(X), np.stack([net(x) for x in X]), atol=1e-14)

    def test_dimension_mismatch(self):
        net = build_mlp(2, 8, 2, "relu", 0.9, RandomState(0))
        with pytest.raises(ValueError):
            net(np.zeros(3))

    def test_nan_rejected(self):
        net = build_mlp(2, 8, 2, "relu", 0.9, RandomState(0))
        with pytest.raises(ValueError):
            net(np.array([np.nan, 0.0]))

    def test_shapes_must_chain(self):
        with pytest.raises(ValueError):
            LipschitzMlp([LinearLayer(np.zeros((4, 2)), np.zeros(4)), LinearLayer(np.zeros((2, 3)), np.zeros(2))])

    def test_traced_matches_numpy(self):
        net = build_mlp(2, 8, 3, "sine", 0.9, RandomState(4))
        X = RandomState(5).normal((4, 2))
        np.testing.assert_allclose(net.traced(X).value, net(X), atol=1e-14)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            build_mlp(2, 8, 2, "tanhh")


class TestMlpJacobian:
    def test_linear(self):
        A = np.array([[0.2, -0.1], [0.3, 0.4]])
        net = linear_mlp(A)
        for x in RandomState(0).normal((5, 2)):
            np.testing.assert_allclose(mlp_jacobian(net, x), A, atol=1e-15)

    def test_construction_gx_inactive(self):
        g_x = construct_exact_impflow_1d().g_x
        np.testing.assert_array_equal(mlp_jacobian(g_x, np.array([1.0])), [[0.0]])

    @pytest.mark.parametrize("act", ["lipswish", "sine", "relu"])
    @pytest.mark.parametrize("n_layers", [1, 2, 4])
    def test_finite_differences(self, act, n_layers):
        net = build_mlp(3, 12, n_layers, act, 0.9, RandomState(n_layers))
        for x in RandomState(10 + n_layers).normal((3, 3)):
            np.testing.assert_allclose(mlp_jacobian(net, x), fd_jacobian(net, x), atol=1e-6)

    def test_batched_shape(self):
        net = build_mlp(2, 8, 3, "lipswish", 0.9, RandomState(0))
        assert net.jacobian(np.zeros((7, 2))).shape == (7, 2, 2)

    def test_traced_jacobian_matches(self):
        net = build_mlp(2, 8, 3, "lipswish", 0.9, RandomState(6))
        X = RandomState(7).normal((4, 2))
        np.testing.assert_allclose(net.traced_jacobian(X).value, net.jacobian(X), atol=1e-13)
        out, J = net.traced_with_jacobian(X)
        np.testing.assert_allclose(out.value, net(X), atol=1e-14)
        np.testing.assert_allclose(J.value, net.jacobian(X), atol=1e-13)


class TestMlpVjp:
    def test_zero_cotangent(self):
        net = build_mlp(3, 8, 3, "lipswish", 0.9, RandomState(0))
        np.testing.assert_array_equal(mlp_vjp_input(net, np.ones(3), np.zeros(3)), np.zeros(3))

    def test_linear(self):
        A = np.array([[0.2, -0.1], [0.3, 0.4]])
        u = np.array([1.5, -2.0])
        np.testing.assert_allclose(mlp_vjp_input(linear_mlp(A), np.zeros(2), u), u @ A, atol=1e-15)

    def test_matches_dense_jacobian(self):
        rng = RandomState(8)
        net = build_mlp(4, 16, 4, "sine", 0.95, rng)
        X, U = rng.normal((6, 4)), rng.normal((6, 4))
        ref = np.einsum("ni,nij->nj", U, net.jacobian(X))
        np.testing.assert_allclose(mlp_vjp_input(net, X, U), ref, atol=1e-10)

    def test_shape_mismatch(self):
        net = build_mlp(2, 8, 2, "relu", 0.9, RandomState(0))
        with pytest.raises(ValueError):
            mlp_vjp_input(net, np.zeros(2), np.zeros(3))

    def test_param_gradient_of_vjp(self):
        # d/dW of u^T J v through create_graph, against central differences
        rng = RandomState(9)
        net = build_mlp(2, 6, 2, "lipswish", 0.9, rng)
        x, u, v = rng.normal((1, 2)), rng.normal((1, 2)), rng.normal(2)
        params = net.param_tensors()
        s = (net.vjp_input(x, u, params, create_graph=True) * v).sum()
        g = T.grad(s, params)[0].value
        W0 = net.layers[0].weight.copy()
        fd = np.zeros_like(W0)
        for idx in np.ndindex(*W0.shape):
            vals = []
            for sgn in (1, -1):
                net.layers[0].weight = W0.copy()
                net.layers[0].weight[idx] += sgn * 1e-5
                vals.append(float(u[0] @ net.jacobian(x[0]) @ v))
            fd[idx] = (vals[0] - vals[1]) / 2e-5
        net.layers[0].weight = W0
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


class TestEmpiricalLipschitz:
    def test_linear_half(self):
        assert empirical_lipschitz(linear_mlp(0.5 * np.eye(3)), RandomState(0)) == pytest.approx(0.5, abs=1e-12)

    def test_zero_net(self):
        assert empirical_lipschitz(zero_mlp(2), RandomState(0)) == 0.0

    @pytest.mark.parametrize("act", ["lipswish", "sine", "relu"])
    def test_bounded_by_kappa(self, act):
        rng = RandomState(1)
        net = build_mlp(2, 32, 3, act, 0.9, rng, init_scale=4.0)
        assert empirical_lipschitz(net, rng, 2000) <= 0.9 ** 3 * (1 + 1e-3) + 1e-9
        assert net.kappa == pytest.approx(0.729)

    def test_bound_from_exact_norms(self):
        rng = RandomState(2)
        net = build_mlp(3, 16, 3, "lipswish", 0.9, rng)
        assert empirical_lipschitz(net, rng, 2000) <= net.lipschitz_bound() + 1e-12
        assert net.lipschitz_bound() < 1.0

    def test_rejects_zero_pairs(self):
        with pytest.raises(ValueError):
            empirical_lipschitz(zero_mlp(2), RandomState(0), 0)


class TestSerialization:
    def test_roundtrip(self):
        net = build_mlp(2, 8, 3, "sine", 0.99, RandomState(0))
        back = LipschitzMlp.from_dict(net.to_dict())
        x = RandomState(1).normal((5, 2))
        np.testing.assert_array_equal(back(x), net(x))
        assert back.activation_name == "sine"

    def test_flat_roundtrip(self):
        net = build_mlp(2, 8, 3, "relu", 0.9, RandomState(0))
        other = net.copy()
        other.set_flat(net.get_flat() * 0.5)
        np.testing.assert_allclose(other.get_flat(), 0.5 * net.get_flat())
        assert net.n_params == net.get_flat().size

    def test_bad_format(self):
        with pytest.raises(ValueError):
            LipschitzMlp.from_dict({"format": "other"})
