import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from impflow.lipschitz_net import build_mlp
from impflow.numeric import (GradientTape, RandomState, SingularMatrixError, Tensor, UnrecordedLeafError,
                             custom, eig_2x2, grad, lu_logdet, power_iteration_norm, rng_draw)
from impflow.numeric import tape as T


def brute_force_norm(M, steps=10_000):
    v = np.ones(M.shape[1]) / math.sqrt(M.shape[1])
    for _ in range(steps):
        w = M.T @ (M @ v)
        v = w / np.linalg.norm(w)
    return float(np.linalg.norm(M @ v))


class TestLuLogdet:
    def test_identity(self):
        assert lu_logdet(np.eye(3)) == (1.0, 0.0)

    def test_diagonal(self):
        sign, ld = lu_logdet(np.diag([1.5, 1.5]))
        assert sign == 1.0
        assert ld == pytest.approx(0.810930, abs=1e-6)

    def test_negative_determinant(self):
        sign, ld = lu_logdet(np.array([[0.0, 2.0], [3.0, 0.0]]))
        assert sign == -1.0
        assert ld == pytest.approx(math.log(6.0))

    def test_singular(self):
        with pytest.raises(SingularMatrixError):
            lu_logdet(np.array([[1.0, 2.0], [2.0, 4.0]]))

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            lu_logdet(np.ones((2, 3)))
        with pytest.raises(ValueError):
            lu_logdet(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    def test_product_rule(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            A = np.eye(6) + 0.3 * rng.normal(size=(6, 6))
            B = np.eye(6) + 0.3 * rng.normal(size=(6, 6))
            assert lu_logdet(A @ B)[1] == pytest.approx(lu_logdet(A)[1] + lu_logdet(B)[1], abs=1e-10)

    def test_matches_slogdet(self):
        rng = np.random.default_rng(1)
        for n in (1, 2, 5, 9):
            M = rng.normal(size=(n, n))
            s, ld = lu_logdet(M)
            s2, ld2 = np.linalg.slogdet(M)
            assert s == s2
            assert ld == pytest.approx(ld2, abs=1e-10)

    def test_residual_jacobians_have_positive_determinant(self):
        rng = RandomState(3)
        nets = [build_mlp(3, 16, 3, "lipswish", 0.95, rng) for _ in range(10)]
        for net in nets:
            J = net.jacobian(2.0 * rng.normal((100, 3)))
            for Ji in J:
                assert lu_logdet(np.eye(3) + Ji)[0] == 1.0


class TestEig2x2:
    def test_identity(self):
        assert eig_2x2(np.eye(2)) == (1.0, 1.0)

    def test_rotation(self):
        a, b = eig_2x2(np.array([[0.0, 1.0], [-1.0, 0.0]]))
        assert a == pytest.approx(1j)
        assert b == pytest.approx(-1j)

    def test_counterexample_product(self):
        # unrounded product of the three residual maps (entry [1, 1] is -0.67575)
        l1, l2 = eig_2x2(np.array([[0.2776, -0.4293], [0.5290, -0.67575]]))
        assert l1 == pytest.approx(-0.1881, abs=1e-3)
        assert l2 == pytest.approx(-0.2100, abs=1e-3)

    def test_four_digit_product_is_near_defective(self):
        # rounding -0.67575 to -0.6757 moves both roots by about 1.2e-3
        M = np.array([[0.2776, -0.4293], [0.5290, -0.6757]])
        l1, l2 = eig_2x2(M)
        np.testing.assert_allclose(sorted([l1, l2]), sorted(np.linalg.eigvals(M).real), atol=1e-12)
        assert l1 < 0 and l2 < 0
        assert abs(l1 - (-0.1881)) > 1e-3

    def test_rejects_non_2x2(self):
        with pytest.raises(ValueError):
            eig_2x2(np.eye(3))

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
    def test_matches_numpy(self, entries):
        M = np.array(entries).reshape(2, 2)
        ours = np.sort_complex(np.array(eig_2x2(M), dtype=complex))
        ref = np.sort_complex(np.linalg.eigvals(M).astype(complex))
        scale = max(1.0, np.abs(M).max())
        np.testing.assert_allclose(ours, ref, atol=1e-6 * scale)


class TestPowerIteration:
    def test_diagonal(self):
        r = power_iteration_norm(np.diag([3.0, 1.0]), 200, 1e-10, RandomState(0))
        assert r.sigma == pytest.approx(3.0, abs=1e-6)
        assert r.converged

    def test_zero(self):
        assert power_iteration_norm(np.zeros((3, 3))).sigma == 0.0

    def test_random_8x8_against_brute_force(self):
        M = RandomState(1).normal((8, 8))
        ref = brute_force_norm(M)
        r = power_iteration_norm(M, 5000, 1e-10, RandomState(2))
        assert r.sigma == pytest.approx(ref, abs=1e-4)
        assert r.sigma <= ref + 1e-8

    def test_never_exceeds_norm(self):
        rng = RandomState(4)
        for _ in range(30):
            M = rng.normal((6, 5))
            r = power_iteration_norm(M, 3, 1e-3, rng)
            assert r.sigma <= np.linalg.norm(M, 2) + 1e-8

    def test_default_tolerance(self):
        rng = RandomState(5)
        for _ in range(30):
            M = rng.normal((16, 16))
            r = power_iteration_norm(M, 200, 1e-3, rng)
            if r.converged:
                assert r.sigma >= np.linalg.norm(M, 2) * (1 - 1e-3)

    def test_converged_runs_meet_tolerance(self):
        rng = RandomState(11)
        n_conv = 0
        for n in (4, 16, 64):
            for _ in range(40):
                M = rng.normal((n, n))
                r = power_iteration_norm(M, 200, 1e-3, rng)
                n_conv += r.converged
                if r.converged:
                    assert r.sigma >= np.linalg.norm(M, 2) * (1 - 1e-3)
        assert n_conv >= 100

    def test_min_iters_floor(self):
        M = np.diag([1.0, 0.97, 0.5])
        v0 = np.array([1e-2, 1.0, 1.0])
        free = power_iteration_norm(M, 200, 1e-3, v0=v0)
        floored = power_iteration_norm(M, 200, 1e-3, v0=v0, min_iters=150)
        assert free.n_iter < 150 <= floored.n_iter
        assert abs(floored.sigma - 1.0) < abs(free.sigma - 1.0)

    def test_budget_flag(self):
        M = np.diag([1.0, 0.999999])
        r = power_iteration_norm(M, 1, 1e-12, v0=np.array([1.0, 1.0]))
        assert not r.converged
        with pytest.raises(ValueError):
            power_iteration_norm(M, 0)


class TestRandomState:
    def test_reproducible(self):
        a, b = RandomState(7), RandomState(7)
        np.testing.assert_array_equal(a.normal(10), b.normal(10))
        np.testing.assert_array_equal(a.geometric(0.3, 10), b.geometric(0.3, 10))

    def test_position_roundtrip(self):
        r = RandomState(2)
        pos = r.position
        first = r.uniform(5)
        r.position = pos
        np.testing.assert_array_equal(r.uniform(5), first)

    def test_spawn_independent_and_deterministic(self):
        a = [s.normal(3) for s in RandomState(1).spawn(2)]
        b = [s.normal(3) for s in RandomState(1).spawn(2)]
        np.testing.assert_array_equal(a[0], b[0])
        assert not np.array_equal(a[0], a[1])

    def test_geometric_degenerate(self):
        assert np.all(rng_draw("geometric", RandomState(0), 100, p=1.0) == 1)

    def test_geometric_mean(self):
        n = rng_draw("geometric", RandomState(0), 1_000_000, p=0.5)
        assert n.min() >= 1
        assert abs(n.mean() - 2.0) < 0.01

    def test_normal_variance(self):
        x = rng_draw("normal", RandomState(0), 1_000_000)
        assert abs(x.var() - 1.0) < 0.01
        assert abs(x.mean()) < 0.01

    def test_poisson_mean(self):
        x = rng_draw("poisson", RandomState(0), 200_000, lam=2.0)
        assert abs(x.mean() - 2.0) < 0.02

    def test_invalid_parameters(self):
        rng = RandomState(0)
        with pytest.raises(ValueError):
            rng_draw("geometric", rng, 3, p=0.0)
        with pytest.raises(ValueError):
            rng_draw("geometric", rng, 3, p=1.5)
        with pytest.raises(ValueError):
            rng_draw("poisson", rng, 3, lam=-1.0)
        with pytest.raises(ValueError):
            rng_draw("cauchy", rng, 3)


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestTape:
    def test_quadratic_form(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (g,) = grad((x * x).sum(), [x])
        np.testing.assert_allclose(g.value, [2.0, 4.0])

    def test_bilinear_form(self):
        rng = RandomState(0)
        u, v = rng.normal((3, 1)), rng.normal((4, 1))
        W = Tensor(rng.normal((3, 4)), requires_grad=True)
        s = (T.mT(Tensor(u)) @ (W @ Tensor(v))).sum()
        (g,) = grad(s, [W])
        np.testing.assert_allclose(g.value, u @ v.T, atol=1e-14)

    def test_unused_input_gets_zero(self):
        x = Tensor(np.ones(2), True)
        y = Tensor(np.ones(3), True)
        gx, gy = grad((x * 3.0).sum(), [x, y])
        np.testing.assert_array_equal(gy.value, np.zeros(3))

    def test_untracked_input_rejected(self):
        with pytest.raises(UnrecordedLeafError):
            grad(Tensor(np.ones(2), True).sum(), [Tensor(np.ones(2))])

    def test_random_graphs_match_finite_differences(self):
        rng = RandomState(11)
        for _ in range(100):
            A = rng.normal((3, 4))
            b = rng.normal((1, 4))
            c = rng.normal((4, 2))

            def build(xv, track=True):
                x = Tensor(xv, track)
                h = T.matmul(x, Tensor(A)) + Tensor(b)
                h = T.unary(h, lambda z, k: np.tanh(z) if k == 0 else
                            (1 - np.tanh(z) ** 2 if k == 1 else -2 * np.tanh(z) * (1 - np.tanh(z) ** 2)))
                h = T.matmul(h * h, Tensor(c))
                out = (T.exp(h * 0.1) / (h * h + 1.0)).sum()
                return x, out

            xv = rng.normal((2, 3))
            x, out = build(xv)
            (g,) = grad(out, [x])
            fd = fd_grad(lambda z: build(z, False)[1].value, xv)
            assert rel_err(g.value, fd) <= 1e-6

    def test_second_order_probe_gradient(self):
        # s = v^T J_g(x) v for a 2-layer net, differentiated w.r.t. the weights
        rng = RandomState(2)
        net = build_mlp(3, 6, 2, "lipswish", 0.9, rng)
        x = rng.normal((1, 3))
        v = rng.normal((1, 3))

        def s_of(flat):
            work = net.copy()
            work.set_flat(flat)
            return float(v[0] @ work.jacobian(x[0]) @ v[0])

        params = net.param_tensors()
        xt = Tensor(x, True)
        with T._grad_mode(True):
            out = net.traced(xt, params)
            (vj,) = grad(out, [xt], grad_output=v, create_graph=True)
            s = (vj * Tensor(v)).sum()
        g = np.concatenate([gi.value.ravel() for gi in grad(s, params)])
        fd = fd_grad(s_of, net.get_flat())
        assert rel_err(g, fd) <= 1e-6

    def test_logdet_gradient(self):
        rng = RandomState(3)
        A = np.eye(4) + 0.2 * rng.normal((2, 4, 4))
        a = Tensor(A, True)
        (g,) = grad(T.logdet(a).sum(), [a])
        np.testing.assert_allclose(g.value, np.linalg.inv(A).transpose(0, 2, 1), atol=1e-12)

    def test_custom_node(self):
        x = Tensor(np.array([1.0, 2.0]), True)
        y = custom(x.value * 3.0, [x], lambda g: (3.0 * g,))
        (g,) = grad((y * y).sum(), [x])
        np.testing.assert_allclose(g.value, 18.0 * x.value)

    def test_gradient_tape_replay(self):
        with GradientTape() as tape:
            x = tape.watch(np.array([1.0, -2.0, 0.5]))
            y = (T.exp(x) * x).sum()
        assert tape.replay(y) == y.value
        assert tape.replay(y, {0: np.zeros(3)}) == 0.0
        (g,) = tape.gradient(y, [x])
        np.testing.assert_allclose(g.value, np.exp(x.value) * (1 + x.value))

    def test_tape_rejects_foreign_source(self):
        outside = Tensor(np.ones(2), True)
        with GradientTape() as tape:
            y = (outside * 2.0).sum()
        with pytest.raises(UnrecordedLeafError):
            tape.gradient(y, [outside])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad
