import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossview import autodiff as ad
from crossview.errors import ContractError, DimensionError, DomainError


def grad_of(build, *params):
    with ad.Tape() as tape:
        loss = build()
        tape.backward(loss)
    return [p.grad for p in params]


class TestMatmul:
    def test_identity_times_anything(self):
        b = ad.Tensor(np.arange(9.0).reshape(3, 3))
        out = ad.matmul(ad.Tensor(np.eye(3)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_direct_arithmetic(self):
        a = ad.Tensor([[1.0, 2.0]])
        b = ad.Tensor([[3.0], [4.0]])
        assert ad.matmul(a, b).item() == 11.0

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        a = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        err = ad.finite_diff_check(lambda: ad.sum(ad.matmul(a, b)), [a, b], step=1e-6)
        assert err < 1e-6


class TestRelu:
    def test_sign_cases(self):
        out = ad.relu(ad.Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative_gives_zero_output_and_gradient(self):
        x = ad.Tensor([-3.0, -0.5, -10.0], requires_grad=True)
        (g,) = grad_of(lambda: ad.sum(ad.relu(x)), x)
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_gradient_away_from_kink(self):
        rng = np.random.default_rng(3)
        vals = rng.normal(size=12)
        vals[np.abs(vals) < 1e-3] = 0.5
        x = ad.Tensor(vals, requires_grad=True)
        err = ad.finite_diff_check(lambda: ad.sum(ad.relu(x)), [x], step=1e-6)
        assert err < 1e-6


class TestLogistic:
    def test_zero_maps_to_half(self):
        assert ad.logistic(ad.Tensor(0.0)).item() == 0.5

    def test_symmetry_identity(self):
        rng = np.random.default_rng(11)
        x = rng.normal(scale=4.0, size=50)
        p = ad.logistic(ad.Tensor(x)).data
        q = ad.logistic(ad.Tensor(-x)).data
        np.testing.assert_allclose(p, 1.0 - q, atol=1e-15)

    def test_extreme_inputs_stay_inside_unit_interval(self):
        mpmath = pytest.importorskip("mpmath")
        mpmath.mp.dps = 50
        for v in (50.0, -50.0, 500.0, -500.0):
            p = ad.logistic(ad.Tensor(v)).item()
            assert np.isfinite(p) and 0.0 < p < 1.0
            exact = float(1 / (1 + mpmath.exp(-mpmath.mpf(v))))
            assert abs(p - exact) < 1e-11

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = ad.Tensor(rng.normal(scale=2.0, size=10), requires_grad=True)
        err = ad.finite_diff_check(lambda: ad.sum(ad.logistic(x)), [x], step=1e-6)
        assert err < 1e-6


class TestElementwiseSuite:
    def test_log_of_one_is_zero(self):
        assert ad.log(ad.Tensor(1.0)).item() == 0.0

    def test_log_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            ad.log(ad.Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            ad.log(ad.Tensor(-2.0))

    def test_concat_vectors(self):
        out = ad.concat([ad.Tensor([1.0, 2.0]), ad.Tensor([3.0])])
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_concat_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([ad.Tensor(np.zeros((2, 2))), ad.Tensor(np.zeros((3, 2)))], axis=1)

    def test_sum_backward_is_all_ones(self):
        x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        (g,) = grad_of(lambda: ad.sum(x), x)
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_mean_backward(self):
        x = ad.Tensor([2.0, 4.0, 6.0, 8.0], requires_grad=True)
        (g,) = grad_of(lambda: ad.mean(x), x)
        np.testing.assert_allclose(g, np.full(4, 0.25))

    def test_scalar_broadcast_add_sub_mul(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        (g,) = grad_of(lambda: ad.sum(ad.sub(5.0, ad.mul(x, 3.0))), x)
        np.testing.assert_array_equal(g, [-3.0, -3.0])

    def test_non_scalar_broadcast_rejected(self):
        with pytest.raises(DimensionError):
            ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros(3)))

    def test_square_sqrt_roundtrip_gradients(self):
        rng = np.random.default_rng(9)
        x = ad.Tensor(rng.uniform(0.5, 3.0, size=8), requires_grad=True)
        err = ad.finite_diff_check(lambda: ad.sum(ad.sqrt(ad.square(x))), [x], step=1e-6)
        assert err < 1e-6

    def test_sqrt_rejects_negative(self):
        with pytest.raises(DomainError):
            ad.sqrt(ad.Tensor([-1.0]))

    def test_add_bias_gradient(self):
        rng = np.random.default_rng(13)
        m = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=3), requires_grad=True)
        err = ad.finite_diff_check(lambda: ad.sum(ad.square(ad.add_bias(m, b))), [m, b], step=1e-6)
        assert err < 1e-6

    def test_take_accumulates_duplicate_rows(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (g,) = grad_of(lambda: ad.sum(ad.take(x, [0, 0, 2])), x)
        np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])

    def test_reshape_roundtrip(self):
        x = ad.Tensor(np.arange(6.0), requires_grad=True)
        (g,) = grad_of(lambda: ad.sum(ad.square(ad.reshape(x, (2, 3)))), x)
        np.testing.assert_allclose(g, 2.0 * np.arange(6.0))


class TestEuclideanDistance:
    def test_coincident_points(self):
        u = ad.Tensor([1.0, 2.0], requires_grad=True)
        v = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            d = ad.euclidean_distance(u, v)
            tape.backward(d)
        assert d.item() == 0.0
        np.testing.assert_array_equal(u.grad, [0.0, 0.0])
        np.testing.assert_array_equal(v.grad, [0.0, 0.0])

    def test_three_four_five(self):
        d = ad.euclidean_distance(ad.Tensor([0.0, 0.0]), ad.Tensor([3.0, 4.0]))
        assert d.item() == 5.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            ad.euclidean_distance(ad.Tensor([1.0]), ad.Tensor([1.0, 2.0]))

    def test_gradient_away_from_zero(self):
        rng = np.random.default_rng(21)
        u = ad.Tensor(rng.normal(size=5), requires_grad=True)
        v = ad.Tensor(rng.normal(size=5) + 3.0, requires_grad=True)
        err = ad.finite_diff_check(lambda: ad.euclidean_distance(u, v), [u, v], step=1e-6)
        assert err < 1e-6

    def test_pair_distances_matches_scalar_op(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(6, 4))
        b = rng.normal(size=(6, 4))
        batched = ad.pair_distances(ad.Tensor(a), ad.Tensor(b)).data
        singles = [ad.euclidean_distance(ad.Tensor(a[i]), ad.Tensor(b[i])).item() for i in range(6)]
        np.testing.assert_allclose(batched, singles, rtol=1e-15)

    def test_pair_distances_gradient(self):
        rng = np.random.default_rng(4)
        a = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(3, 4)) + 2.0, requires_grad=True)
        err = ad.finite_diff_check(lambda: ad.sum(ad.pair_distances(a, b)), [a, b], step=1e-6)
        assert err < 1e-6


class TestBackwardContract:
    def test_simple_calculus(self):
        x = ad.Tensor(3.0, requires_grad=True)
        (g,) = grad_of(lambda: ad.square(x), x)
        assert g == 6.0

    def test_unreached_parameter_gets_exact_zero(self):
        x = ad.Tensor(2.0, requires_grad=True)
        p = ad.Tensor(5.0, requires_grad=True)
        with ad.Tape() as tape:
            _dead = ad.square(p)
            loss = ad.square(x)
            tape.backward(loss)
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_double_backward_rejected(self):
        x = ad.Tensor(1.0, requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.square(x)
            tape.backward(loss)
            with pytest.raises(ContractError):
                tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.square(x)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_off_tape_loss_rejected(self):
        loss = ad.Tensor(1.0)
        with pytest.raises(ContractError):
            ad.backward(loss)

    def test_backward_module_function(self):
        x = ad.Tensor(4.0, requires_grad=True)
        with ad.Tape():
            loss = ad.square(x)
        ad.backward(loss)
        assert x.grad == 8.0


class TestFiniteDiffCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(17)
        a = rng.normal(size=(4, 4))
        q = ad.Tensor(a @ a.T + 4 * np.eye(4))
        x = ad.Tensor(rng.normal(size=(4, 1)), requires_grad=True)

        def f():
            return ad.sum(ad.mul(x, ad.matmul(q, x)))

        assert ad.finite_diff_check(f, [x], step=1e-6) < 1e-9

    def test_constant_function(self):
        x = ad.Tensor([1.0, -2.0], requires_grad=True)

        def f():
            return ad.scalar_mul(0.0, ad.sum(x))

        assert ad.finite_diff_check(f, [x], step=1e-6) == 0.0

    def test_rejects_nonpositive_step(self):
        x = ad.Tensor(1.0, requires_grad=True)
        with pytest.raises(ContractError):
            ad.finite_diff_check(lambda: ad.square(x), [x], step=0.0)

    def test_detects_corrupted_gradient(self):
        # negative control: a loss whose recorded gradient is deliberately 10% off
        x = ad.Tensor([1.5, -0.7], requires_grad=True)

        def skewed_square(t):
            out = ad.Tensor(t.data * t.data)

            def make(ids):
                (tid,) = ids

                def bwd(g, sink):
                    sink[tid] = 2.2 * t.data * g  # true factor is 2.0

                return bwd

            return ad._record_op(out, (t,), make)

        err = ad.finite_diff_check(lambda: ad.sum(skewed_square(x)), [x], step=1e-6)
        assert err > 1e-3


class TestProperties:
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_random_compositions_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        w = ad.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=3), requires_grad=True)
        x = ad.Tensor(rng.normal(size=(2, 3)))

        def f():
            h = ad.relu(ad.add_bias(ad.matmul(x, w), b))
            # keep logs well-defined and away from the relu kink
            return ad.mean(ad.log(ad.add(ad.square(h), 0.7)))

        # skip draws that land a preactivation too close to the relu kink
        pre = x.data @ w.data + b.data
        if np.any(np.abs(pre) < 1e-4):
            return
        assert ad.finite_diff_check(f, [w, b], step=1e-6) < 1e-5

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_chain_rule_linear_then_quadratic(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal()
        c = rng.normal()
        x0 = rng.normal()
        x = ad.Tensor(x0, requires_grad=True)
        with ad.Tape() as tape:
            fx = ad.add(ad.scalar_mul(a, x), c)  # f(x) = a x + c
            loss = ad.square(fx)  # g(f) = f^2
            tape.backward(loss)
        expected = 2.0 * (a * x0 + c) * a
        np.testing.assert_allclose(x.grad, expected, rtol=1e-12, atol=1e-12)

    def test_tape_determinism(self):
        def run():
            rng = np.random.default_rng(123)
            w = ad.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            x = ad.Tensor(rng.normal(size=(5, 4)))
            with ad.Tape() as tape:
                loss = ad.mean(ad.square(ad.logistic(ad.matmul(x, w))))
                tape.backward(loss)
            return loss.item(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)
