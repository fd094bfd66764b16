import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sru.errors import ContractError, DeterminismError, DimensionError
from sru.numerics import (
    AdamState,
    ParamStore,
    RngStream,
    adam_step,
    cross_entropy_with_grad,
    derive_seed,
    finite_difference_check,
    linear_forward_backward,
    softmax,
)


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    @pytest.mark.parametrize("c", [-3.0, 0.0, 42.0])
    def test_single_element(self, c):
        np.testing.assert_allclose(softmax(np.array([c])), [1.0])

    def test_max_subtraction_keeps_finiteness(self):
        out = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_empty_is_dimension_error(self):
        with pytest.raises(DimensionError):
            softmax(np.array([]))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
    def test_probability_vector(self, values):
        out = softmax(np.array(values))
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) < 1e-6


class TestCrossEntropy:
    def test_uniform_four_classes(self):
        loss, _ = cross_entropy_with_grad(np.zeros(4), 1)
        assert loss == pytest.approx(math.log(4), abs=1e-9)

    def test_confident_logit_small_loss(self):
        # analytic: -log(e^10 / (e^10 + 3)) = log(1 + 3 e^-10)
        logits = np.zeros(4)
        logits[2] = 10.0
        loss, _ = cross_entropy_with_grad(logits, 2)
        assert loss == pytest.approx(math.log(1.0 + 3.0 * math.exp(-10.0)), rel=1e-9)
        assert loss < 1e-3

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=20), st.data())
    def test_gradient_sums_to_zero(self, values, data):
        target = data.draw(st.integers(0, len(values) - 1))
        _, grad = cross_entropy_with_grad(np.array(values), target)
        assert abs(grad.sum()) < 1e-6

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy_with_grad(np.zeros(3), 3)


class TestLinear:
    def test_identity(self):
        y, _ = linear_forward_backward(np.array([1.0, 2.0]), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(y, [1.0, 2.0])

    def test_hand_product(self):
        # x W = [1,0] [[2,3],[5,7]] = [2,3]; plus b = [3,4]
        y, _ = linear_forward_backward(
            np.array([1.0, 0.0]), np.array([[2.0, 3.0], [5.0, 7.0]]), np.array([1.0, 1.0])
        )
        np.testing.assert_array_equal(y, [3.0, 4.0])

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError) as err:
            linear_forward_backward(np.zeros(3), np.eye(2), np.zeros(2))
        assert "(3,)" in str(err.value) and "(2, 2)" in str(err.value)

    def test_gradients_against_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=3)
        weight = rng.normal(size=(3, 4))
        bias = rng.normal(size=4)
        probe = rng.normal(size=4)  # loss = (x W + b) . probe

        store = ParamStore()
        store.add("W", weight)
        store.add("b", bias)

        def loss_fn(s):
            y, _ = linear_forward_backward(x, s.params["W"], s.params["b"])
            return float(y @ probe)

        _, grads = linear_forward_backward(x, weight, bias, upstream_grad=probe)
        store.grads["W"][...] = grads[1]
        store.grads["b"][...] = grads[2]
        assert finite_difference_check(loss_fn, store) < 1e-6


def scalar_adam_oracle(w0, grad_fn, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    # independent reference implementation, plain floats
    w, m, v = w0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        w = w - lr * m_hat / (math.sqrt(v_hat) + eps)
    return w


class TestAdam:
    def test_first_step_is_signed_learning_rate(self):
        g = 0.3
        store = ParamStore()
        store.add("w", np.array([0.5]))
        store.grads["w"][...] = g
        state = AdamState.for_store(store)
        adam_step(store, state, lr=0.01)
        delta = store.params["w"][0] - 0.5
        assert abs(delta + 0.01 * math.copysign(1.0, g)) <= 0.01 * 1e-8 / abs(g) + 1e-15
        assert state.t == 1

    def test_zero_gradient_keeps_parameters(self):
        store = ParamStore()
        store.add("w", np.array([1.0, -2.0]))
        state = AdamState.for_store(store)
        adam_step(store, state, lr=0.1)
        np.testing.assert_array_equal(store.params["w"], [1.0, -2.0])
        assert state.t == 1

    def test_quadratic_descent_matches_scalar_oracle(self):
        store = ParamStore()
        store.add("w", np.array([1.0]))
        state = AdamState.for_store(store)
        for _ in range(100):
            store.grads["w"][...] = 2.0 * store.params["w"]
            adam_step(store, state, lr=0.1)
        expected = scalar_adam_oracle(1.0, lambda w: 2.0 * w, lr=0.1, steps=100)
        assert store.params["w"][0] == pytest.approx(expected, rel=1e-12)
        assert abs(store.params["w"][0]) < 0.5

    def test_missing_gradient_names_parameter(self):
        store = ParamStore()
        store.add("theta", np.zeros(2))
        state = AdamState.for_store(store)
        del store.grads["theta"]
        with pytest.raises(ContractError, match="theta"):
            adam_step(store, state, lr=0.1)


class TestFiniteDifferenceCheck:
    def test_quadratic_is_nearly_exact(self):
        store = ParamStore()
        store.add("w", np.array([0.3, -1.2, 2.0]))
        store.grads["w"][...] = 2.0 * store.params["w"]
        err = finite_difference_check(lambda s: float((s.params["w"] ** 2).sum()), store)
        assert err < 1e-8

    def test_nondeterministic_loss_rejected(self):
        store = ParamStore()
        store.add("w", np.array([1.0]))
        calls = iter(range(1000))

        def jittery(s):
            return float(s.params["w"][0]) + next(calls) * 1e-3

        with pytest.raises(DeterminismError):
            finite_difference_check(jittery, store)


class TestRngStream:
    def test_same_seed_and_name_repeats(self):
        a = RngStream(9, "abc").random(16)
        b = RngStream(9, "abc").random(16)
        np.testing.assert_array_equal(a, b)

    def test_stream_names_separate(self):
        a = RngStream(9, "abc").random(16)
        b = RngStream(9, "abd").random(16)
        assert not np.array_equal(a, b)

    def test_mean_of_uniform_draws(self):
        draws = RngStream(123, "stats").random(100_000)
        assert abs(draws.mean() - 0.5) < 0.01

    def test_negative_seed_rejected(self):
        with pytest.raises(ContractError):
            RngStream(-1, "x")

    def test_derive_seed_stable(self):
        assert derive_seed(7, "shard-0") == derive_seed(7, "shard-0")
        assert derive_seed(7, "shard-0") != derive_seed(7, "shard-1")
        assert derive_seed(7, "shard-0") >= 0


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("w", np.zeros(1))
        with pytest.raises(ContractError):
            store.add("w", np.zeros(1))

    def test_names_sorted(self):
        store = ParamStore()
        for name in ("b", "a", "c"):
            store.add(name, np.zeros(1))
        assert store.names() == ["a", "b", "c"]

    def test_accumulate_shape_checked(self):
        store = ParamStore()
        store.add("w", np.zeros((2, 2)))
        with pytest.raises(DimensionError):
            store.accumulate("w", np.zeros(3))
