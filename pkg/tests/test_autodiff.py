import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tipspool.autodiff import (
    Node,
    SgdState,
    backward,
    elementwise,
    finite_diff_grad,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sgd_step,
    sqrt,
    square,
)


def f64(x):
    return Node(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestElementwise:
    def test_add(self):
        out = elementwise("add", Node([1.0, 2.0]), Node([3.0, 4.0]))
        np.testing.assert_array_equal(out.value, [4.0, 6.0])

    def test_relu(self):
        out = elementwise("relu", Node([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.value, [0.0, 0.0, 2.0])

    def test_square_of_x_grad(self):
        x = f64([3.0])
        out = reduce_sum(mul(x, x))
        backward(out)
        np.testing.assert_allclose(x.grad, [6.0])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
            elementwise("add", Node([1.0, 2.0]), Node([1.0, 2.0, 3.0]))

    def test_scalar_by_tensor_allowed(self):
        x = f64([1.0, 2.0, 3.0])
        out = reduce_sum(mul(x, Node(2.0)))
        backward(out)
        np.testing.assert_allclose(x.grad, [2.0, 2.0, 2.0])

    def test_mixed_dtype_rejected(self):
        a = Node(np.zeros(2, dtype=np.float32))
        b = Node(np.zeros(2, dtype=np.float64))
        with pytest.raises(TypeError, match="mixed dtypes"):
            elementwise("add", a, b)

    def test_unknown_op(self):
        with pytest.raises(ValueError, match="unknown elementwise op"):
            elementwise("div", Node([1.0]), Node([1.0]))


class TestBackward:
    def test_relu_subgradient_zero_at_negative(self):
        x = f64([-1.0, 2.0])
        backward(reduce_sum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_product_rule(self):
        x, y = f64([2.0]), f64([5.0])
        backward(reduce_sum(mul(x, y)))
        np.testing.assert_allclose(x.grad, [5.0])
        np.testing.assert_allclose(y.grad, [2.0])

    def test_diamond_graph_accumulates_over_paths(self):
        # z = x*x + x*x at x=1: dz/dx = 4 by hand expansion
        x = f64([1.0])
        z = mul(x, x) + mul(x, x)
        backward(reduce_sum(z))
        np.testing.assert_allclose(x.grad, [4.0])

    def test_non_scalar_root_rejected(self):
        x = f64([1.0, 2.0])
        with pytest.raises(ValueError, match="scalar root"):
            backward(mul(x, x))

    def test_backward_twice_gives_identical_grads(self):
        x = f64(np.arange(1.0, 5.0))
        out = reduce_sum(square(relu(x)))
        backward(out)
        first = x.grad.copy()
        backward(out)
        np.testing.assert_array_equal(x.grad, first)

    def test_relu_at_exact_zero_uses_zero_subgradient(self):
        x = f64([0.0])
        backward(reduce_sum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0])


def _random_graph(rng, x):
    # a fixed composite with multiple paths and a reduction
    a = square(x)
    b = relu(mul(x, Node(np.asarray(0.7, dtype=x.value.dtype))))
    c = a + b + mul(x, x)
    return reduce_mean(square(c))


class TestGradientOracle:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.standard_normal(rng.integers(1, 9))
        # keep ReLU inputs away from the kink
        p[np.abs(p * 0.7) < 1e-3] += 0.1
        x = Node(np.asarray(p, dtype=np.float64), requires_grad=True)
        backward(_random_graph(rng, x))
        fd = finite_diff_grad(lambda v: float(_random_graph(rng, Node(v)).value), p, eps=1e-5)
        np.testing.assert_allclose(x.grad, fd, rtol=1e-4, atol=1e-8)

    def test_sum_of_squares_example(self):
        fd = finite_diff_grad(lambda v: float((v ** 2).sum()), np.array([3.0]), eps=1e-5)
        np.testing.assert_allclose(fd, [6.0], atol=1e-6)

    def test_constant_function(self):
        fd = finite_diff_grad(lambda v: 7.0, np.array([1.0, 2.0]), eps=1e-5)
        np.testing.assert_array_equal(fd, [0.0, 0.0])

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda v: 0.0, np.array([1.0]), eps=0.0)


class TestTopologicalOrderIndependence:
    def test_bitwise_identical_grads_under_different_discovery(self):
        rng = np.random.default_rng(7)
        x = Node(rng.standard_normal(16), requires_grad=True)
        y = Node(rng.standard_normal(16), requires_grad=True)
        z = mul(x, y) + square(x) + mul(y, relu(x))
        root = reduce_sum(square(z))
        backward(root)
        gx1, gy1 = x.grad.copy(), y.grad.copy()
        # a second pass (fresh traversal) must agree bit for bit at f64
        backward(root)
        assert gx1.tobytes() == x.grad.tobytes()
        assert gy1.tobytes() == y.grad.tobytes()


class TestReductionsAndShaping:
    def test_reduce_sum_axis(self):
        x = f64(np.arange(6.0).reshape(2, 3))
        out = reduce_sum(x, axis=1)
        np.testing.assert_array_equal(out.value, [3.0, 12.0])
        backward(reduce_sum(out))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_reshape_roundtrip_grad(self):
        x = f64(np.arange(4.0))
        backward(reduce_sum(square(reshape(x, (2, 2)))))
        np.testing.assert_allclose(x.grad, 2.0 * np.arange(4.0))

    def test_sqrt_grad(self):
        x = f64([4.0])
        backward(reduce_sum(sqrt(x)))
        np.testing.assert_allclose(x.grad, [0.25])


class TestSgd:
    def test_plain_step(self):
        p = f64([1.0])
        state = SgdState([p], lr=1.0, momentum=0.0, weight_decay=0.0)
        p.grad = np.array([0.5])
        sgd_step(state)
        np.testing.assert_allclose(p.value, [0.5])
        assert p.grad is None

    def test_momentum_two_steps(self):
        # hand iteration: v1 = 1 -> move 1; v2 = 0.9 + 1 = 1.9 -> move 1.9
        p = f64([0.0])
        state = SgdState([p], lr=1.0, momentum=0.9)
        p.grad = np.array([1.0])
        sgd_step(state)
        np.testing.assert_allclose(p.value, [-1.0])
        p.grad = np.array([1.0])
        sgd_step(state)
        np.testing.assert_allclose(p.value, [-2.9])

    def test_pure_weight_decay(self):
        p = f64([10.0])
        state = SgdState([p], lr=1.0, momentum=0.0, weight_decay=0.1)
        p.grad = np.array([0.0])
        sgd_step(state)
        np.testing.assert_allclose(p.value, [9.0])

    def test_missing_grad_raises(self):
        p = f64([1.0])
        state = SgdState([p], lr=0.1)
        with pytest.raises(ValueError, match="no gradient"):
            sgd_step(state)

    def test_velocity_zero_initialized(self):
        p = f64(np.ones(3))
        state = SgdState([p], lr=0.1, momentum=0.5)
        assert all(np.all(v == 0) for v in state.velocity)
