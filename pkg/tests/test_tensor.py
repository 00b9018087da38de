"""Tensor engine: forward values against hand oracles, gradients against
central finite differences."""

import math

import numpy as np
import pytest

from bevfuse import tensor as T
from bevfuse.tensor import Parameter, Tensor, grad_check


def test_tensor_is_float64_row_major():
    t = Tensor(np.arange(6, dtype=np.int32).reshape(2, 3))
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.shape == (2, 3)


def test_constructor_copies_input():
    src = np.ones(3)
    t = Tensor(src)
    src[0] = 99.0
    assert t.data[0] == 1.0


def test_op_outputs_are_frozen():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    with pytest.raises(ValueError):
        out.data[0] = 0.0


def test_assert_finite_raises_on_nan():
    t = Tensor([1.0, np.nan])
    with pytest.raises(ValueError, match="NaN"):
        t.assert_finite("payload")
    Tensor([1.0, 2.0]).assert_finite()


def test_backward_needs_scalar():
    t = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (t * 2.0).backward()


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(a, b)


def test_matmul_backward_matches_closed_form():
    # d(sum(a@b))/da = ones @ b^T, d/db = a^T @ ones
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    out = T.matmul(a, b)
    out.sum().backward()
    g = np.ones((3, 5))
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


def test_gelu_exact_gaussian_cdf():
    # gelu(x) = x * Phi(x) with the exact erf-based CDF, not the tanh fit.
    for x in (-2.0, -0.5, 0.0, 0.3, 1.0, 2.7):
        expected = x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
        got = T.gelu(Tensor([x])).data[0]
        assert got == pytest.approx(expected, abs=1e-15)
    assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(0.8413447460685429, abs=1e-15)


def test_softmax_matches_hand_computation():
    x = np.array([1.0, 2.0, 3.0])
    e = np.exp(x - 3.0)
    expected = e / e.sum()
    got = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(got, expected, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = Tensor(rng.normal(scale=30.0, size=(4, 7)))
        s = T.softmax(x, axis=-1).data.sum(axis=-1)
        np.testing.assert_allclose(s, 1.0, atol=1e-12)


def test_softmax_extreme_logits_stay_finite():
    x = Tensor(np.array([[1e4, -1e4, 0.0]]))
    out = T.softmax(x, axis=-1)
    out.assert_finite()
    np.testing.assert_allclose(out.data.sum(), 1.0, atol=1e-12)


def test_clamp_min_floors_and_gates_gradient():
    x = Tensor([0.5, 1e-15, -3.0], requires_grad=True)
    y = T.clamp_min(x, 1e-12)
    np.testing.assert_allclose(y.data, [0.5, 1e-12, 1e-12])
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [1.0, 0.0, 0.0])


def test_getitem_backward_scatters():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    y = x[1, 1:3]
    y.sum().backward()
    expected = np.zeros((3, 4))
    expected[1, 1:3] = 1.0
    np.testing.assert_allclose(x.grad, expected)


def test_getitem_scalar_index_stays_zero_dim():
    # Full integer indexing must give a 0-d tensor (not shape (1,)) so its
    # backward writes a plain scalar slot and backward() accepts it as a
    # scalar objective.
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    y = x[2, 1]
    assert y.shape == ()
    y.backward()
    expected = np.zeros((3, 4))
    expected[2, 1] = 1.0
    np.testing.assert_allclose(x.grad, expected)


def test_weighted_gather_forward_oracle():
    # out[c,k] = sum_j w[k,j] * f[c, idx[k,j]], by hand on a tiny case.
    f = Tensor(np.array([[1.0, 10.0, 100.0], [2.0, 20.0, 200.0]]))
    idx = np.array([[0, 2], [1, 1]])
    w = np.array([[0.25, 0.75], [1.0, 0.5]])
    out = T.weighted_gather(f, idx, w)
    np.testing.assert_allclose(out.data, [[75.25, 15.0], [150.5, 30.0]])


def test_conv2d_hand_oracle_3x3():
    # Single channel, 3x3 input, 3x3 kernel of ones, zero bias: each output
    # is the sum of the 3x3 neighborhood under zero padding.
    x = Tensor(np.arange(9.0).reshape(1, 3, 3), requires_grad=True)
    w = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    out = T.conv2d(x, w, b)
    expected = np.array([[8.0, 15.0, 12.0], [21.0, 36.0, 27.0], [20.0, 33.0, 24.0]])
    np.testing.assert_allclose(out.data[0], expected)


def test_detach_cuts_graph():
    x = Tensor([2.0], requires_grad=True)
    y = (x * 3.0).detach()
    assert not y.requires_grad
    z = y * 5.0
    assert not z.requires_grad
    np.testing.assert_allclose(z.data, [30.0])


class TestGradChecks:
    """Central finite differences (step 1e-5) vs reverse-mode, rel err < 1e-4."""

    def _check(self, build, n_seeds=20, tol=1e-4):
        worst = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng(seed)
            f, params = build(rng)
            worst = max(worst, grad_check(f, params))
        assert worst < tol, f"worst relative error {worst}"

    def test_add_mul_broadcast(self):
        def build(rng):
            a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4,)), requires_grad=True)
            return lambda: ((a + b) * b + a * 2.0 - b).sum(), [a, b]
        self._check(build)

    def test_div(self):
        def build(rng):
            a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            b = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
            return lambda: (a / b).sum(), [a, b]
        self._check(build)

    def test_matmul_batched(self):
        def build(rng):
            a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            return lambda: (T.matmul(a, b) * 0.3).sum(), [a, b]
        self._check(build, n_seeds=10)

    def test_reductions_and_shapes(self):
        def build(rng):
            a = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
            def f():
                x = T.transpose(a, (2, 0, 1))
                x = T.reshape(x, (2, 12))
                return (x.mean(axis=1) * Tensor([1.0, -2.0])).sum()
            return f, [a]
        self._check(build, n_seeds=10)

    def test_concat_getitem(self):
        def build(rng):
            a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
            def f():
                x = T.concat([a, b], axis=0)
                return (x[1:, :2] * x[:2, 1:]).sum()
            return f, [a, b]
        self._check(build, n_seeds=10)

    def test_pointwise_nonlinearities(self):
        def build(rng):
            a = Tensor(rng.uniform(0.2, 2.0, size=(3, 3)), requires_grad=True)
            def f():
                x = T.gelu(a) + T.sigmoid(a) + T.softplus(a)
                x = x + T.exp(a * 0.1) + T.log(a) + T.sqrt(a)
                return x.sum()
            return f, [a]
        self._check(build)

    def test_softmax_and_log_softmax(self):
        def build(rng):
            a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            c = Tensor(rng.normal(size=(4, 5)))
            def f():
                return (T.softmax(a, axis=-1) * c).sum() + (T.log_softmax(a, axis=0) * c).sum()
            return f, [a]
        self._check(build)

    def test_weighted_gather(self):
        def build(rng):
            f_ = Tensor(rng.normal(size=(2, 9)), requires_grad=True)
            idx = rng.integers(0, 9, size=(5, 4))
            w = rng.normal(size=(5, 4))
            c = Tensor(rng.normal(size=(2, 5)))
            return lambda: (T.weighted_gather(f_, idx, w) * c).sum(), [f_]
        self._check(build)

    def test_conv2d(self):
        def build(rng):
            x = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
            w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
            b = Tensor(rng.normal(size=(3,)), requires_grad=True)
            c = Tensor(rng.normal(size=(3, 4, 5)))
            return lambda: (T.conv2d(x, w, b) * c).sum(), [x, w, b]
        self._check(build, n_seeds=8)

    def test_abs(self):
        def build(rng):
            a = Tensor(rng.normal(size=(4,)) + 0.3, requires_grad=True)
            return lambda: T.abs_(a).sum(), [a]
        self._check(build, n_seeds=10)


def test_grad_accumulates_across_uses():
    x = Tensor([3.0], requires_grad=True)
    y = x * x  # dy/dx = 2x via two uses of x
    y.backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_parameter_defaults():
    p = Parameter(np.zeros(3), name="w")
    assert p.requires_grad and p.name == "w"
    assert isinstance(p, Tensor)
