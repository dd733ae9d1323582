"""Gradient and contract tests for the autodiff core.

Central finite differences are the oracle throughout: every primitive and
a small MLP must agree with them at tight relative error.
"""

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from csnar import autodiff as ad
from csnar.autodiff import Tensor, backward, grad_check


RNG = np.random.default_rng(1234)


def rand(*shape):
    return Tensor(RNG.normal(size=shape))


def weighted_sum(t, w):
    return ad.sum_(ad.mul(t, w))


class TestPrimitiveGradients:
    """Every registered primitive passes grad_check below 1e-5."""

    def test_matmul(self):
        b = rand(4, 5)
        assert grad_check(lambda t: ad.sum_(ad.matmul(t, b)), rand(3, 4)) < 1e-5
        a = rand(3, 4)
        assert grad_check(lambda t: ad.sum_(ad.matmul(a, t)), rand(4, 5)) < 1e-5

    def test_add_broadcast(self):
        bias = rand(4)
        assert grad_check(lambda t: ad.sum_(ad.mul(ad.add(t, bias), bias)), rand(3, 4)) < 1e-5
        x = rand(3, 4)
        assert grad_check(lambda t: ad.sum_(ad.mul(ad.add(x, t), x)), rand(4)) < 1e-5

    def test_mul_div(self):
        w = rand(3, 4)
        denom = Tensor(np.abs(RNG.normal(size=(3, 4))) + 1.0)
        assert grad_check(lambda t: ad.sum_(ad.mul(t, w)), rand(3, 4)) < 1e-5
        assert grad_check(lambda t: ad.sum_(ad.div(t, denom)), rand(3, 4)) < 1e-5
        num = rand(3, 4)
        assert grad_check(lambda t: ad.sum_(ad.div(num, ad.add(ad.mul(t, t), Tensor(np.ones((3, 4)))))), rand(3, 4)) < 1e-5

    def test_scale_relu_gelu(self):
        w = rand(3, 4)
        assert grad_check(lambda t: ad.sum_(ad.scale(t, -2.5)), rand(3, 4)) < 1e-5
        # keep inputs away from the relu kink where the derivative jumps
        x = Tensor(RNG.normal(size=(3, 4)) + np.sign(RNG.normal(size=(3, 4))) * 0.5)
        assert grad_check(lambda t: ad.sum_(ad.mul(ad.relu(t), w)), x) < 1e-5
        assert grad_check(lambda t: ad.sum_(ad.mul(ad.gelu(t), w)), rand(3, 4)) < 1e-5

    def test_softmax_logsoftmax(self):
        w = rand(3, 4)
        assert grad_check(lambda t: weighted_sum(ad.softmax_lastdim(t), w), rand(3, 4)) < 1e-5
        assert grad_check(lambda t: weighted_sum(ad.log_softmax_lastdim(t), w), rand(3, 4)) < 1e-5

    def test_layer_norm(self):
        w = rand(3, 4)
        assert grad_check(lambda t: weighted_sum(ad.layer_norm_lastdim(t), w), rand(3, 4)) < 1e-5

    def test_embed_lookup(self):
        w = rand(4, 3)
        table = rand(6, 3)
        assert grad_check(lambda t: weighted_sum(ad.embed_lookup(t, [0, 5, 5, 2]), w), table) < 1e-5

    def test_concat_slice_transpose(self):
        w = rand(3, 4)
        assert (
            grad_check(
                lambda t: weighted_sum(ad.concat([ad.slice_(t, 1, 0, 2), ad.slice_(t, 1, 2, 4)], axis=1), w),
                rand(3, 4),
            )
            < 1e-5
        )
        w2 = rand(2, 4)
        assert grad_check(lambda t: weighted_sum(ad.slice_(t, 0, 0, 3, 2), w2), rand(3, 4)) < 1e-5
        w3 = rand(4, 3)
        assert grad_check(lambda t: weighted_sum(ad.transpose(t), w3), rand(3, 4)) < 1e-5

    def test_dropout_fixed_mask(self):
        w = rand(3, 4)
        f = lambda t: weighted_sum(ad.dropout(t, 0.4, np.random.default_rng(7), train=True), w)
        assert grad_check(f, rand(3, 4)) < 1e-5
        g = lambda t: weighted_sum(ad.dropout(t, 0.4, None, train=False), w)
        assert grad_check(g, rand(3, 4)) < 1e-5

    def test_sum_axis_sqrt(self):
        w = rand(4)
        assert grad_check(lambda t: ad.sum_(ad.mul(ad.sum_(t, axis=0), w)), rand(3, 4)) < 1e-5
        pos = Tensor(np.abs(RNG.normal(size=(3, 4))) + 0.5)
        assert grad_check(lambda t: ad.sum_(ad.sqrt_(ad.add(ad.mul(t, t), Tensor(np.ones((3, 4)))))), rand(3, 4)) < 1e-5
        assert grad_check(lambda t: ad.sum_(ad.sqrt_(t)), pos) < 1e-5

    def test_registry_is_complete(self):
        expected = {
            "matmul", "add", "mul", "div", "scale", "relu", "gelu",
            "softmax_lastdim", "log_softmax_lastdim", "layer_norm_lastdim",
            "embed_lookup", "concat", "slice", "transpose", "dropout",
            "sum", "sqrt",
        }
        assert set(ad.PRIMITIVES) == expected

    def test_apply_primitive_dispatch(self):
        a, b = rand(2, 3), rand(3, 2)
        out = ad.apply_primitive("matmul", (a, b))
        np.testing.assert_array_equal(out.values, a.values @ b.values)
        out = ad.apply_primitive("slice", a, {"axis": 1, "start": 0, "stop": 2})
        assert out.shape == (2, 2)
        out = ad.apply_primitive("concat", [a, a], {"axis": 0})
        assert out.shape == (4, 3)
        with pytest.raises(KeyError):
            ad.apply_primitive("fft", (a,))


class TestForwardContracts:
    def test_softmax_symmetry(self):
        out = ad.softmax_lastdim(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.values, [0.5, 0.5], atol=1e-15)

    def test_softmax_rows_normalize(self):
        x = rand(5, 7)
        s = ad.softmax_lastdim(x).values
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)

    def test_log_softmax_consistency(self):
        x = rand(5, 7)
        ls = ad.log_softmax_lastdim(x).values
        s = ad.softmax_lastdim(x).values
        np.testing.assert_allclose(ls, np.log(s), atol=1e-10)

    def test_matmul_identity(self):
        a = rand(2, 2)
        eye = Tensor(np.eye(2))
        np.testing.assert_allclose(ad.matmul(eye, a).values, a.values, atol=1e-15)

    def test_layer_norm_constant_row(self):
        out = ad.layer_norm_lastdim(Tensor([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(out.values, [0.0, 0.0, 0.0], atol=1e-12)

    def test_empty_rows_flow_through(self):
        x = Tensor(np.zeros((0, 4)))
        assert ad.softmax_lastdim(x).shape == (0, 4)
        assert ad.matmul(x, rand(4, 2)).shape == (0, 2)

    @given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_softmax_rows_sum_to_one(self, rows, cols, seed):
        x = Tensor(np.random.default_rng(seed).normal(size=(rows, cols)) * 5)
        np.testing.assert_allclose(
            ad.softmax_lastdim(x).values.sum(axis=-1), 1.0, atol=1e-12
        )


class TestErrors:
    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(3, 4\).*\(3, 4\)"):
            ad.matmul(rand(3, 4), rand(3, 4))
        with pytest.raises(ad.ShapeError, match=r"\(3, 4\).*\(2, 4\)"):
            ad.add(rand(3, 4), rand(2, 4))

    def test_rank_limit(self):
        with pytest.raises(ad.ShapeError):
            Tensor(np.zeros((2, 2, 2, 2)))

    def test_backward_needs_scalar(self):
        x = rand(3, 4)
        with pytest.raises(ad.ShapeError):
            backward(ad.mul(x, x))

    def test_embed_lookup_out_of_range(self):
        with pytest.raises(IndexError, match="out of range"):
            ad.embed_lookup(rand(4, 3), [0, 4])

    def test_debug_finite_mode(self):
        ad.set_debug_finite(True)
        try:
            with pytest.raises(ad.NonFiniteError):
                ad.add(Tensor([np.nan]), Tensor([1.0]))
        finally:
            ad.set_debug_finite(False)
        out = ad.add(Tensor([np.nan]), Tensor([1.0]))  # silent when off
        assert np.isnan(out.values[0])


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0])
        backward(ad.sum_(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic_gradient(self):
        x = Tensor([2.0])
        backward(ad.sum_(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [4.0])

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0])
        loss = ad.sum_(ad.mul(x, x))
        backward(loss)
        first = x.grad.copy()
        backward(loss)
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_shared_subexpression(self):
        # y = x*x used twice: d/dx (x*x + x*x) = 4x
        x = Tensor([3.0])
        y = ad.mul(x, x)
        backward(ad.sum_(ad.add(y, y)))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_two_layer_mlp_matches_finite_differences(self):
        w1, b1 = rand(5, 8), rand(8)
        w2, b2 = rand(8, 3), rand(3)
        tgt = rand(2, 3)

        def network(x):
            h = ad.gelu(ad.add(ad.matmul(x, w1), b1))
            out = ad.add(ad.matmul(h, w2), b2)
            diff = ad.add(out, ad.scale(tgt, -1.0))
            return ad.sum_(ad.mul(diff, diff))

        def network_with_param(_):
            return network(Tensor(np.ones((2, 5))))

        assert grad_check(network, rand(2, 5), h=1e-5) < 1e-6
        assert grad_check(network_with_param, w1) < 1e-6

    def test_determinism(self):
        def build(seed):
            r = np.random.default_rng(seed)
            x = Tensor(r.normal(size=(4, 6)))
            out = ad.softmax_lastdim(ad.matmul(x, Tensor(r.normal(size=(6, 6)))))
            out = ad.dropout(out, 0.3, np.random.default_rng(99), train=True)
            loss = ad.sum_(ad.mul(out, out))
            backward(loss)
            return loss.values.copy(), x.grad.copy()

        l1, g1 = build(5)
        l2, g2 = build(5)
        assert np.array_equal(l1, l2)
        assert np.array_equal(g1, g2)
