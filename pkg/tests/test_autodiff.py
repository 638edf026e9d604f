"""Forward semantics and gradient checks for every autodiff primitive."""

import numpy as np
import pytest

from helpers import check_gradients

from sa2sr import autodiff as ad
from sa2sr.autodiff import DiffArray, Tape, backward


RNG = np.random.default_rng(20240211)


def test_leaky_relu_definition():
    out = ad.leaky_relu(ad.constant([-1.0, 0.0, 2.0]), alpha=0.3)
    np.testing.assert_allclose(out.values, [-0.3, 0.0, 2.0])


def test_leaky_relu_alpha_domain():
    with pytest.raises(ValueError, match="alpha"):
        ad.leaky_relu(ad.constant([1.0]), alpha=1.5)


def test_softmax_symmetry():
    out = ad.softmax(ad.constant([0.0, 0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.values, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_rows_sum_to_one():
    x = ad.constant(RNG.standard_normal((5, 7)) * 10)
    s = ad.softmax(x, axis=1)
    np.testing.assert_allclose(s.values.sum(axis=1), np.ones(5), atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = ad.constant(RNG.standard_normal((4, 6)))
    direct = ad.log_softmax(x, axis=1).values
    composed = np.log(ad.softmax(x, axis=1).values)
    np.testing.assert_allclose(direct, composed, atol=1e-10)


def test_reduce_var_population():
    out = ad.reduce_var(ad.constant([1.0, 3.0]))
    assert out.values == pytest.approx(1.0)


def test_sum_backward_is_ones():
    x = ad.leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        out = ad.reduce_sum(x)
    backward(tape, out)
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_quadratic_backward():
    x = ad.leaf([1.0, 2.0])
    with Tape() as tape:
        out = ad.reduce_sum(ad.mul(x, x))
    backward(tape, out)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_requires_scalar_root():
    x = ad.leaf([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, y)


def test_double_backward_rejected():
    x = ad.leaf([1.0, 2.0])
    with Tape() as tape:
        out = ad.reduce_sum(x)
    backward(tape, out)
    with pytest.raises(ValueError, match="consumed"):
        backward(tape, out)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        ad.add(ad.constant([1.0, 2.0]), ad.constant([1.0, 2.0, 3.0]))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="matmul"):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_log_domain_violation():
    with pytest.raises(ValueError, match="domain violation"):
        ad.log(ad.constant([1.0, -0.5]))


def test_div_by_zero_rejected():
    with pytest.raises(ValueError, match="zero"):
        ad.div(ad.constant([1.0]), ad.constant([0.0]))


def test_no_tape_means_no_gradients():
    x = ad.leaf([1.0, 2.0])
    out = ad.reduce_sum(ad.mul(x, x))  # outside any tape
    assert not out.requires_grad
    assert out.values == pytest.approx(5.0)


def test_determinism_bit_identical():
    x = RNG.standard_normal((6, 4))
    w = RNG.standard_normal((4, 3))

    def run():
        xl, wl = ad.leaf(x.copy()), ad.leaf(w.copy())
        with Tape() as tape:
            out = ad.reduce_sum(ad.tanh(ad.matmul(xl, wl)))
        backward(tape, out)
        return out.values.copy(), xl.grad.copy(), wl.grad.copy()

    a, b = run(), run()
    for lhs, rhs in zip(a, b):
        np.testing.assert_array_equal(lhs, rhs)


def test_values_finite_after_forward_ops():
    x = ad.constant(RNG.standard_normal((5, 4)) * 3)
    w = ad.constant(RNG.standard_normal((4, 4)))
    chain = ad.softmax(ad.tanh(ad.matmul(x, w)), axis=1)
    chain = ad.log_softmax(ad.sigmoid(chain), axis=1)
    assert np.all(np.isfinite(chain.values))


# ---------------------------------------------------------------------------
# finite-difference gradient checks, one per primitive


def _v(*shape):
    return RNG.standard_normal(shape)


@pytest.mark.parametrize(
    "name,build,arrays",
    [
        ("add", lambda a, b: ad.reduce_sum(ad.mul(ad.add(a, b), ad.add(a, b))), [_v(4), _v(4)]),
        ("add_scalar", lambda a, s: ad.reduce_sum(ad.mul(ad.add(a, s), a)), [_v(4), _v()]),
        ("sub", lambda a, b: ad.reduce_sum(ad.mul(ad.sub(a, b), a)), [_v(5), _v(5)]),
        ("mul", lambda a, b: ad.reduce_sum(ad.mul(a, b)), [_v(4), _v(4)]),
        ("mul_scalar", lambda a, s: ad.reduce_sum(ad.mul(a, s)), [_v(4), _v()]),
        ("div", lambda a, b: ad.reduce_sum(ad.div(a, b)), [_v(4), np.abs(_v(4)) + 1.0]),
        ("neg", lambda a: ad.reduce_sum(ad.mul(ad.neg(a), a)), [_v(4)]),
        ("power", lambda a: ad.reduce_sum(ad.power(a, -0.5)), [np.abs(_v(4)) + 0.5]),
        ("clip_min", lambda a: ad.reduce_sum(ad.mul(ad.clip_min(a, 0.1), a)), [np.abs(_v(4)) + 0.5]),
        ("matmul22", lambda a, b: ad.reduce_sum(ad.matmul(a, b)), [_v(3, 4), _v(4, 2)]),
        ("matmul21", lambda a, b: ad.reduce_sum(ad.matmul(a, b)), [_v(3, 4), _v(4)]),
        ("matmul12", lambda a, b: ad.reduce_sum(ad.matmul(a, b)), [_v(3), _v(3, 2)]),
        ("transpose", lambda a, b: ad.reduce_sum(ad.matmul(ad.transpose(a), b)), [_v(3, 4), _v(3, 2)]),
        ("reshape", lambda a: ad.reduce_sum(ad.mul(ad.reshape(a, (6,)), ad.reshape(a, (6,)))), [_v(2, 3)]),
        ("tanh", lambda a: ad.reduce_sum(ad.tanh(a)), [_v(5)]),
        ("sigmoid", lambda a: ad.reduce_sum(ad.sigmoid(a)), [_v(5)]),
        ("leaky_relu", lambda a: ad.reduce_sum(ad.leaky_relu(a, 0.3)), [np.abs(_v(5)) + 0.2]),
        ("leaky_relu_neg", lambda a: ad.reduce_sum(ad.leaky_relu(a, 0.3)), [-np.abs(_v(5)) - 0.2]),
        ("exp", lambda a: ad.reduce_sum(ad.exp(a)), [_v(5)]),
        ("log", lambda a: ad.reduce_sum(ad.log(a)), [np.abs(_v(5)) + 0.5]),
        ("logaddexp", lambda a, b: ad.reduce_sum(ad.logaddexp(a, b)), [_v(5), _v(5)]),
        ("softmax", lambda a, c=_v(3, 4): ad.reduce_sum(ad.mul(ad.softmax(a, 1), ad.constant(c))), [_v(3, 4)]),
        ("log_softmax", lambda a, c=_v(3, 4): ad.reduce_sum(ad.mul(ad.log_softmax(a, 1), ad.constant(c))), [_v(3, 4)]),
        ("concat", lambda a, b: ad.reduce_sum(ad.mul(ad.concat([a, b], 0), ad.concat([b, a], 0))), [_v(3), _v(3)]),
        ("stack_rows", lambda a, b, c=_v(2, 4): ad.reduce_sum(ad.mul(ad.stack_rows([a, b]), ad.constant(c))), [_v(4), _v(4)]),
        ("getitem", lambda a: ad.reduce_sum(ad.mul(a[1:3], a[0:2])), [_v(4)]),
        ("getitem_2d", lambda a: ad.reduce_sum(a[1]), [_v(3, 4)]),
        ("take_rows", lambda a, c=_v(3, 3): ad.reduce_sum(ad.mul(ad.take(a, [0, 2, 2], 0), ad.constant(c))), [_v(4, 3)]),
        ("take_cols", lambda a, c=_v(3, 3): ad.reduce_sum(ad.mul(ad.take(a, [1, 1, 0], 1), ad.constant(c))), [_v(3, 2)]),
        ("reduce_sum_axis", lambda a, c=_v(4): ad.reduce_sum(ad.mul(ad.reduce_sum(a, 0), ad.constant(c))), [_v(3, 4)]),
        ("reduce_mean", lambda a: ad.reduce_mean(a), [_v(3, 4)]),
        ("reduce_mean_axis", lambda a, c=_v(3): ad.reduce_sum(ad.mul(ad.reduce_mean(a, 1), ad.constant(c))), [_v(3, 4)]),
        ("reduce_var", lambda a: ad.reduce_var(a), [_v(6)]),
        ("reduce_var_axis", lambda a, c=_v(4): ad.reduce_sum(ad.mul(ad.reduce_var(a, 0), ad.constant(c))), [_v(3, 4)]),
        ("masked_mean", lambda a: ad.reduce_sum(ad.masked_mean(a, [True, False, True, True], 0)), [_v(4, 3)]),
        ("add_rowvec", lambda a, v: ad.reduce_sum(ad.mul(ad.add_rowvec(a, v), a)), [_v(3, 4), _v(4)]),
        ("mul_rowvec", lambda a, v: ad.reduce_sum(ad.mul_rowvec(a, v)), [_v(3, 4), _v(4)]),
    ],
)
def test_primitive_gradients(name, build, arrays):
    check_gradients(build, arrays)


def test_composite_graph_gradient():
    """A deeper composite touching most primitives at once."""

    def build(x, w1, b1, w2):
        h = ad.tanh(ad.add_rowvec(ad.matmul(x, w1), b1))
        h = ad.leaky_relu(h, 0.3)
        s = ad.softmax(ad.matmul(h, w2), axis=1)
        picked = ad.take(s, [0, 2], axis=1)
        return ad.add(ad.reduce_mean(ad.log(picked)), ad.reduce_var(h))

    check_gradients(build, [_v(5, 3), _v(3, 4), _v(4), _v(4, 3)])


def test_shared_subexpression_accumulates():
    x = ad.leaf([2.0, -1.0])
    with Tape() as tape:
        y = ad.add(ad.mul(x, x), ad.mul(ad.constant(3.0), x))
        out = ad.reduce_sum(y)
    backward(tape, out)
    np.testing.assert_allclose(x.grad, [7.0, 1.0])  # 2x + 3
