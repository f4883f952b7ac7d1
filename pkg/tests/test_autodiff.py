"""Reverse-mode engine: every op's gradient is checked against central
finite differences, plus a few hand-verifiable graph and broadcasting cases.
"""

import numpy as np
import pytest
from scipy import special

from slidemil import autodiff as ad


def _check(loss_fn, params, tol=1e-6):
    err = ad.gradient_max_rel_error(loss_fn, params)
    assert err <= tol, f"finite-difference mismatch: {err:.3e}"


def _vars(rng, **shapes):
    return {name: ad.Var(rng.standard_normal(shape), requires_grad=True)
            for name, shape in shapes.items()}


# --- elementwise and arithmetic -------------------------------------------


def test_add_mul_broadcast_gradients():
    rng = np.random.default_rng(0)
    p = _vars(rng, a=(4, 3), b=(3,), c=(4, 1))

    def loss():
        return ad.vsum(ad.mul(ad.add(p["a"], p["b"]), p["c"]))

    _check(loss, p)


def test_sub_div_gradients():
    rng = np.random.default_rng(1)
    p = _vars(rng, a=(5,), b=(5,))
    p["b"].data = np.abs(p["b"].data) + 1.0  # keep the divisor away from 0

    def loss():
        return ad.vsum(ad.div(ad.sub(p["a"], p["b"]), p["b"]))

    _check(loss, p)


@pytest.mark.parametrize("op", [ad.tanh, ad.sigmoid, ad.exp])
def test_smooth_unary_gradients(op):
    rng = np.random.default_rng(2)
    p = _vars(rng, x=(6,))

    def loss():
        return ad.vsum(op(p["x"]))

    _check(loss, p)


def test_log_gradient():
    rng = np.random.default_rng(3)
    p = _vars(rng, x=(6,))
    p["x"].data = np.abs(p["x"].data) + 0.5

    def loss():
        return ad.vsum(ad.log(p["x"]))

    _check(loss, p)


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(4)
    p = _vars(rng, x=(8,))
    p["x"].data[np.abs(p["x"].data) < 0.1] += 0.5

    def loss():
        return ad.vsum(ad.relu(p["x"]))

    _check(loss, p)


# --- shape ops -------------------------------------------------------------


def test_matmul_gradients():
    rng = np.random.default_rng(5)
    p = _vars(rng, a=(4, 3), b=(3, 5))

    def loss():
        return ad.vsum(ad.matmul(p["a"], p["b"]))

    _check(loss, p)


def test_matmul_batched_leading_broadcast():
    rng = np.random.default_rng(6)
    p = _vars(rng, a=(2, 4, 3), b=(3, 5))

    def loss():
        return ad.vsum(ad.matmul(p["a"], p["b"]))

    _check(loss, p)


def test_transpose_reshape_getitem():
    rng = np.random.default_rng(7)
    p = _vars(rng, x=(4, 6))

    def loss():
        t = ad.transpose(ad.reshape(p["x"], (2, 2, 6)), (1, 0, 2))
        return ad.vsum(ad.getitem(t, (0, slice(None), slice(1, 4))))

    _check(loss, p)


def test_concat_and_take_rows():
    rng = np.random.default_rng(8)
    p = _vars(rng, a=(3, 4), b=(2, 4))

    def loss():
        joined = ad.concat([p["a"], p["b"]], axis=0)
        picked = ad.take_rows(joined, np.array([0, 4, 0, 2]))
        return ad.vsum(picked)

    _check(loss, p)


def test_take_rows_accumulates_duplicates():
    x = ad.Var(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    out = ad.vsum(ad.take_rows(x, np.array([0, 0, 1])))
    out.backward()
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [1.0, 1.0]])


# --- reductions ------------------------------------------------------------


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False),
                                           (1, True), (-1, False)])
def test_sum_mean_gradients(axis, keepdims):
    rng = np.random.default_rng(9)
    p = _vars(rng, x=(3, 5))

    def loss():
        s = ad.vsum(p["x"], axis=axis, keepdims=keepdims)
        m = ad.vmean(p["x"], axis=axis, keepdims=keepdims)
        return ad.add(ad.vsum(ad.mul(s, s)), ad.vsum(ad.mul(m, m)))

    _check(loss, p)


def test_vmax_gradient_unique_max():
    rng = np.random.default_rng(10)
    p = _vars(rng, x=(4, 5))
    p["x"].data += np.arange(20).reshape(4, 5) * 0.01  # break ties

    def loss():
        return ad.vsum(ad.vmax(p["x"], axis=1))

    _check(loss, p)


def test_vmax_splits_gradient_across_ties():
    x = ad.Var(np.array([2.0, 2.0, 1.0]), requires_grad=True)
    ad.vmax(x).backward()
    np.testing.assert_array_equal(x.grad, [0.5, 0.5, 0.0])


# --- softmax family ---------------------------------------------------------


def test_logsumexp_matches_scipy_and_gradient():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 7))
    got = ad.logsumexp(ad.Var(x), axis=-1).data
    np.testing.assert_allclose(got, special.logsumexp(x, axis=-1),
                               rtol=1e-12)
    p = {"x": ad.Var(x, requires_grad=True)}
    _check(lambda: ad.vsum(ad.logsumexp(p["x"], axis=-1)), p)


def test_softmax_values_and_gradient():
    x = np.array([np.log(3.0), 0.0])
    np.testing.assert_allclose(ad.softmax(ad.Var(x)).data, [0.75, 0.25],
                               rtol=1e-12)
    rng = np.random.default_rng(12)
    p = _vars(rng, x=(4, 5))

    def loss():
        w = ad.softmax(p["x"], axis=-1)
        return ad.vsum(ad.mul(w, w))

    _check(loss, p)


def test_log_softmax_matches_scipy_and_gradient():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 6))
    np.testing.assert_allclose(ad.log_softmax(ad.Var(x)).data,
                               special.log_softmax(x, axis=-1), rtol=1e-12)
    p = {"x": ad.Var(x, requires_grad=True)}

    def loss():
        lp = ad.log_softmax(p["x"], axis=-1)
        return ad.vsum(ad.mul(lp, lp))

    _check(loss, p)


# --- layer norm, conv, dropout ----------------------------------------------


def test_layer_norm_values():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    g = np.ones(4)
    b = np.zeros(4)
    out = ad.layer_norm(ad.Var(x), ad.Var(g), ad.Var(b)).data
    mu, var = x.mean(), x.var()
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-5),
                               rtol=1e-12)


def test_layer_norm_gradients():
    rng = np.random.default_rng(14)
    p = _vars(rng, x=(3, 6), g=(6,), b=(6,))

    def loss():
        out = ad.layer_norm(p["x"], p["g"], p["b"])
        return ad.vsum(ad.mul(out, out))

    _check(loss, p, tol=1e-5)


def test_depthwise_conv_gradients():
    rng = np.random.default_rng(15)
    p = _vars(rng, x=(6, 5, 2), k=(3, 3, 2))

    def loss():
        out = ad.depthwise_conv(p["x"], p["k"])
        return ad.vsum(ad.mul(out, out))

    _check(loss, p, tol=1e-5)


def test_dropout_eval_and_p_zero_are_identity():
    rng = np.random.default_rng(16)
    x = ad.Var(rng.standard_normal((5, 4)), requires_grad=True)
    assert ad.dropout(x, 0.5, rng, train=False) is x
    assert ad.dropout(x, 0.0, rng, train=True) is x


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(17)
    x = ad.Var(np.ones((2000,)))
    out = ad.dropout(x, 0.25, np.random.default_rng(0), train=True).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], 1.0 / 0.75, rtol=1e-12)
    assert abs(kept.mean() - 0.75) < 0.05


def test_dropout_deterministic_given_rng_seed():
    x = ad.Var(np.ones((100,)))
    a = ad.dropout(x, 0.5, np.random.default_rng(3), train=True).data
    b = ad.dropout(x, 0.5, np.random.default_rng(3), train=True).data
    np.testing.assert_array_equal(a, b)


# --- graph mechanics ---------------------------------------------------------


def test_diamond_graph_accumulates_once():
    x = ad.Var(np.array(2.0), requires_grad=True)
    y = ad.mul(x, x)            # x^2
    z = ad.add(y, y)            # 2 x^2 -> dz/dx = 4x = 8
    z.backward()
    np.testing.assert_allclose(x.grad, 8.0)


def test_backward_on_reused_subgraph():
    x = ad.Var(np.array([1.0, 2.0]), requires_grad=True)
    s = ad.vsum(x)
    out = ad.mul(s, s)          # (x0+x1)^2 -> grad 2*(x0+x1) = 6
    out.backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_no_grad_leaves_are_skipped():
    x = ad.Var(np.array(3.0), requires_grad=True)
    c = ad.Var(np.array(4.0))
    ad.mul(x, c).backward()
    np.testing.assert_allclose(x.grad, 4.0)
    assert c.grad is None


def test_zero_grads_resets():
    x = ad.Var(np.array(3.0), requires_grad=True)
    ad.mul(x, x).backward()
    assert x.grad is not None
    ad.zero_grads({"x": x})
    assert x.grad is None


def test_operator_sugar_matches_functions():
    rng = np.random.default_rng(18)
    a = ad.Var(rng.standard_normal((3, 3)), requires_grad=True)
    b = ad.Var(rng.standard_normal((3, 3)), requires_grad=True)
    lhs = (a @ b + a - b) * a
    rhs = ad.mul(ad.sub(ad.add(ad.matmul(a, b), a), b), a)
    np.testing.assert_array_equal(lhs.data, rhs.data)


def test_sum_to_shape_broadcasting():
    g = np.ones((4, 3))
    np.testing.assert_array_equal(ad._sum_to_shape(g, (3,)), [4.0, 4.0, 4.0])
    np.testing.assert_array_equal(ad._sum_to_shape(g, (4, 1)),
                                  [[3.0]] * 4)
    np.testing.assert_array_equal(ad._sum_to_shape(g, (4, 3)), g)
    assert ad._sum_to_shape(g, ()).shape == ()
