import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lps import autodiff as ad
from lps.nn import mlp_forward
from conftest import small_mlp


def test_square_grad():
    loss, g = ad.reverse_grad(lambda x: ad.square(x), np.array(3.0))
    assert loss == 9.0 and g == 6.0


def test_stop_gradient_factor():
    _, g = ad.reverse_grad(lambda x: ad.mul(ad.stop_gradient(x), x), np.array(3.0))
    assert g == 3.0


def test_stop_gradient_forward_bitwise(rng):
    params = small_mlp(rng, 3, 2)
    x = rng.standard_normal((4, 3))
    plain = ad.reverse_grad(lambda p: ad.sum(mlp_forward(p, x)), params)[0]
    stopped, grads = ad.reverse_grad(lambda p: ad.sum(ad.stop_gradient(mlp_forward(p, x))), params)
    assert stopped == plain
    assert all(np.all(g == 0) for g in grads)


def test_mlp_grad_matches_finite_differences(rng):
    params = small_mlp(rng, 3, 2)
    x = rng.standard_normal((6, 3))
    err = ad.finite_diff_check(lambda p: ad.mean(ad.square(mlp_forward(p, x))), params)
    assert err < 1e-4


def test_non_scalar_loss_rejected(rng):
    with pytest.raises(ValueError):
        ad.reverse_grad(lambda x: ad.square(x), np.ones(3))


def test_nan_forward_rejected():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        ad.reverse_grad(lambda x: ad.sum(ad.div(x, 0.0 * x)), np.zeros(2))


def test_jvp_scalar():
    y, t = ad.jvp(lambda p, x: ad.square(x), None, [np.array(3.0)], [np.array(1.0)])
    assert y == 9.0 and t == 6.0


def test_jvp_linear(rng):
    W = rng.standard_normal((3, 4))
    v = rng.standard_normal((2, 3))
    _, t = ad.jvp(lambda p, x: ad.matmul(x, p), W, [rng.standard_normal((2, 3))], [v])
    np.testing.assert_allclose(t, v @ W, rtol=0, atol=1e-14)


def test_jvp_shape_mismatch():
    with pytest.raises(ValueError):
        ad.jvp(lambda p, x: x, None, [np.ones(3)], [np.ones(2)])


def test_jvp_mlp_matches_finite_differences(rng):
    params = small_mlp(rng, 3, 2)
    err = ad.finite_diff_check(lambda p, x: mlp_forward(p, x), params, [rng.standard_normal((5, 3))], mode="jvp")
    assert err < 1e-4


def test_finite_diff_examples():
    assert ad.finite_diff_check(lambda x: ad.square(x), np.array(3.0)) < 1e-8
    assert ad.finite_diff_check(lambda p, x: x, None, [np.ones(4)], mode="jvp") == 0.0
    assert ad.finite_diff_check(lambda x: ad.mul(ad.sum(x), 0.0), np.ones(3)) == 0.0
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda x: ad.square(x), np.array(1.0), step=0)


def test_jvp_agrees_with_gradient(rng):
    params = small_mlp(rng, 3, 1)
    x = rng.standard_normal((1, 3))
    prog = lambda p, xx: ad.sum(mlp_forward(p, xx))
    _, _, (gx,) = ad.reverse_grad(prog, params, [x], wrt_inputs=True)
    for i in range(3):
        e = np.zeros_like(x)
        e[0, i] = 1.0
        _, t = ad.jvp(prog, params, [x], [e])
        assert abs(float(t) - gx[0, i]) < 1e-12


def test_mixing_modes_rejected():
    t = ad.Tensor(np.ones(2))
    d = ad.Dual(np.ones(2), np.ones(2))
    with pytest.raises(TypeError):
        ad.add(t, d)


def test_float32_graph_stays_float32(rng):
    params = [p.astype(np.float32) for p in small_mlp(rng, 3, 2)]
    x = rng.standard_normal((4, 3)).astype(np.float32)
    _, grads = ad.reverse_grad(lambda p: ad.mean(ad.square(ad.mul(mlp_forward(p, x), 0.5))), params)
    assert all(g.dtype == np.float32 for g in grads)


UNARY = {
    "gelu": ad.gelu, "relu": ad.relu, "tanh": ad.tanh, "sin": ad.sin, "cos": ad.cos,
    "square": ad.square, "neg": ad.neg,
    "norm": ad.norm, "sum0": lambda x: ad.sum(x, axis=0), "mean": ad.mean,
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "concat": lambda x: ad.concat(x, ad.mul(x, 2.0), axis=-1),
}


@settings(max_examples=25, deadline=None)
@given(name=st.sampled_from(sorted(UNARY)), rows=st.integers(1, 4), cols=st.integers(1, 4),
       seed=st.integers(0, 10_000))
def test_unary_primitives_match_finite_differences(name, rows, cols, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((rows, cols))
    if name == "relu":
        x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep away from the kink
    w = r.standard_normal(np.shape(UNARY[name](x)))
    prog = lambda p: ad.sum(ad.mul(UNARY[name](p), w))
    assert ad.finite_diff_check(prog, x) < 1e-4
    assert ad.finite_diff_check(lambda p, xx: UNARY[name](xx), None, [x], mode="jvp") < 1e-4


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div, "minimum": ad.minimum,
}


@settings(max_examples=25, deadline=None)
@given(name=st.sampled_from(sorted(BINARY)), rows=st.integers(1, 4), cols=st.integers(1, 4),
       broadcast=st.booleans(), seed=st.integers(0, 10_000))
def test_binary_primitives_match_finite_differences(name, rows, cols, broadcast, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((rows, cols))
    b = r.standard_normal((1, cols) if broadcast else (rows, cols)) + (3.0 if name == "div" else 0.0)
    prog = lambda p: ad.sum(ad.square(BINARY[name](p[0], p[1])))
    assert ad.finite_diff_check(prog, [a, b]) < 1e-4


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 4), k=st.integers(1, 4), m=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_affine_and_matmul(n, k, m, seed):
    r = np.random.default_rng(seed)
    x, W, b = r.standard_normal((n, k)), r.standard_normal((k, m)), r.standard_normal(m)
    assert ad.finite_diff_check(lambda p: ad.sum(ad.square(ad.affine(p[0], p[1], p[2]))), [x, W, b]) < 1e-4
    assert ad.finite_diff_check(lambda p: ad.sum(ad.gelu(ad.matmul(p[0], p[1]))), [x, W]) < 1e-4
    _, t = ad.jvp(lambda p, xx, ww: ad.affine(xx, ww, b), None, [x, W], [x, W])
    np.testing.assert_allclose(t, 2 * x @ W, atol=1e-12)
