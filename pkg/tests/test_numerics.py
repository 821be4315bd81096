import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ames import numerics
from ames.numerics import ContractViolation


def erf_series(x, terms=60):
    # Maclaurin series; accurate for |x| <= 3 at double precision
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


def attention_weights(rng, d, scale=0.5):
    names = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
    return {n: rng.standard_normal((d, d) if n.startswith("w") else d) * scale for n in names}


def naive_attention(x, mask, w, heads):
    """Row-by-row reference with explicit loops over heads and rows."""
    k, d = x.shape
    dh = d // heads
    q = x @ w["wq"] + w["bq"]
    kk = x @ w["wk"] + w["bk"]
    v = x @ w["wv"] + w["bv"]
    ctx = np.zeros((k, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(k):
            allowed = [j for j in range(k) if mask[i, j]]
            s = np.array([q[i, sl] @ kk[j, sl] / math.sqrt(dh) for j in allowed])
            p = np.exp(s - s.max())
            p /= p.sum()
            ctx[i, sl] = sum(pj * v[j, sl] for pj, j in zip(p, allowed))
    return ctx @ w["wo"] + w["bo"]


# ---------------------------------------------------------------- erf


def test_erf_zero():
    assert numerics.erf(0.0) == 0.0


def test_erf_one_matches_series():
    assert abs(numerics.erf(1.0) - 0.8427007929) < 1e-9
    assert abs(numerics.erf(1.0) - erf_series(1.0)) < 1e-14


@given(st.floats(-3, 3, allow_nan=False))
def test_erf_odd_and_matches_series(x):
    assert numerics.erf(-x) == -numerics.erf(x)
    assert abs(numerics.erf(x) - erf_series(x)) < 1e-12


def test_erf_bounded_and_monotone():
    x = np.linspace(-6, 6, 2001)
    y = numerics.erf(x)
    assert np.all(np.abs(y) <= 1.0)
    assert np.all(np.diff(y) >= 0)


def test_erf_grad_finite_difference():
    x = np.linspace(-2, 2, 41)
    h = 1e-6
    fd = (numerics.erf(x + h) - numerics.erf(x - h)) / (2 * h)
    np.testing.assert_allclose(numerics.erf_grad(x), fd, rtol=1e-7, atol=1e-9)


def test_gelu_grad_finite_difference():
    x = np.linspace(-4, 4, 81)
    h = 1e-6
    fd = (numerics.gelu(x + h) - numerics.gelu(x - h)) / (2 * h)
    np.testing.assert_allclose(numerics.gelu_grad(x), fd, rtol=1e-6, atol=1e-8)


def test_sigmoid_values():
    assert numerics.sigmoid(0.0) == 0.5
    assert abs(numerics.sigmoid(2.0) - 0.8807970780) < 1e-9
    assert numerics.sigmoid(-1000.0) == 0.0
    assert numerics.sigmoid(1000.0) == 1.0


# ---------------------------------------------------------- layer norm


def test_layer_norm_constant_vector_is_zero():
    y = numerics.layer_norm(np.full(6, 3.7), np.ones(6), np.zeros(6))
    np.testing.assert_allclose(y, np.zeros(6), atol=1e-12)


def test_layer_norm_already_standard():
    y = numerics.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=0.0)
    np.testing.assert_array_equal(y, [1.0, -1.0])


def test_layer_norm_moments():
    x = np.random.default_rng(0).standard_normal(257) * 5 + 2
    y = numerics.layer_norm(x, np.ones(257), np.zeros(257), eps=0.0)
    assert abs(y.mean()) < 1e-9
    assert abs(y.var() - 1.0) < 1e-9


@settings(max_examples=50)
@given(
    hnp.arrays(np.float64, 16, elements=st.floats(-10, 10)),
    st.floats(0.1, 100),
    st.floats(-50, 50),
)
def test_layer_norm_affine_invariance(x, a, c):
    if np.ptp(x) < 1e-3:
        return
    g, b = np.ones(16), np.zeros(16)
    y1 = numerics.layer_norm(x, g, b, eps=1e-12)
    y2 = numerics.layer_norm(a * x + c, g, b, eps=1e-12)
    np.testing.assert_allclose(y1, y2, atol=1e-6)


def test_layer_norm_backward_finite_difference():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 5))
    g, b = rng.standard_normal(5), rng.standard_normal(5)
    dy = rng.standard_normal((3, 5))
    _, cache = numerics.layer_norm(x, g, b, return_cache=True)
    dx, dg, db = numerics.layer_norm_backward(dy, cache)
    h = 1e-6

    def f(x_, g_, b_):
        return np.sum(dy * numerics.layer_norm(x_, g_, b_))

    for arr, grad in ((x, dx), (g, dg), (b, db)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = f(x, g, b)
            arr[idx] = old - h
            dn = f(x, g, b)
            arr[idx] = old
            fd[idx] = (up - dn) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)


# ----------------------------------------------------------- attention


def test_attention_single_token():
    rng = np.random.default_rng(2)
    w = attention_weights(rng, 4)
    x = rng.standard_normal((1, 4))
    out = numerics.masked_attention(x, np.ones((1, 1), bool), w, heads=2)
    expected = (x @ w["wv"] + w["bv"]) @ w["wo"] + w["bo"]
    np.testing.assert_allclose(out, expected, rtol=1e-14)


def test_attention_single_allowed_column():
    rng = np.random.default_rng(3)
    w = attention_weights(rng, 4)
    x = rng.standard_normal((4, 4))
    mask = np.ones((4, 4), bool)
    mask[1] = False
    mask[1, 3] = True
    out = numerics.masked_attention(x, mask, w, heads=2)
    expected = (x[3] @ w["wv"] + w["bv"]) @ w["wo"] + w["bo"]
    np.testing.assert_allclose(out[1], expected, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_naive(seed):
    rng = np.random.default_rng(seed)
    k, d = 5, 8
    w = attention_weights(rng, d)
    x = rng.standard_normal((k, d))
    mask = rng.random((k, k)) < 0.5
    mask[:, -1] = True
    out = numerics.masked_attention(x, mask, w, heads=2)
    ref = naive_attention(x, mask, w, 2)
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_attention_rows_sum_to_one_and_masked_zero():
    rng = np.random.default_rng(4)
    k, d = 7, 8
    w = attention_weights(rng, d)
    x = rng.standard_normal((k, d))
    mask = rng.random((k, k)) < 0.4
    mask[:, 0] = True
    a = numerics.attention_weights(x, mask, w, heads=4)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)
    assert np.all(a[:, ~mask] == 0.0)


def test_attention_masked_token_perturbation_is_invisible():
    rng = np.random.default_rng(5)
    k, d = 6, 8
    w = attention_weights(rng, d)
    x = rng.standard_normal((k, d))
    mask = np.ones((k, k), bool)
    mask[0, 4] = False
    y1 = numerics.masked_attention(x, mask, w, heads=2)
    x2 = x.copy()
    x2[4] += rng.standard_normal(d) * 10
    y2 = numerics.masked_attention(x2, mask, w, heads=2)
    np.testing.assert_array_equal(y1[0], y2[0])


def test_attention_batched_equals_loop():
    rng = np.random.default_rng(6)
    w = attention_weights(rng, 8)
    x = rng.standard_normal((3, 5, 8))
    masks = rng.random((3, 5, 5)) < 0.5
    masks[..., -1] = True
    out = numerics.masked_attention(x, masks, w, heads=2)
    for b in range(3):
        np.testing.assert_allclose(out[b], numerics.masked_attention(x[b], masks[b], w, heads=2), rtol=1e-13)


def test_attention_float32_close_to_float64():
    rng = np.random.default_rng(7)
    w = attention_weights(rng, 8)
    x = rng.standard_normal((5, 8))
    mask = np.ones((5, 5), bool)
    w32 = {k: v.astype(np.float32) for k, v in w.items()}
    y32 = numerics.masked_attention(x.astype(np.float32), mask, w32, heads=2)
    assert y32.dtype == np.float32
    np.testing.assert_allclose(y32, numerics.masked_attention(x, mask, w, heads=2), rtol=1e-4, atol=1e-4)


def test_attention_contract_violations():
    rng = np.random.default_rng(8)
    w = attention_weights(rng, 6)
    x = rng.standard_normal((3, 6))
    with pytest.raises(ContractViolation):
        numerics.masked_attention(x, np.ones((3, 3), bool), w, heads=4)
    bad = np.ones((3, 3), bool)
    bad[1] = False
    with pytest.raises(ContractViolation):
        numerics.masked_attention(x, bad, w, heads=2)
    with pytest.raises(ContractViolation):
        numerics.masked_attention(x, np.ones((4, 4), bool), w, heads=2)


def test_attention_backward_finite_difference():
    rng = np.random.default_rng(9)
    k, d = 4, 4
    w = attention_weights(rng, d)
    x = rng.standard_normal((k, d))
    mask = rng.random((k, k)) < 0.6
    mask[:, 0] = True
    dy = rng.standard_normal((k, d))
    _, cache = numerics.masked_attention(x, mask, w, 2, return_cache=True)
    dx, grads = numerics.masked_attention_backward(dy, cache, w)
    h = 1e-6

    def f():
        return np.sum(dy * numerics.masked_attention(x, mask, w, 2))

    targets = [(x, dx)] + [(w[n], grads[n]) for n in ("wq", "wk", "wv", "wo", "bq", "bv", "bo")]
    for arr, grad in targets:
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = f()
            arr[idx] = old - h
            dn = f()
            arr[idx] = old
            fd[idx] = (up - dn) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)
    # key bias never changes the softmax (row-constant shift)
    np.testing.assert_allclose(grads["bk"], 0.0, atol=1e-12)


def test_softmax_stable_for_large_inputs():
    s = numerics.softmax(np.array([1000.0, 1000.0, -1e9]))
    np.testing.assert_allclose(s, [0.5, 0.5, 0.0])
