from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from streamssm.kernels import (cross_attention, rms_norm, sigmoid, silu, smooth_l1, softmax,
                               softplus, swiglu_ffn)

finite = st.floats(-30, 30, allow_nan=False)


def test_sigmoid_extremes_do_not_overflow():
    with np.errstate(all="raise"):
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_softplus_matches_log1p_exp_and_is_linear_for_large_inputs():
    z = np.linspace(-20, 20, 41)
    np.testing.assert_allclose(softplus(z), [math.log1p(math.exp(v)) for v in z], rtol=1e-13)
    assert softplus(800.0) == 800.0


def test_silu_oracle():
    z = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_allclose(silu(z), z / (1 + np.exp(-z)), rtol=1e-15)


@given(arrays(float, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one(z):
    p = softmax(z)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
    assert np.all(p >= 0)


def test_rms_norm_loop_oracle():
    rng = np.random.default_rng(0)
    x, g = rng.standard_normal((4, 6)), rng.standard_normal(6)
    expect = np.array([[g[j] * r[j] / math.sqrt(sum(v * v for v in r) / 6 + 1e-6) for j in range(6)]
                       for r in x])
    np.testing.assert_allclose(rms_norm(x, g), expect, rtol=1e-13)


def test_rms_norm_zero_row_with_zero_eps_and_bad_inputs():
    np.testing.assert_array_equal(rms_norm(np.zeros((2, 3)), np.ones(3), eps=0.0), 0.0)
    with pytest.raises(ValueError):
        rms_norm(np.ones((2, 3)), np.ones(4))
    with pytest.raises(ValueError):
        rms_norm(np.ones(3), np.ones(3), eps=-1.0)


def test_swiglu_elementwise_oracle():
    rng = np.random.default_rng(1)
    d, f = 3, 5
    x = rng.standard_normal((2, d))
    Wg, Wu, Wd = rng.standard_normal((d, f)), rng.standard_normal((d, f)), rng.standard_normal((f, d))
    expect = np.zeros((2, d))
    for n in range(2):
        for k in range(f):
            g = sum(x[n, i] * Wg[i, k] for i in range(d))
            u = sum(x[n, i] * Wu[i, k] for i in range(d))
            expect[n] += g / (1 + math.exp(-g)) * u * Wd[k]
    np.testing.assert_allclose(swiglu_ffn(x, Wg, Wu, Wd), expect, rtol=1e-12)
    with pytest.raises(ValueError):
        swiglu_ffn(x, Wg, Wu, Wd.T)


@pytest.mark.parametrize("e,expect", [(0.0, 0.0), (0.5, 0.125), (1.0, 0.5), (3.0, 2.5)])
def test_smooth_l1_piecewise_values(e, expect):
    # quadratic 0.5 e^2 below 1, linear e - 0.5 above
    assert smooth_l1(np.array([e]), np.array([0.0])) == pytest.approx(expect, abs=1e-15)


def test_smooth_l1_rejects_bad_input():
    with pytest.raises(ValueError):
        smooth_l1(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        smooth_l1(np.zeros(2), np.zeros(2), beta=0.0)


def test_cross_attention_per_head_loop_oracle():
    rng = np.random.default_rng(2)
    Q, M, d, heads = 2, 5, 6, 3
    q, k, v = rng.standard_normal((Q, d)), rng.standard_normal((M, d)), rng.standard_normal((M, d))
    e = d // heads
    expect = np.zeros((Q, d))
    for h in range(heads):
        sl = slice(h * e, (h + 1) * e)
        for i in range(Q):
            s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(e) for j in range(M)])
            w = np.exp(s - s.max())
            w /= w.sum()
            expect[i, sl] = sum(w[j] * v[j, sl] for j in range(M))
    np.testing.assert_allclose(cross_attention(q, k, v, heads), expect, rtol=1e-12)


@settings(max_examples=25)
@given(st.integers(1, 4))
def test_cross_attention_broadcasts_over_key_batches(batch):
    rng = np.random.default_rng(batch)
    q = rng.standard_normal((2, 4))
    kv = rng.standard_normal((batch, 3, 4))
    out = cross_attention(q, kv, kv, 2)
    for b in range(batch):
        np.testing.assert_allclose(out[b], cross_attention(q, kv[b], kv[b], 2), rtol=1e-13)
