from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamssm.ssm import (Discretization, SsmParams, SsmState, causal_convolve, combine,
                           discretize_decay, lti_kernel_materialize, lti_recurrence,
                           rotate_pairs, ssm_scan, ssm_step)


def make_params(seed=0, d=6, H=2, N=4, P=3, R=2):
    return SsmParams.init(np.random.default_rng(seed), d, H, N, P, R)


def reference_step(p: SsmParams, S, U_prev, Theta, u, mode="trapezoidal"):
    """Per-head loop; rotations done as complex multiplication of (even, odd) pairs."""
    H, N, P, R = p.heads, p.d_state, p.d_head, p.rank
    sp = lambda z: math.log1p(math.exp(z))
    B = (u @ p.W_B).reshape(N, R)
    C = (u @ p.W_C).reshape(N, R)
    x = (u @ p.W_X).reshape(H, P)
    gate = u @ p.W_gate
    gate = gate / (1 + np.exp(-gate))
    S, U_prev, Theta = S.copy(), U_prev.copy(), Theta.copy()
    U_new = np.zeros_like(S)
    y_heads = np.zeros((H, P))
    for h in range(H):
        dt = sp(float(u @ p.W_delta[:, h] + p.b_delta[h]))
        a = math.exp(-dt * math.exp(p.A_log[h]))
        lam = 1 / (1 + math.exp(-float(u @ p.W_lambda[:, h] + p.b_lambda[h])))
        Theta[h] = np.mod(Theta[h] + dt * p.omega[h], 2 * math.pi)
        rot = np.exp(-1j * Theta[h])[:, None]
        Bz = (B[0::2] + 1j * B[1::2]) * rot
        Cz = (C[0::2] + 1j * C[1::2]) * rot
        Bt = np.empty((N, R)); Bt[0::2], Bt[1::2] = Bz.real, Bz.imag
        Ct = np.empty((N, R)); Ct[0::2], Ct[1::2] = Cz.real, Cz.imag
        X = p.mimo_in[h] * x[h]  # (R, P)
        U = dt * Bt @ X
        V = U if mode == "euler" else lam * U + (1 - lam) * a * U_prev[h]
        S[h] = a * S[h] + V
        U_new[h] = U
        Y = Ct.T @ S[h]  # (R, P)
        y_heads[h] = (p.mimo_out[h] * Y).sum(0)
    y = (y_heads.reshape(-1) * gate) @ p.W_out
    return y, S, U_new, Theta


@pytest.mark.parametrize("mode", ["trapezoidal", "euler"])
def test_step_matches_complex_rotation_oracle(mode):
    p = make_params(1)
    rng = np.random.default_rng(2)
    st_ = SsmState.zeros(p)
    S, Up, Th = st_.S, st_.U_prev, st_.Theta
    for _ in range(7):
        u = rng.standard_normal(p.d_model)
        y, st_ = ssm_step(p, st_, u, mode)
        y_ref, S, Up, Th = reference_step(p, S, Up, Th, u, mode)
        np.testing.assert_allclose(y, y_ref, rtol=1e-11, atol=1e-12)
        np.testing.assert_allclose(st_.S, S, rtol=1e-11, atol=1e-12)
        np.testing.assert_allclose(st_.Theta, Th, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("mode", list(Discretization))
@pytest.mark.parametrize("chunk", [1, 3, 4, 16])
def test_scan_equals_folded_steps(mode, chunk):
    p = make_params(3)
    u = np.random.default_rng(4).standard_normal((13, p.d_model))
    st_ = SsmState.zeros(p)
    ys = []
    for t in range(13):
        y, st_ = ssm_step(p, st_, u[t], mode)
        ys.append(y)
    y_scan, fin = ssm_scan(p, u, mode, chunk=chunk)
    np.testing.assert_allclose(y_scan, np.array(ys), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(fin.S, st_.S, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(fin.U_prev, st_.U_prev, rtol=1e-10, atol=1e-12)
    assert fin.t == st_.t == 13


def test_scan_resumes_from_state_and_batches():
    p = make_params(5)
    u = np.random.default_rng(6).standard_normal((2, 10, p.d_model))
    y_full, fin_full = ssm_scan(p, u)
    y_a, mid = ssm_scan(p, u[:, :4])
    y_b, fin = ssm_scan(p, u[:, 4:], state=mid)
    np.testing.assert_allclose(np.concatenate([y_a, y_b], axis=1), y_full, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(fin.S, fin_full.S, rtol=1e-10, atol=1e-12)
    for b in range(2):
        y_single, _ = ssm_scan(p, u[b])
        np.testing.assert_allclose(y_full[b], y_single, rtol=1e-12, atol=1e-13)


def test_step_does_not_mutate_input_state():
    p = make_params(7)
    st0 = SsmState.zeros(p)
    _, st1 = ssm_step(p, st0, np.ones(p.d_model))
    assert not st0.S.any() and st0.t == 0 and st1.t == 1


def test_state_size_is_independent_of_sequence_length():
    p = make_params(8)
    rng = np.random.default_rng(0)
    _, s1 = ssm_scan(p, rng.standard_normal((1, p.d_model)))
    _, s2 = ssm_scan(p, rng.standard_normal((300, p.d_model)))
    # S and U_prev: 2 heads x 4 x 3; phases: 2 x 2; float64
    assert s1.nbytes == s2.nbytes == (2 * 24 + 4) * 8


def test_phase_stays_wrapped():
    p = make_params(9)
    p.omega[:] = 50.0
    _, fin = ssm_scan(p, np.random.default_rng(1).standard_normal((40, p.d_model)))
    assert np.all((fin.Theta >= 0) & (fin.Theta < 2 * math.pi))


def test_input_validation():
    p = make_params(10)
    with pytest.raises(ValueError):
        ssm_step(p, SsmState.zeros(p), np.ones(p.d_model + 1))
    with pytest.raises(FloatingPointError):
        ssm_step(p, SsmState.zeros(p), np.full(p.d_model, np.nan))
    with pytest.raises(ValueError):
        ssm_scan(p, np.zeros((0, p.d_model)))
    with pytest.raises(ValueError):
        ssm_scan(p, np.zeros((3, p.d_model)), chunk=0)
    with pytest.raises(ValueError):
        ssm_step(p, SsmState.zeros(p, (2,)), np.ones(p.d_model))
    with pytest.raises(ValueError):
        SsmParams.shapes(4, 1, 3, 2, 1)


def test_init_ranges():
    p = make_params(12, H=3, N=8)
    assert np.all((p.A_log >= np.log(1e-3)) & (p.A_log <= np.log(1e-1)))
    assert np.all((p.omega >= 0) & (p.omega <= np.pi / 8))


def test_pure_rotation_preserves_state_norm():
    p = make_params(13)
    p.A_log[:] = -np.inf  # decay exactly 1
    st_ = SsmState.zeros(p)
    _, st_ = ssm_step(p, st_, np.random.default_rng(0).standard_normal(p.d_model), "euler")
    n0 = np.linalg.norm(st_.S)
    for _ in range(20):
        _, st_ = ssm_step(p, st_, np.zeros(p.d_model), "euler")
        assert abs(np.linalg.norm(st_.S) - n0) <= 1e-10


def test_rotate_pairs_preserves_norm_and_inverts():
    rng = np.random.default_rng(3)
    v, th = rng.standard_normal(6), rng.uniform(0, 7, 3)
    r = rotate_pairs(v, th)
    assert np.linalg.norm(r) == pytest.approx(np.linalg.norm(v), rel=1e-14)
    np.testing.assert_allclose(rotate_pairs(r, -th), v, atol=1e-14)
    with pytest.raises(ValueError):
        rotate_pairs(np.ones(3), np.ones(1))


def test_discretize_decay_bounds():
    a = discretize_decay(np.array([0.0, 0.5, 1e6]), np.log(2.0))
    np.testing.assert_allclose(a, [1.0, math.exp(-1.0), 0.0])
    with pytest.raises(ValueError):
        discretize_decay(-1.0, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(-5, 5)), min_size=3, max_size=3))
def test_combine_is_associative(items):
    (a, b, c) = [(np.float64(x), np.float64(y)) for x, y in items]
    left = combine(combine(a, b), c)
    right = combine(a, combine(b, c))
    np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-12)


def test_lti_kernel_convolution_and_recurrence_agree():
    B, C = np.array([0.5, -1.0]), np.array([2.0, 0.25])
    x = np.random.default_rng(0).standard_normal(50)
    K = lti_kernel_materialize(0.9, B, C, 50)
    np.testing.assert_allclose(causal_convolve(x, K), lti_recurrence(0.9, B, C, x), rtol=1e-12, atol=1e-13)
    with pytest.raises(ValueError):
        lti_kernel_materialize(0.9, B, C, 0)
