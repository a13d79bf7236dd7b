from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TINY_CONFIG
from streamssm.encoder import MICRO_CONFIG, Encoder
from streamssm.kernels import smooth_l1
from streamssm.ssl import (Heads, MaskSpec, TeacherState, TrainingError, _sum_of_terms, arm_loss,
                           ema_schedule, ema_update, future_loss, future_terms, jepa_masked_loss,
                           make_token_mask, masked_recon_loss, numeric_grad, stage1_loss,
                           stage2_loss, toy_batch, toy_train)


def mask_at(indices, n):
    return MaskSpec(np.array(indices), 1, len(indices) / n, n)


# -- masks -------------------------------------------------------------------------

def test_mask_cardinality_full_window():
    m = make_token_mask(80, 0.4, 1, np.random.default_rng(0))
    assert len(m.indices) == 32 and len(set(m.indices.tolist())) == 32


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 120), st.floats(0.05, 0.95), st.integers(1, 8), st.integers(0, 10**6))
def test_mask_blocks_are_disjoint_and_exact(n, ratio, block, seed):
    k = int(round(ratio * n))
    if k < 1:
        with pytest.raises(ValueError):
            make_token_mask(n, ratio, block, np.random.default_rng(seed))
        return
    m = make_token_mask(n, ratio, block, np.random.default_rng(seed))
    assert len(m.indices) == k and np.all(np.diff(m.indices) > 0)
    assert m.indices.min() >= 0 and m.indices.max() < n
    assert m.as_bool().sum() == k


def test_mask_reproducible_and_rejects_bad_args():
    a = make_token_mask(40, 0.4, 4, np.random.default_rng(3))
    b = make_token_mask(40, 0.4, 4, np.random.default_rng(3))
    assert np.array_equal(a.indices, b.indices)
    for args in [(10, 0.0), (10, 1.0), (10, 0.01)]:
        with pytest.raises(ValueError):
            make_token_mask(*args)
    with pytest.raises(ValueError):
        make_token_mask(10, 0.4, 0)


def test_uniform_masking_frequency():
    rng = np.random.default_rng(12)
    counts = np.zeros(20)
    for _ in range(10_000):
        counts[make_token_mask(20, 0.4, 1, rng).indices] += 1
    freq = counts / 10_000
    assert np.all(np.abs(freq - 0.4) <= 0.02)


def test_mask_apply_zeros_only_masked_tokens():
    x = np.ones((5, 2, 3))
    out = mask_at([1, 3], 5).apply(x)
    assert out[[1, 3]].sum() == 0 and out[[0, 2, 4]].sum() == 18 and x.sum() == 30


# -- losses -------------------------------------------------------------------------

def test_sum_of_terms_matches_looped_smooth_l1():
    rng = np.random.default_rng(0)
    pred, tgt = 2 * rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    loop = sum(smooth_l1(pred[i], tgt[i]) for i in range(6))
    assert _sum_of_terms(pred, tgt, 6) == pytest.approx(loop, rel=1e-13)


def test_arm_loss_oracle_and_hand_case():
    x = np.random.default_rng(1).standard_normal((5, 3))
    h = np.vstack([x[1:], np.zeros(3)])  # h_t equals the next target
    assert arm_loss(h, x, lambda z: z) == 0.0
    # G=2: single term l(g(h_0), x_1) with errors 0.5 and 2 -> (0.125 + 1.5) / 2
    assert arm_loss(np.array([[0.5, 2.0], [9.0, 9.0]]), np.zeros((2, 2)), lambda z: z) == pytest.approx(0.8125)
    with pytest.raises(ValueError):
        arm_loss(np.zeros((1, 2)), np.zeros((1, 2)), lambda z: z)


def test_masked_recon_single_token_and_mask_accounting():
    X = np.zeros((4, 1, 2))
    h = np.arange(8.0).reshape(4, 2)
    decode = lambda z: z.reshape(-1, 1, 2) * 0.25
    # token 2: prediction [1, 1.25] vs zeros -> (0.5 + 1.25 - 0.5) / 2... per element: 1 -> 0.5, 1.25 -> 0.75
    assert masked_recon_loss(h, X, mask_at([2], 4), decode) == pytest.approx((0.5 + 0.75) / 2)
    h2 = h.copy()
    h2[[0, 1, 3]] = 1e6  # reconstructions outside M never enter
    assert masked_recon_loss(h2, X, mask_at([2], 4), decode) == masked_recon_loss(h, X, mask_at([2], 4), decode)
    with pytest.raises(ValueError):
        masked_recon_loss(h, X, MaskSpec(np.array([], int), 1, 0.1, 4), decode)
    with pytest.raises(ValueError):
        masked_recon_loss(h, X, mask_at([2], 5), decode)


def test_stage1_weighting():
    rng = np.random.default_rng(2)
    h, tok = rng.standard_normal((6, TINY_CONFIG.d_model)), rng.standard_normal((6, TINY_CONFIG.d_model))
    X = rng.standard_normal((6, TINY_CONFIG.n_channels, TINY_CONFIG.patch_samples))
    heads = Heads.init(TINY_CONFIG, rng)
    m = mask_at([0, 4], 6)
    arm = arm_loss(h, tok, heads.g)
    rec = masked_recon_loss(h, X, m, heads.decode)
    assert stage1_loss(h, tok, X, m, heads, 1.0, 0.0) == arm
    assert stage1_loss(h, tok, X, m, heads) == pytest.approx(0.5 * arm + 0.5 * rec, rel=1e-15)


def test_jepa_and_future_oracles():
    rng = np.random.default_rng(3)
    ht = rng.standard_normal((10, TINY_CONFIG.d_model))
    ident = Heads.identity(TINY_CONFIG)
    m = mask_at([1, 5, 7], 10)
    assert jepa_masked_loss(ht, ht, m, ident.g_mask) == 0.0
    # hidden at t predicts t+k exactly when each future slot reads the matching later row
    oracle = lambda h: np.stack([ht[i + 1: i + 5] for i in range(len(h))])
    assert future_loss(ht, ht, oracle, 4) == 0.0
    assert stage2_loss(ht, ht, m, ident) > 0.0  # identity future head is not an oracle


def test_jepa_two_token_hand_case():
    hs = np.array([[0.0, 0.0], [2.0, 0.0]])
    ht = np.array([[5.0, 5.0], [0.0, 0.5]])
    # only token 1: errors 2 and 0.5 -> (1.5 + 0.125) / 2
    assert jepa_masked_loss(hs, ht, mask_at([1], 2), lambda z: z) == pytest.approx(0.8125)


def test_future_term_count_and_k1_reduction():
    assert len(future_terms(10, 4)) == 24
    rng = np.random.default_rng(4)
    hs, ht = rng.standard_normal((7, 3)), rng.standard_normal((7, 3))
    g1 = lambda h: h[:, None, :]
    assert future_loss(hs, ht, g1, 1) == pytest.approx(arm_loss(hs, ht, lambda z: z), rel=1e-15)
    loop = sum(smooth_l1(g1(hs[t: t + 1])[0, k - 1], ht[t + k]) for t, k in future_terms(7, 1))
    assert future_loss(hs, ht, g1, 1) == pytest.approx(loop, rel=1e-13)
    with pytest.raises(ValueError):
        future_loss(hs[:4], ht[:4], g1, 4)


# -- EMA ----------------------------------------------------------------------------

def test_ema_single_step_arithmetic():
    phi, theta = {"w": np.array([1.0, -2.0])}, {"w": np.array([3.0, 2.0])}
    np.testing.assert_array_equal(ema_update(phi, theta, 0.0)["w"], theta["w"])
    moved = ema_update(phi, theta, 0.9999)["w"] - phi["w"]
    np.testing.assert_allclose(moved, 1e-4 * (theta["w"] - phi["w"]), rtol=1e-9)
    assert phi["w"][0] == 1.0  # pure
    with pytest.raises(ValueError):
        ema_update(phi, theta, 1.0)
    with pytest.raises(ValueError):
        ema_update(phi, {"w": np.zeros(3)}, 0.5)
    with pytest.raises(ValueError):
        ema_update(phi, {"v": np.zeros(2)}, 0.5)


def test_ema_geometric_convergence():
    rng = np.random.default_rng(5)
    theta = {"a": rng.standard_normal(7), "b": rng.standard_normal((2, 3))}
    phi = {k: v + rng.standard_normal(v.shape) for k, v in theta.items()}
    gap0 = math.sqrt(sum(np.sum((phi[k] - theta[k]) ** 2) for k in theta))
    tau = 0.97
    for n in range(1, 201):
        phi = ema_update(phi, theta, tau)
        gap = math.sqrt(sum(np.sum((phi[k] - theta[k]) ** 2) for k in theta))
        assert abs(gap - tau ** n * gap0) <= 1e-10


def test_ema_schedule_ramp():
    assert ema_schedule(0, 200) == 0.99
    assert ema_schedule(5, 200) == pytest.approx(0.99 + 0.0099 * 0.5)
    assert ema_schedule(10, 200) == 0.9999 == ema_schedule(150, 200)
    t = TeacherState.from_student({"w": np.zeros(2)}, 200)
    t.update({"w": np.ones(2)})
    np.testing.assert_allclose(t.params["w"], 0.01)
    assert t.step == 1


def test_teacher_drifts_toward_frozen_student():
    t = TeacherState({"w": np.full(3, 5.0)}, total_steps=40)
    student = {"w": np.zeros(3)}
    gaps = []
    for _ in range(40):
        t.update(student)
        gaps.append(np.linalg.norm(t.params["w"]))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


# -- numeric gradients -------------------------------------------------------------------

def test_numeric_grad_closed_forms():
    w = np.array([3.0])
    assert numeric_grad(lambda: float(w[0] ** 2), w)[0] == pytest.approx(6.0, abs=1e-6)
    assert numeric_grad(lambda: 4.2, w)[0] == 0.0
    v = np.array([0.3, -1.2, 2.0])
    c = np.array([1.5, -2.0, 0.25])
    np.testing.assert_allclose(numeric_grad(lambda: float(c @ v), v), c, rtol=1e-9)
    f = lambda: float(np.sum(np.sin(v) * v ** 2))
    analytic = np.cos(v) * v ** 2 + 2 * v * np.sin(v)
    np.testing.assert_allclose(numeric_grad(f, v), analytic, rtol=1e-4)
    np.testing.assert_array_equal(v, [0.3, -1.2, 2.0])  # restored


def test_numeric_grad_dict_and_errors():
    p = {"a": np.array([1.0, 2.0]), "b": np.array([[3.0]])}
    g = numeric_grad(lambda: float(p["a"] @ p["a"] + 3 * p["b"][0, 0]), p)
    np.testing.assert_allclose(g["a"], [2.0, 4.0], rtol=1e-8)
    np.testing.assert_allclose(g["b"], [[3.0]], rtol=1e-8)
    with pytest.raises(TypeError):
        numeric_grad(lambda: 0.0, np.array([1, 2]))
    x = np.array([0.0])
    with pytest.raises(FloatingPointError):
        numeric_grad(lambda: float("nan"), x)


# -- causal targets and training ---------------------------------------------------------

def test_teacher_targets_are_causal(micro_encoder):
    X = toy_batch(MICRO_CONFIG, 1, 20, seed=3)[0]
    base, _ = micro_encoder.encode_sequence(X)
    Y = X.copy()
    Y[12:] += 1.0
    pert, _ = micro_encoder.encode_sequence(Y)
    assert np.array_equal(base[:12], pert[:12])
    assert np.array_equal(micro_encoder.embed(X)[:12], micro_encoder.embed(Y)[:12])


def test_toy_batch_shape_and_determinism():
    a = toy_batch(MICRO_CONFIG, 2, 20, seed=1)
    assert a.shape == (2, 20, 4, 16)
    assert np.array_equal(a, toy_batch(MICRO_CONFIG, 2, 20, seed=1))


@pytest.mark.parametrize("stage", [1, 2])
def test_zero_learning_rate_gives_flat_eval(stage):
    r = toy_train(stage, MICRO_CONFIG, steps=2, lr=0.0)
    assert r.eval_final == pytest.approx(r.eval_initial, rel=1e-12) and len(r.losses) == 2
    if stage == 2:
        assert max(r.teacher_gap) < 1e-12  # rounding of tau*w + (1-tau)*w


def test_short_training_reduces_loss():
    r = toy_train(1, MICRO_CONFIG, steps=15, seed=0, lr=0.01)
    assert r.eval_final < r.eval_initial
    with pytest.raises(ValueError):
        toy_train(3, MICRO_CONFIG, steps=1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    with pytest.raises((TrainingError, FloatingPointError)):
        toy_train(1, MICRO_CONFIG, steps=30, lr=1e8)
