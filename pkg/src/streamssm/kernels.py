"""Dense numeric primitives shared by the model, the runtime and the SSL lab.

All functions operate on numpy arrays and accept arbitrary leading batch
dimensions unless noted. Weights follow the ``x @ W`` convention (``W`` is
``in x out``).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def sigmoid(z):
    # expit is overflow-safe for large |z|
    return expit(np.asarray(z, dtype=float))


def silu(z):
    z = np.asarray(z, dtype=float)
    return z * sigmoid(z)


def softplus(z):
    z = np.asarray(z, dtype=float)
    return np.logaddexp(0.0, z)


def softmax(z, axis: int = -1):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def rms_norm(x, gain, eps: float = 1e-6):
    """Root-mean-square normalisation over the last axis.

    ``out = gain * x / sqrt(mean(x**2) + eps)``. ``eps=0`` is allowed for
    nonzero input; an all-zero row with ``eps=0`` would divide by zero, so it
    is returned as zeros.
    """
    x = np.asarray(x, dtype=float)
    gain = np.asarray(gain, dtype=float)
    if x.shape[-1] != gain.shape[-1]:
        raise ValueError(f"rms_norm: x has {x.shape[-1]} features, gain has {gain.shape[-1]}")
    if eps < 0:
        raise ValueError("rms_norm: eps must be non-negative")
    ms = np.mean(x * x, axis=-1, keepdims=True) + eps
    with np.errstate(invalid="ignore", divide="ignore"):
        out = gain * x / np.sqrt(ms)
    return np.where(ms > 0, out, 0.0)


def swiglu_ffn(x, W_gate, W_up, W_down):
    """SwiGLU feed-forward: ``(silu(x @ W_gate) * (x @ W_up)) @ W_down``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    if W_gate.shape[0] != d or W_up.shape != W_gate.shape or W_down.shape != W_gate.shape[::-1]:
        raise ValueError(
            f"swiglu_ffn: inconsistent shapes x[...,{d}], W_gate{W_gate.shape}, "
            f"W_up{W_up.shape}, W_down{W_down.shape}"
        )
    flat = x.reshape(-1, d)  # one large matmul instead of a stack of small ones
    out = (silu(flat @ W_gate) * (flat @ W_up)) @ W_down
    return out.reshape(*x.shape[:-1], W_down.shape[1])


def smooth_l1(pred, target, beta: float = 1.0) -> float:
    """Mean Huber-style loss; quadratic below ``beta``, linear above."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1: shape mismatch {pred.shape} vs {target.shape}")
    if beta <= 0:
        raise ValueError("smooth_l1: beta must be positive")
    e = np.abs(pred - target)
    loss = np.where(e < beta, 0.5 * e * e / beta, e - 0.5 * beta)
    return float(loss.mean())


def attention_weights(queries, keys, heads: int):
    """Per-head softmax weights, shape ``(..., heads, Q, M)``."""
    d = queries.shape[-1]
    if d % heads:
        raise ValueError(f"cross_attention: d={d} not divisible by heads={heads}")
    dh = d // heads
    q = np.swapaxes(queries.reshape(*queries.shape[:-1], heads, dh), -2, -3)  # (..., h, Q, e)
    k = keys.reshape(*keys.shape[:-1], heads, dh)
    k = np.moveaxis(k, -3, -1)  # (..., h, e, M)
    scores = (q @ k) / np.sqrt(dh)
    return softmax(scores, axis=-1)


def cross_attention(queries, keys, values, heads: int):
    """Multi-head scaled dot-product attention without projections.

    ``queries`` is ``(..., Q, d)``, ``keys``/``values`` are ``(..., M, d)``.
    Leading dimensions broadcast, so a fixed set of learnable queries can
    attend over a batch of key sets.
    """
    queries = np.asarray(queries, dtype=float)
    keys = np.asarray(keys, dtype=float)
    values = np.asarray(values, dtype=float)
    if keys.shape != values.shape:
        raise ValueError(f"cross_attention: keys {keys.shape} vs values {values.shape}")
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError("cross_attention: query and key widths differ")
    w = attention_weights(queries, keys, heads)
    d = values.shape[-1]
    v = np.swapaxes(values.reshape(*values.shape[:-1], heads, d // heads), -2, -3)
    out = np.swapaxes(w @ v, -2, -3)  # (..., Q, h, e)
    return out.reshape(*out.shape[:-2], d)
