"""Selective state-space block with rotary state transitions and MIMO projections.

Per head ``h`` the block keeps an ``N x P`` state matrix ``S`` updated as::

    S_t = a_t S_{t-1} + V_t,     a_t = exp(-dt_t * exp(A_log))

where ``V_t`` is the input contribution ``U_t = dt_t * B~_t X_t`` (Euler) or the
trapezoidal blend ``lam_t U_t + (1 - lam_t) a_t U_{t-1}``. Rotations are applied
to ``B`` and ``C`` by the negative cumulative phase, so only relative phase
reaches the readout ``Y_t = C~_t^T S_t`` and the recurrence stays a scalar
linear one per head. That makes the whole sequence an associative scan over
``(a_t, V_t)`` pairs, which :func:`ssm_scan` exploits.

Wiring decisions: ``B_t`` and ``C_t`` (``N x R``) are shared across heads,
``X_t`` is the per-head input slice expanded to rank ``R`` by a learned
elementwise map, and the ``R x P`` readout is folded back to ``P`` by another
learned elementwise map before gating and the output projection.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields

import numpy as np

from .kernels import sigmoid, silu, softplus

TWO_PI = 2.0 * math.pi
DEFAULT_CHUNK = 4  # small chunks keep each scan block cache resident


class Discretization(str, enum.Enum):
    EULER = "euler"
    TRAPEZOIDAL = "trapezoidal"


@dataclass
class SsmParams:
    A_log: np.ndarray  # (H,)
    omega: np.ndarray  # (H, N/2)
    W_delta: np.ndarray  # (d, H)
    b_delta: np.ndarray  # (H,)
    W_lambda: np.ndarray  # (d, H)
    b_lambda: np.ndarray  # (H,)
    W_B: np.ndarray  # (d, N*R)
    W_C: np.ndarray  # (d, N*R)
    W_X: np.ndarray  # (d, H*P)
    mimo_in: np.ndarray  # (H, R, P)
    mimo_out: np.ndarray  # (H, R, P)
    W_gate: np.ndarray  # (d, H*P)
    W_out: np.ndarray  # (H*P, d)

    @property
    def heads(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return 2 * self.omega.shape[1]

    @property
    def rank(self) -> int:
        return self.mimo_in.shape[1]

    @property
    def d_head(self) -> int:
        return self.mimo_in.shape[2]

    @property
    def d_model(self) -> int:
        return self.W_B.shape[0]

    @classmethod
    def shapes(cls, d_model: int, heads: int, d_state: int, d_head: int, rank: int) -> dict:
        if d_state % 2:
            raise ValueError(f"d_state must be even, got {d_state}")
        if rank < 1:
            raise ValueError("rank must be >= 1")
        H, N, P, R, d = heads, d_state, d_head, rank, d_model
        return {
            "A_log": (H,),
            "omega": (H, N // 2),
            "W_delta": (d, H),
            "b_delta": (H,),
            "W_lambda": (d, H),
            "b_lambda": (H,),
            "W_B": (d, N * R),
            "W_C": (d, N * R),
            "W_X": (d, H * P),
            "mimo_in": (H, R, P),
            "mimo_out": (H, R, P),
            "W_gate": (d, H * P),
            "W_out": (H * P, d),
        }

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int, d_state: int,
             d_head: int, rank: int) -> "SsmParams":
        shapes = cls.shapes(d_model, heads, d_state, d_head, rank)

        def proj(shape, fan_in):
            bound = math.sqrt(3.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            A_log=rng.uniform(math.log(1e-3), math.log(1e-1), size=shapes["A_log"]),
            omega=rng.uniform(0.0, math.pi / 8, size=shapes["omega"]),
            W_delta=proj(shapes["W_delta"], d_model),
            b_delta=np.zeros(shapes["b_delta"]),
            W_lambda=proj(shapes["W_lambda"], d_model),
            b_lambda=np.zeros(shapes["b_lambda"]),
            W_B=proj(shapes["W_B"], d_model),
            W_C=proj(shapes["W_C"], d_model),
            W_X=proj(shapes["W_X"], d_model),
            mimo_in=proj(shapes["mimo_in"], 1),
            mimo_out=proj(shapes["mimo_out"], rank),
            W_gate=proj(shapes["W_gate"], d_model),
            W_out=proj(shapes["W_out"], heads * d_head),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SsmState:
    S: np.ndarray  # (H, N, P)
    U_prev: np.ndarray  # (H, N, P)
    Theta: np.ndarray  # (H, N/2), kept in [0, 2pi)
    t: int = 0

    @classmethod
    def zeros(cls, params: SsmParams, batch: tuple = (), dtype=np.float64) -> "SsmState":
        H, N, P = params.heads, params.d_state, params.d_head
        return cls(
            S=np.zeros((*batch, H, N, P), dtype=dtype),
            U_prev=np.zeros((*batch, H, N, P), dtype=dtype),
            Theta=np.zeros((*batch, H, N // 2), dtype=dtype),
        )

    def copy(self) -> "SsmState":
        return SsmState(self.S.copy(), self.U_prev.copy(), self.Theta.copy(), self.t)

    @property
    def nbytes(self) -> int:
        return self.S.nbytes + self.U_prev.nbytes + self.Theta.nbytes


def discretize_decay(delta, A_log):
    """Zero-order-hold decay ``exp(-delta * exp(A_log))``."""
    delta = np.asarray(delta, dtype=float)
    if np.any(delta < 0):
        raise ValueError("discretize_decay: delta must be non-negative")
    return np.exp(-delta * np.exp(A_log))


def rotate_pairs(v, theta):
    """Rotate consecutive pairs ``(v[2j], v[2j+1])`` by ``theta[j]``.

    Works along the last axis; ``theta`` broadcasts against ``v[..., ::2]``.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-1] % 2:
        raise ValueError(f"rotate_pairs: odd length {v.shape[-1]}")
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != v.shape[-1] // 2:
        raise ValueError("rotate_pairs: need one angle per pair")
    c, s = np.cos(theta), np.sin(theta)
    v0, v1 = v[..., 0::2], v[..., 1::2]
    out = np.empty(np.broadcast_shapes(v.shape[:-1], theta.shape[:-1]) + v.shape[-1:])
    out[..., 0::2] = c * v0 - s * v1
    out[..., 1::2] = s * v0 + c * v1
    return out


def _rotate_rows(M, theta):
    """Rotate row pairs of ``M[..., N, R]`` by ``theta[..., N/2]`` (column-wise rotation)."""
    c = np.cos(theta)[..., None]
    s = np.sin(theta)[..., None]
    m0, m1 = M[..., 0::2, :], M[..., 1::2, :]
    out = np.empty(np.broadcast_shapes(M.shape, theta.shape[:-1] + M.shape[-2:]))
    out[..., 0::2, :] = c * m0 - s * m1
    out[..., 1::2, :] = s * m0 + c * m1
    return out


def _rotate_bc(B, C, Theta):
    """Per-head copies of ``B`` and ``C`` rotated by ``-Theta`` in one pass."""
    R = B.shape[-1]
    both = _rotate_rows(np.concatenate([B, C], axis=-1)[..., None, :, :], -Theta)
    return both[..., :R], both[..., R:]


def _projections(p: SsmParams, u):
    """Input-dependent quantities for one or many time steps (leading dims of ``u``)."""
    lead = u.shape[:-1]
    H, N, P, R = p.heads, p.d_state, p.d_head, p.rank
    dt = softplus(u @ p.W_delta + p.b_delta)  # (..., H)
    a = np.exp(-dt * np.exp(p.A_log))
    lam = sigmoid(u @ p.W_lambda + p.b_lambda)
    B = (u @ p.W_B).reshape(*lead, N, R)
    C = (u @ p.W_C).reshape(*lead, N, R)
    x = (u @ p.W_X).reshape(*lead, H, 1, P)
    X = p.mimo_in * x  # (..., H, R, P)
    gate = silu(u @ p.W_gate)
    return dt, a, lam, B, C, X, gate


def _fold_readout(p: SsmParams, Y, gate):
    # Y: (..., H, R, P) -> (..., d_model)
    y = (p.mimo_out * Y).sum(axis=-2)
    y = y.reshape(*y.shape[:-2], p.heads * p.d_head)
    return (y * gate) @ p.W_out


def _check_input(p: SsmParams, u, where: str):
    if u.shape[-1] != p.d_model:
        raise ValueError(f"{where}: input width {u.shape[-1]} != d_model {p.d_model}")
    if not np.all(np.isfinite(u)):
        raise FloatingPointError(f"{where}: non-finite input")


def _check_state(p: SsmParams, state: SsmState):
    expect = (p.heads, p.d_state, p.d_head)
    if (state.S.shape[-3:] != expect or state.U_prev.shape != state.S.shape
            or state.Theta.shape != state.S.shape[:-3] + (p.heads, p.d_state // 2)):
        raise ValueError(f"state shapes {state.S.shape} do not match params {expect}")


def ssm_step(params: SsmParams, state: SsmState, u, mode: Discretization = Discretization.TRAPEZOIDAL):
    """Advance one time step. Returns ``(y, new_state)``; ``state`` is left untouched.

    ``u`` may carry leading batch dimensions, matched by a batched state
    (see :meth:`SsmState.zeros`); each batch element is an independent stream.
    """
    u = np.asarray(u, dtype=float)
    _check_input(params, u, "ssm_step")
    _check_state(params, state)
    if state.S.shape[:-3] != u.shape[:-1]:
        raise ValueError(f"ssm_step: batch shape {u.shape[:-1]} != state batch {state.S.shape[:-3]}")
    mode = Discretization(mode)

    dt, a, lam, B, C, X, gate = _projections(params, u)
    Theta = np.mod(state.Theta + dt[..., None] * params.omega, TWO_PI)
    Bt, Ct = _rotate_bc(B, C, Theta)  # (..., H, N, R) each
    # scalings are applied to the small rank-R factor before expanding to N x P
    dtX = dt[..., None, None] * X
    a3 = a[..., None, None]
    l3 = lam[..., None, None]
    coef = (1.0 - l3) * a3

    H, N, P, R = params.heads, params.d_state, params.d_head, params.rank
    lead = u.shape[:-1]
    n = int(np.prod(lead, dtype=int))
    l3 = np.broadcast_to(l3, a3.shape)
    flat = [x.reshape(n, *x.shape[len(lead):]) for x in (Bt, Ct, dtX, l3, a3, coef)]
    Bt_f, Ct_f, dtX_f, l3_f, a3_f, coef_f = flat
    S_old = state.S.reshape(n, H, N, P)
    Up_old = state.U_prev.reshape(n, H, N, P)
    S = np.empty((n, H, N, P))
    U = np.empty((n, H, N, P))
    Y = np.empty((n, H, R, P))
    tmp = np.empty((H, N, P))
    # one stream at a time keeps the N x P working set cache resident
    for i in range(n):
        np.matmul(Bt_f[i], dtX_f[i], out=U[i])
        Si = np.multiply(a3_f[i], S_old[i], out=S[i])
        if mode is Discretization.EULER:
            Si += U[i]
        else:
            # lam is per head, so B (lam dt X) = lam U without a second product
            np.multiply(l3_f[i], U[i], out=tmp)
            Si += tmp
            np.multiply(coef_f[i], Up_old[i], out=tmp)
            Si += tmp
        np.matmul(np.swapaxes(Ct_f[i], -1, -2), Si, out=Y[i])
    y = _fold_readout(params, Y.reshape(*lead, H, R, P), gate)
    new = SsmState(S.reshape(*lead, H, N, P), U.reshape(*lead, H, N, P), Theta, state.t + 1)
    return y, new


def combine(left, right):
    """Associative operator on ``(decay, contribution)`` pairs: apply ``left`` then ``right``."""
    a1, v1 = left
    a2, v2 = right
    return a1 * a2, a2 * v1 + v2


def _inclusive_scan(a, V):
    """Hillis-Steele inclusive scan along axis 0 with :func:`combine`.

    ``a`` is ``(T, H)``; ``V`` is ``(T, H, N, P)`` and is overwritten with the
    scanned contributions. Every output at index ``t`` is built only from
    inputs at indices ``<= t``. Returns the cumulative decays.
    """
    a = a[:, :, None, None].copy()
    T = a.shape[0]
    k = 1
    while k < T:
        # same arithmetic as combine(), evaluated in place; right-hand sides
        # are materialised before the overlapping slices are written
        a_new = a[:-k] * a[k:]
        V[k:] += a[k:] * V[:-k]
        a[k:] = a_new
        k *= 2
    return a[:, :, 0, 0]


def ssm_scan(params: SsmParams, u, mode: Discretization = Discretization.TRAPEZOIDAL,
             state: SsmState | None = None, chunk: int = DEFAULT_CHUNK):
    """Process a whole sequence ``u`` of shape ``(..., T, d)`` in parallel form.

    Matches folding :func:`ssm_step` over the sequence up to floating-point
    reassociation. Time is split into fixed chunks of ``chunk`` steps; each
    chunk is scanned in log-depth and the carry is propagated chunk to chunk,
    so results are deterministic for a given ``chunk``. Leading dimensions of
    ``u`` are independent sequences, matched by a batched ``state``.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim < 2 or u.shape[-2] == 0:
        raise ValueError("ssm_scan expects a non-empty (..., T, d) input")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    _check_input(params, u, "ssm_scan")
    mode = Discretization(mode)
    lead, T = u.shape[:-2], u.shape[-2]
    if state is None:
        state = SsmState.zeros(params, lead)
    _check_state(params, state)
    if state.S.shape[:-3] != lead:
        raise ValueError(f"ssm_scan: batch shape {lead} != state batch {state.S.shape[:-3]}")

    dt, a, lam, B, C, X, gate = _projections(params, u)
    steps = np.cumsum(dt[..., None] * params.omega, axis=-3)
    Theta = np.mod(state.Theta[..., None, :, :] + steps, TWO_PI)
    Bt, Ct = _rotate_bc(B, C, Theta)  # (..., T, H, N, R) each
    H, N, P, R = params.heads, params.d_state, params.d_head, params.rank

    n = int(np.prod(lead, dtype=int))
    dt_f, a_f, lam_f = (x.reshape(n, T, H) for x in (dt, a, lam))
    Bt_f, Ct_f = Bt.reshape(n, T, H, N, R), Ct.reshape(n, T, H, N, R)
    X_f = X.reshape(n, T, H, R, P)
    S0 = state.S.reshape(n, H, N, P)
    Up0 = state.U_prev.reshape(n, H, N, P)
    Y = np.empty((n, T, H, R, P))
    S_fin = np.empty((n, H, N, P))
    U_fin = np.empty((n, H, N, P))

    for b in range(n):
        S, U_prev = S0[b], Up0[b]
        # every N x P quantity is formed chunk by chunk to stay cache resident
        for start in range(0, T, chunk):
            sl = slice(start, min(start + chunk, T))
            dtX = dt_f[b, sl, :, None, None] * X_f[b, sl]
            U = Bt_f[b, sl] @ dtX
            a_c = a_f[b, sl]
            if mode is Discretization.EULER:
                V = U.copy()
            else:
                l4 = lam_f[b, sl, :, None, None]
                V = l4 * U
                coef = (1.0 - l4) * a_c[:, :, None, None]
                V[0] += coef[0] * U_prev
                V[1:] += coef[1:] * U[:-1]
            a_cum = _inclusive_scan(a_c, V)
            V += a_cum[:, :, None, None] * S
            Y[b, sl] = np.swapaxes(Ct_f[b, sl], -1, -2) @ V
            S, U_prev = V[-1], U[-1]
        S_fin[b], U_fin[b] = S, U_prev

    y = _fold_readout(params, Y.reshape(*lead, T, H, R, P), gate)
    final = SsmState(S_fin.reshape(*lead, H, N, P), U_fin.reshape(*lead, H, N, P),
                     Theta[..., -1, :, :].copy(), state.t + T)
    return y, final


def lti_kernel_materialize(a: float, B, C, T: int):
    """Convolution kernel ``K[k] = C . a**k B`` of a time-invariant diagonal SSM."""
    if T < 1:
        raise ValueError("kernel length must be >= 1")
    B = np.atleast_1d(np.asarray(B, dtype=float))
    C = np.atleast_1d(np.asarray(C, dtype=float))
    powers = np.power(float(a), np.arange(T))
    return powers * float(C @ B)


def lti_recurrence(a: float, B, C, x):
    """Reference recurrence ``h_t = a h_{t-1} + B x_t``, ``y_t = C . h_t``."""
    B = np.atleast_1d(np.asarray(B, dtype=float))
    C = np.atleast_1d(np.asarray(C, dtype=float))
    h = np.zeros_like(B)
    ys = []
    for xt in np.asarray(x, dtype=float):
        h = a * h + B * xt
        ys.append(float(C @ h))
    return np.array(ys)


def causal_convolve(x, K):
    """``y_t = sum_{k<=t} K[k] x_{t-k}``."""
    x = np.asarray(x, dtype=float)
    return np.convolve(x, K)[: len(x)]
