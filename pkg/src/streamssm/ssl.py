"""Self-supervised objectives at desk scale.

Stage 1 combines next-token latent prediction (ARM) with masked patch
reconstruction; Stage 2 trains a student against an EMA teacher with masked
and multi-step future latent prediction. Every per-term loss is the mean
smooth-L1 over the term's vector; objectives sum their terms.

Training uses central finite differences on micro models instead of reverse
mode autodiff. Targets are recomputed once per step and held fixed while
differencing, which is the finite-difference analogue of a stop-gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .encoder import Encoder, ModelConfig, patchify
from .kernels import silu

log = logging.getLogger(__name__)

MASK_RATIO = 0.4
STAGE2_BLOCK_LEN = 4
HORIZON = 4
LAMBDA_ARM = 0.5
LAMBDA_MASK = 0.5
SMOOTH_L1_BETA = 1.0
EMA_START = 0.99
EMA_END = 0.9999
EMA_RAMP_FRACTION = 0.05


class TrainingError(RuntimeError):
    pass


# -- masking -------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    indices: np.ndarray  # sorted, unique token positions
    block_len: int
    ratio: float
    n_tokens: int

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.n_tokens, dtype=bool)
        m[self.indices] = True
        return m

    def apply(self, patches):
        """Zero every value of the masked tokens in ``(..., G, C, P)`` patches."""
        out = np.array(patches, dtype=float)
        out[..., self.indices, :, :] = 0.0
        return out


def make_token_mask(n_tokens: int, ratio: float = MASK_RATIO, block_len: int = 1,
                    rng: np.random.Generator | None = None) -> MaskSpec:
    """Random union of non-overlapping contiguous blocks covering ``round(ratio * n_tokens)`` tokens.

    Blocks have length ``block_len`` except possibly one shorter remainder
    block. Placements are uniform over all non-overlapping arrangements
    (stars and bars over the free positions), so ``block_len=1`` gives a
    uniformly random subset.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    if block_len < 1:
        raise ValueError("block_len must be >= 1")
    n_mask = int(round(ratio * n_tokens))
    if n_mask < 1:
        raise ValueError(f"ratio {ratio} masks no tokens out of {n_tokens}")
    rng = rng if rng is not None else np.random.default_rng()
    lengths = [block_len] * (n_mask // block_len)
    if n_mask % block_len:
        lengths.append(n_mask % block_len)
    lengths = np.array(lengths)[rng.permutation(len(lengths))]
    k = len(lengths)
    free = n_tokens - n_mask
    slots = np.sort(rng.choice(free + k, size=k, replace=False))
    starts = slots - np.arange(k) + np.concatenate([[0], np.cumsum(lengths)[:-1]])
    idx = np.concatenate([np.arange(s, s + n) for s, n in zip(starts, lengths)])
    return MaskSpec(np.sort(idx), block_len, ratio, n_tokens)


# -- heads ---------------------------------------------------------------------

def head_shapes(d_model: int, n_channels: int, patch_samples: int, horizon: int = HORIZON,
                decoder_hidden: int | None = None) -> dict[str, tuple]:
    dh = decoder_hidden or d_model
    cp = n_channels * patch_samples
    return {
        "g.W": (d_model, d_model), "g.b": (d_model,),
        "dec.W1": (d_model, dh), "dec.b1": (dh,),
        "dec.W2": (dh, cp), "dec.b2": (cp,),
        "g_mask.W": (d_model, d_model), "g_mask.b": (d_model,),
        "g_future.W": (d_model, horizon * d_model), "g_future.b": (horizon * d_model,),
    }


@dataclass
class Heads:
    """Prediction heads: ``g`` (next latent), ``dec`` (patch decoder), ``g_mask``, ``g_future``."""

    params: dict[str, np.ndarray]
    n_channels: int
    patch_samples: int
    horizon: int = HORIZON

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, horizon: int = HORIZON) -> "Heads":
        shapes = head_shapes(config.d_model, config.n_channels, config.patch_samples, horizon)
        p = {}
        for k, s in shapes.items():
            if k.endswith(".b") or k.endswith(".b1") or k.endswith(".b2"):
                p[k] = np.zeros(s)
            else:
                bound = math.sqrt(3.0 / s[0])
                p[k] = rng.uniform(-bound, bound, size=s)
        return cls(p, config.n_channels, config.patch_samples, horizon)

    @classmethod
    def identity(cls, config: ModelConfig, horizon: int = HORIZON) -> "Heads":
        """Heads whose latent predictors are the identity map (decoder zero)."""
        shapes = head_shapes(config.d_model, config.n_channels, config.patch_samples, horizon)
        p = {k: np.zeros(s) for k, s in shapes.items()}
        d = config.d_model
        p["g.W"] = np.eye(d)
        p["g_mask.W"] = np.eye(d)
        p["g_future.W"] = np.tile(np.eye(d), (1, horizon))
        return cls(p, config.n_channels, config.patch_samples, horizon)

    def g(self, h):
        return np.asarray(h) @ self.params["g.W"] + self.params["g.b"]

    def decode(self, h):
        """Per-token two-layer MLP to a ``(C, P)`` patch."""
        p = self.params
        z = silu(np.asarray(h) @ p["dec.W1"] + p["dec.b1"]) @ p["dec.W2"] + p["dec.b2"]
        return z.reshape(*z.shape[:-1], self.n_channels, self.patch_samples)

    def g_mask(self, h):
        return np.asarray(h) @ self.params["g_mask.W"] + self.params["g_mask.b"]

    def g_future(self, h):
        """``(..., d)`` hidden to ``(..., K, d)`` predictions of the next ``K`` latents."""
        z = np.asarray(h) @ self.params["g_future.W"] + self.params["g_future.b"]
        return z.reshape(*z.shape[:-1], self.horizon, -1)


# -- losses ----------------------------------------------------------------------

def _sum_of_terms(pred, target, n_terms: int) -> float:
    """Sum of per-term :func:`smooth_l1` means when all terms share one shape."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    e = np.abs(pred - target)
    c = np.minimum(e, SMOOTH_L1_BETA)
    # c * (e - c/2) / beta is 0.5 e^2 / beta below beta and e - beta/2 above
    return float(np.vdot(c, e - 0.5 * c)) / SMOOTH_L1_BETA * n_terms / e.size


def arm_loss(hiddens, target_tokens, g: Callable) -> float:
    """``sum_t l(g(h_t), x_{t+1})`` over ``t = 0 .. G-2`` for ``(G, d)`` inputs."""
    h = np.asarray(hiddens, dtype=float)
    x = np.asarray(target_tokens, dtype=float)
    if h.shape[0] < 2:
        raise ValueError("arm_loss needs at least two tokens")
    if x.shape[0] != h.shape[0]:
        raise ValueError("hiddens and targets differ in length")
    return _sum_of_terms(g(h[:-1]), x[1:], h.shape[0] - 1)


def _check_mask(mask: MaskSpec, G: int):
    if len(mask.indices) == 0:
        raise ValueError("empty mask")
    if mask.n_tokens != G or mask.indices.max() >= G:
        raise ValueError(f"mask built for {mask.n_tokens} tokens, sequence has {G}")


def masked_recon_loss(hiddens, patches_raw, mask: MaskSpec, decode: Callable) -> float:
    """``sum_{t in M} l(decode(h_t), X_t)``; unmasked reconstructions never enter."""
    h = np.asarray(hiddens, dtype=float)
    X = np.asarray(patches_raw, dtype=float)
    _check_mask(mask, h.shape[0])
    return _sum_of_terms(decode(h[mask.indices]), X[mask.indices], len(mask.indices))


def stage1_loss(hiddens, target_tokens, patches_raw, mask: MaskSpec, heads: Heads,
                lambda_arm: float = LAMBDA_ARM, lambda_mask: float = LAMBDA_MASK) -> float:
    out = 0.0
    if lambda_arm:
        out += lambda_arm * arm_loss(hiddens, target_tokens, heads.g)
    if lambda_mask:
        out += lambda_mask * masked_recon_loss(hiddens, patches_raw, mask, heads.decode)
    return out


def jepa_masked_loss(student_hiddens, teacher_hiddens, mask: MaskSpec, g_mask: Callable) -> float:
    """``sum_{t in M} l(g_mask(h^s_t), h^T_t)``."""
    hs = np.asarray(student_hiddens, dtype=float)
    ht = np.asarray(teacher_hiddens, dtype=float)
    _check_mask(mask, hs.shape[0])
    return _sum_of_terms(g_mask(hs[mask.indices]), ht[mask.indices], len(mask.indices))


def future_terms(n_tokens: int, horizon: int) -> list[tuple[int, int]]:
    """``(t, k)`` pairs entering :func:`future_loss`."""
    return [(t, k) for t in range(n_tokens - horizon) for k in range(1, horizon + 1)]


def future_loss(student_hiddens, teacher_hiddens, g_future: Callable, horizon: int = HORIZON) -> float:
    """``sum_t sum_{k=1..K} l(g_future(h^s_t)[k-1], h^T_{t+k})`` for ``t < G - K``."""
    hs = np.asarray(student_hiddens, dtype=float)
    ht = np.asarray(teacher_hiddens, dtype=float)
    G = hs.shape[0]
    if G <= horizon:
        raise ValueError(f"future_loss needs more than K={horizon} tokens, got {G}")
    pred = g_future(hs[: G - horizon])  # (G-K, K, d)
    idx = np.arange(G - horizon)[:, None] + np.arange(1, horizon + 1)  # t + k
    return _sum_of_terms(pred, ht[idx], (G - horizon) * horizon)


def stage2_loss(student_hiddens, teacher_hiddens, mask: MaskSpec, heads: Heads) -> float:
    return (jepa_masked_loss(student_hiddens, teacher_hiddens, mask, heads.g_mask)
            + future_loss(student_hiddens, teacher_hiddens, heads.g_future, heads.horizon))


# -- EMA teacher ------------------------------------------------------------------

def ema_update(teacher: dict[str, np.ndarray], student: dict[str, np.ndarray],
               tau: float) -> dict[str, np.ndarray]:
    """``phi <- tau * phi + (1 - tau) * theta`` for every tensor; returns a new dict."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    if set(teacher) != set(student):
        raise ValueError("teacher and student hold different tensors")
    out = {}
    for k, phi in teacher.items():
        theta = student[k]
        if phi.shape != theta.shape:
            raise ValueError(f"{k}: teacher {phi.shape} vs student {theta.shape}")
        out[k] = tau * phi + (1.0 - tau) * theta
    return out


def ema_schedule(step: int, total_steps: int, start: float = EMA_START, end: float = EMA_END,
                 ramp_fraction: float = EMA_RAMP_FRACTION) -> float:
    """Momentum rising linearly from ``start`` to ``end`` over the first ``ramp_fraction`` of steps."""
    ramp = max(1, int(math.ceil(ramp_fraction * total_steps)))
    if step >= ramp:
        return end
    return start + (end - start) * step / ramp


@dataclass
class TeacherState:
    params: dict[str, np.ndarray]
    total_steps: int
    step: int = 0

    @classmethod
    def from_student(cls, student: dict[str, np.ndarray], total_steps: int) -> "TeacherState":
        return cls({k: v.copy() for k, v in student.items()}, total_steps)

    @property
    def tau(self) -> float:
        return ema_schedule(self.step, self.total_steps)

    def update(self, student: dict[str, np.ndarray]) -> None:
        self.params = ema_update(self.params, student, self.tau)
        self.step += 1


# -- finite differences -------------------------------------------------------------

def numeric_grad(loss_fn: Callable[[], float], params, h: float = 1e-5):
    """Central-difference gradient of ``loss_fn()`` w.r.t. arrays edited in place.

    ``params`` is an array or a dict of arrays; the returned gradient has the
    same structure. Each scalar is perturbed by ``+-h``, the loss evaluated,
    and the entry restored, so ``loss_fn`` must read the arrays live.
    """
    if isinstance(params, dict):
        return {k: numeric_grad(loss_fn, v, h) for k, v in params.items()}
    arr = params
    if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
        raise TypeError("numeric_grad needs float64 numpy arrays to edit in place")
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise FloatingPointError(f"non-finite loss while differencing entry {i}")
        gflat[i] = (lp - lm) / (2 * h)
    return grad


# -- toy training -------------------------------------------------------------------

DEFAULT_ENCODER_TRAINABLE = ("norm2", "ssm.A_log", "ssm.b_delta")


def toy_batch(config: ModelConfig, n_windows: int, n_tokens: int, seed: int):
    """Normalised synthetic windows as ``(n_windows, G, C, P)`` patches."""
    from .preprocess import rqn_stream
    from .synth import EventSpec, SynthSpec, gen_recording

    P = config.patch_samples
    dur = (n_windows * n_tokens * P) / 256.0 + 6.0
    spec = SynthSpec(n_channels=config.n_channels, duration_s=dur, seed=seed,
                     events=EventSpec(n_events=0))
    X = rqn_stream(gen_recording(spec).samples.astype(float), window=256)
    X = X[:, 5 * 256:]  # skip the normaliser warm-up
    patches = patchify(X, P)[: n_windows * n_tokens]
    return patches.reshape(n_windows, n_tokens, config.n_channels, P)


@dataclass
class TrainResult:
    stage: int
    losses: list[float]
    eval_initial: float
    eval_final: float
    teacher_gap: list[float] = field(default_factory=list)
    encoder: Encoder | None = field(default=None, repr=False)
    heads: Heads | None = field(default=None, repr=False)

    @property
    def ratio(self) -> float:
        return self.eval_final / self.eval_initial


def toy_train(stage: int, config: ModelConfig, steps: int = 200, seed: int = 0, lr: float = 0.01,
              n_windows: int = 2, n_tokens: int = 20, encoder_trainable=DEFAULT_ENCODER_TRAINABLE,
              h: float = 1e-5) -> TrainResult:
    """Plain gradient descent with :func:`numeric_grad` on a micro model.

    Trainable tensors are every head parameter plus the last block's encoder
    tensors whose names end with an entry of ``encoder_trainable``. Masks are
    redrawn every step; ``eval_initial``/``eval_final`` use one fixed mask.
    Stage 2 applies an EMA teacher update after every step.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    rng = np.random.default_rng([seed, stage])
    enc = Encoder.init(config, rng)
    heads = Heads.init(config, rng)
    X = toy_batch(config, n_windows, n_tokens, seed)
    last = config.n_blocks - 1
    enc_names = [k for k in enc.params
                 if k.startswith(f"blocks.{last}.") and k.endswith(tuple(encoder_trainable))]
    head_names = [k for k in heads.params
                  if k.startswith(("g.", "dec.") if stage == 1 else ("g_mask.", "g_future."))]
    teacher = TeacherState.from_student(enc.params, steps) if stage == 2 else None
    block = 1 if stage == 1 else STAGE2_BLOCK_LEN
    eval_rng = np.random.default_rng([seed, stage, 99])
    eval_masks = [make_token_mask(n_tokens, MASK_RATIO, block, eval_rng) for _ in range(n_windows)]

    def targets(masks):
        # held fixed while differencing
        if stage == 1:
            return enc.embed(X)
        t_enc = Encoder(config, teacher.params)
        return t_enc.encode_sequence(X)[0]

    def student_hiddens(masks):
        view = np.stack([m.apply(X[i]) for i, m in enumerate(masks)])
        return enc.encode_sequence(view)[0]

    def loss_from(hs, tg, masks):
        # every window contributes the same number of terms, so the batched
        # sum over (window, token) pairs equals the mean of per-window losses
        n = len(masks)
        w = np.repeat(np.arange(n), [len(m.indices) for m in masks])
        t = np.concatenate([m.indices for m in masks])
        if stage == 1:
            arm = _sum_of_terms(heads.g(hs[:, :-1]), tg[:, 1:], n * (n_tokens - 1))
            rec = _sum_of_terms(heads.decode(hs[w, t]), X[w, t], len(t))
            return (LAMBDA_ARM * arm + LAMBDA_MASK * rec) / n
        K = heads.horizon
        jepa = _sum_of_terms(heads.g_mask(hs[w, t]), tg[w, t], len(t))
        idx = np.arange(n_tokens - K)[:, None] + np.arange(1, K + 1)
        fut = _sum_of_terms(heads.g_future(hs[:, : n_tokens - K]), tg[:, idx], n * (n_tokens - K) * K)
        return (jepa + fut) / n

    def evaluate(masks):
        return loss_from(student_hiddens(masks), targets(masks), masks)

    eval_initial = evaluate(eval_masks)
    losses, gaps = [], []
    for step in range(steps):
        masks = [make_token_mask(n_tokens, MASK_RATIO, block, rng) for _ in range(n_windows)]
        tg = targets(masks)
        hs = student_hiddens(masks)
        loss = loss_from(hs, tg, masks)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        losses.append(loss)
        # heads see cached hiddens; encoder tensors need fresh forward passes
        g_heads = numeric_grad(lambda: loss_from(hs, tg, masks),
                               {k: heads.params[k] for k in head_names}, h)
        g_enc = numeric_grad(lambda: loss_from(student_hiddens(masks), tg, masks),
                             {k: enc.params[k] for k in enc_names}, h)
        for k, g in g_heads.items():
            heads.params[k] -= lr * g
        for k, g in g_enc.items():
            enc.params[k] -= lr * g
        if teacher is not None:
            teacher.update(enc.params)
            gaps.append(float(np.sqrt(sum(np.sum((teacher.params[k] - enc.params[k]) ** 2)
                                          for k in enc.params))))
    eval_final = evaluate(eval_masks)
    if not math.isfinite(eval_final):
        raise TrainingError("final loss is not finite")
    log.info("toy_train stage %d seed %d: %.4f -> %.4f", stage, seed, eval_initial, eval_final)
    return TrainResult(stage, losses, eval_initial, eval_final, gaps, enc, heads)
