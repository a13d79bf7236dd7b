"""Streaming sessions, equivalence harness, cost accounting and onset metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import Encoder, EncoderState, ModelConfig, patchify
from .preprocess import (FS, RQN_EPS, RQN_WINDOW, BiquadCascade, CausalFilterState, RqnState,
                         causal_filter_step, rqn_stream_step)
from .synth import Annotation, Recording

log = logging.getLogger(__name__)

TRACE_SCHEMA = "trace/1"


@dataclass
class TraceRecord:
    patch_index: int
    time_s: float
    logit: np.ndarray
    probability: np.ndarray
    block_norms: list[float]
    step_latency_s: float = 0.0


@dataclass
class StreamSession:
    """End-to-end streaming context for one recording.

    ``mode="windowed"`` resets the encoder state (not the normalisation or
    filter buffers) every ``reset_period_s`` seconds of signal time, before the
    boundary patch is processed.
    """

    encoder: Encoder
    mode: str = "persistent"
    reset_period_s: float = 5.0
    fs: float = FS
    filters: list[BiquadCascade] = field(default_factory=list)
    rqn_window: int = RQN_WINDOW
    rqn_eps: float = RQN_EPS
    normalize: bool = True

    def __post_init__(self):
        if self.mode not in ("persistent", "windowed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        cfg = self.encoder.config
        self.state: EncoderState = self.encoder.reset()
        self.rqn = RqnState(cfg.n_channels, self.rqn_window, self.rqn_eps)
        self.filter_states = [[CausalFilterState(f) for _ in range(cfg.n_channels)]
                              for f in self.filters]
        self.patch_index = 0

    @property
    def reset_patches(self) -> int:
        return max(1, int(round(self.reset_period_s * self.fs / self.encoder.config.patch_samples)))

    @property
    def nbytes(self) -> int:
        return (self.state.nbytes + self.rqn.nbytes
                + sum(s.nbytes for row in self.filter_states for s in row))

    def condition(self, raw_patch):
        """Causal filtering and per-sample normalisation of one ``(C, P)`` patch."""
        x = np.array(raw_patch, dtype=float)
        for row in self.filter_states:
            for c, st in enumerate(row):
                x[c] = [causal_filter_step(st, v) for v in x[c]]
        if self.normalize:
            for t in range(x.shape[1]):
                x[:, t] = rqn_stream_step(self.rqn, x[:, t])
        return x


def session_step(session: StreamSession, raw_patch) -> TraceRecord:
    enc = session.encoder
    cfg = enc.config
    raw_patch = np.asarray(raw_patch, dtype=float)
    if raw_patch.shape != (cfg.n_channels, cfg.patch_samples):
        raise ValueError(f"patch shape {raw_patch.shape} != ({cfg.n_channels}, {cfg.patch_samples})")
    t0 = time.perf_counter()
    if (session.mode == "windowed" and session.patch_index > 0
            and session.patch_index % session.reset_patches == 0):
        session.state = enc.reset()
    x = session.condition(raw_patch)
    hidden, session.state = enc.encode_step(session.state, x)
    logit = enc.logits(hidden)
    prob = enc.classify(hidden)
    elapsed = time.perf_counter() - t0
    rec = TraceRecord(session.patch_index, session.patch_index * cfg.patch_samples / session.fs,
                      logit, prob, session.state.block_norms(), elapsed)
    session.patch_index += 1
    return rec


def run_recording(session: StreamSession, recording: Recording) -> list[TraceRecord]:
    cfg = session.encoder.config
    X = np.asarray(recording.samples, dtype=float)
    if X.shape[0] != cfg.n_channels:
        raise ValueError(f"recording has {X.shape[0]} channels, model expects {cfg.n_channels}")
    if X.shape[1] < cfg.patch_samples:
        raise ValueError("recording shorter than one patch; trace would be empty")
    return [session_step(session, p) for p in patchify(X, cfg.patch_samples)]


def sequence_hiddens(encoder: Encoder, X_norm, mode: str = "persistent", reset_patches: int = 80,
                     chunk_patches: int = 4096):
    """Hidden states for a conditioned ``(C, T)`` signal using the parallel form.

    Equivalent to stepping a session patch by patch; windowed mode restarts
    from a fresh state every ``reset_patches`` patches.
    """
    patches = patchify(X_norm, encoder.config.patch_samples)
    span = reset_patches if mode == "windowed" else chunk_patches
    out = []
    state = encoder.reset()
    for start in range(0, len(patches), span):
        if mode == "windowed":
            state = encoder.reset()
        h, state = encoder.encode_sequence(patches[start: start + span], state)
        out.append(h)
    return np.concatenate(out, axis=0)


# -- trace I/O ------------------------------------------------------------------

def trace_csv(trace: list[TraceRecord], include_latency: bool = False) -> str:
    """CSV with a fixed column order; latency is opt-in because it is not replayable."""
    if not trace:
        raise ValueError("empty trace")
    n_cls = np.atleast_1d(trace[0].probability).size
    n_blocks = len(trace[0].block_norms)
    cols = ["patch_index", "time_s"]
    cols += ["logit", "probability"] if n_cls == 1 else (
        [f"logit_{k}" for k in range(n_cls)] + [f"prob_{k}" for k in range(n_cls)])
    cols += [f"state_norm_{b}" for b in range(n_blocks)]
    if include_latency:
        cols.append("step_latency_s")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in trace:
        row = [r.patch_index, repr(float(r.time_s))]
        row += [repr(float(v)) for v in np.atleast_1d(r.logit)]
        row += [repr(float(v)) for v in np.atleast_1d(r.probability)]
        row += [repr(float(v)) for v in r.block_norms]
        if include_latency:
            row.append(repr(float(r.step_latency_s)))
        w.writerow(row)
    return buf.getvalue()


def trace_summary(trace: list[TraceRecord]) -> dict:
    probs = np.array([np.atleast_1d(r.probability)[-1] for r in trace])
    norms = np.array([r.block_norms for r in trace])
    lat = np.array([r.step_latency_s for r in trace])
    return {
        "schema": TRACE_SCHEMA,
        "n_patches": len(trace),
        "probability_mean": float(probs.mean()),
        "probability_max": float(probs.max()),
        "state_norm_max": norms.max(axis=0).tolist(),
        "state_norm_median": np.median(norms, axis=0).tolist(),
        "latency_mean_s": float(lat.mean()),
    }


# -- equivalence ---------------------------------------------------------------

def equivalence_report(config: ModelConfig, n_input_seeds: int = 30, n_weight_seeds: int = 3,
                       n_patches: int = 80, base_seed: int = 0) -> dict:
    """Streaming fold vs parallel scan over the full encoder + head on random inputs.

    All input seeds for one weight seed are stepped together as a batch of
    independent streams.
    """
    if n_input_seeds < 1 or n_weight_seeds < 1 or n_patches < 1:
        raise ValueError("seeds and patch count must be >= 1")
    max_logit = max_prob = 0.0
    agree = total = 0
    shape = (n_patches, config.n_channels, config.patch_samples)
    for w in range(n_weight_seeds):
        enc = Encoder.init(config, np.random.default_rng([base_seed, 1000 + w]))
        inputs = np.stack([np.random.default_rng([base_seed, w, s]).standard_normal(shape)
                           for s in range(n_input_seeds)])
        state = enc.reset((n_input_seeds,))
        stream_h = np.empty((n_input_seeds, n_patches, config.d_model))
        for t in range(n_patches):
            stream_h[:, t], state = enc.encode_step(state, inputs[:, t])
        par_h, _ = enc.encode_sequence(inputs, enc.reset((n_input_seeds,)))
        ls, lp = enc.logits(stream_h), enc.logits(par_h)
        ps, pp = enc.classify(stream_h), enc.classify(par_h)
        max_logit = max(max_logit, float(np.abs(ls - lp).max()))
        max_prob = max(max_prob, float(np.abs(ps - pp).max()))
        if config.n_classes == 1:
            lab_s, lab_p = ls[..., 0] > 0, lp[..., 0] > 0
        else:
            lab_s, lab_p = ls.argmax(-1), lp.argmax(-1)
        agree += int(np.count_nonzero(lab_s == lab_p))
        total += lab_s.size
    return {"max_logit_diff": max_logit, "max_prob_diff": max_prob,
            "label_agreement": agree / total, "n_forward_steps": total}


# -- analytical cost ------------------------------------------------------------

@dataclass
class FlopReport:
    channel_embedding: int
    ssm_steps: int
    ffns: int
    norms_head: int
    update_rate_hz: float = 16.0

    @property
    def total(self) -> int:
        return self.channel_embedding + self.ssm_steps + self.ffns + self.norms_head

    @property
    def sustained_gflops(self) -> float:
        return self.total * self.update_rate_hz / 1e9

    def rows(self) -> list[tuple[str, int]]:
        return [("SwiGLU FFNs", self.ffns), ("SSM steps", self.ssm_steps),
                ("Channel embedding", self.channel_embedding),
                ("RMSNorms + classifier head", self.norms_head), ("Total per step", self.total)]

    def to_dict(self) -> dict:
        return {"channel_embedding": self.channel_embedding, "ssm_steps": self.ssm_steps,
                "ffns": self.ffns, "norms_head": self.norms_head, "total": self.total,
                "update_rate_hz": self.update_rate_hz, "sustained_gflops_per_s": self.sustained_gflops}


def flop_report(config: ModelConfig, update_rate_hz: float = 16.0) -> FlopReport:
    """Per-step FLOPs: a multiply-add is 2, every other elementwise op is 1."""
    d, C, P, Q = config.d_model, config.n_channels, config.patch_samples, config.n_queries
    H, N, Ph, R, L = config.heads, config.d_state, config.d_head, config.rank, config.n_blocks
    He = config.embed_heads
    f = config.ffn_expansion * d

    embed = (2 * C * P * d + 2 * C * d          # per-channel projection, bias, channel code
             + 2 * Q * C * d + Q * C * He       # scores and scaling
             + 3 * Q * C * He                   # softmax: exp, sum, divide
             + 2 * Q * C * d                    # weighted values
             + 2 * Q * d * d + d                # output projection and bias
             + d)                               # positional add

    proj = 2 * d * (2 * H + 2 * N * R + 2 * H * Ph) + 2 * H * Ph * d
    scalar = H * 4 + H * 2                      # softplus, decay, sigmoid per head
    phase = H * (N // 2) * 5                    # increment, add, mod, sin, cos
    rotate = 2 * H * (N // 2) * R * 6
    state = (H * R * Ph                         # rank expansion of X
             + 2 * H * N * R * Ph + H * N * Ph  # B X and dt scaling
             + 4 * H * N * Ph                   # trapezoidal blend
             + 2 * H * N * Ph)                  # decay and accumulate
    readout = 2 * H * R * N * Ph + 2 * H * R * Ph + 2 * H * Ph + d
    ssm = L * (proj + scalar + phase + rotate + state + readout)

    ffn = L * (3 * 2 * d * f + 2 * f + d)
    norms = 2 * L * (4 * d + 1)
    head = 2 * d * config.n_classes + config.n_classes + config.n_classes
    return FlopReport(embed, ssm, ffn, norms + head, update_rate_hz)


def state_bytes(config: ModelConfig, precision: str = "f32", rqn_window: int = RQN_WINDOW,
                n_filter_sections: int = 0) -> dict:
    """Persistent memory of a session. ``ssm_state_bytes`` counts the state matrices only."""
    b = {"f32": 4, "f64": 8}[precision]
    L, H, N, P, C = config.n_blocks, config.heads, config.d_state, config.d_head, config.n_channels
    ssm = L * H * N * P * b
    extra = {
        "trapezoid_buffer": L * H * N * P * b,
        "phases": L * H * (N // 2) * b,
        "counters": 8 * (L + 1),
        "rqn_buffers": 2 * C * rqn_window * b,
        "filter_states": C * n_filter_sections * 2 * b,
    }
    return {"ssm_state_bytes": ssm, "total_session_bytes": ssm + sum(extra.values()), **extra}


# -- latency --------------------------------------------------------------------

@dataclass
class LatencyStats:
    context_patches: int
    mean_s: float
    p50_s: float
    p99_s: float
    samples: np.ndarray = field(repr=False, default=None)


def advance_state(encoder: Encoder, state: EncoderState, n_patches: int, rng: np.random.Generator,
                  chunk: int = 2048) -> EncoderState:
    """Advance ``state`` by ``n_patches`` random patches through the parallel form."""
    cfg = encoder.config
    done = 0
    while done < n_patches:
        n = min(chunk, n_patches - done)
        _, state = encoder.encode_sequence(rng.standard_normal((n, cfg.n_channels, cfg.patch_samples)),
                                           state)
        done += n
    return state


def time_steps(encoder: Encoder, state: EncoderState, n_timed: int = 1000, warmup: int = 50,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Wall time of each of ``n_timed`` streaming steps (step + classify) after ``warmup``."""
    cfg = encoder.config
    rng = rng if rng is not None else np.random.default_rng(0)
    stream = rng.standard_normal((warmup + n_timed, cfg.n_channels, cfg.patch_samples))
    times = np.empty(n_timed)
    for i in range(warmup + n_timed):
        t0 = time.perf_counter()
        h, state = encoder.encode_step(state, stream[i])
        encoder.classify(h)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times[i - warmup] = dt
    return times


def latency_stats(context_patches: int, times) -> LatencyStats:
    times = np.asarray(times)
    return LatencyStats(context_patches, float(times.mean()), float(np.percentile(times, 50)),
                        float(np.percentile(times, 99)), times)


def latency_bench(encoder: Encoder, context_patches: list[int], n_timed: int = 1000,
                  warmup: int = 50, seed: int = 0, advance_chunk: int = 2048) -> list[LatencyStats]:
    """Per-step latency after pre-advancing the state to each context length.

    The state is advanced through the parallel form (equivalent to stepping)
    on random input, then ``warmup`` untimed and ``n_timed`` timed streaming
    steps follow.
    """
    rng = np.random.default_rng(seed)
    out = []
    for ctx in context_patches:
        if ctx < 1:
            raise ValueError("context length must be at least one patch")
        state = advance_state(encoder, encoder.reset(), ctx, rng, advance_chunk)
        out.append(latency_stats(ctx, time_steps(encoder, state, n_timed, warmup, rng)))
    return out


# -- onset metrics ---------------------------------------------------------------

def onset_metrics(probabilities, annotations: list[Annotation], patch_duration_s: float,
                  window_s: float = 5.0) -> dict:
    """Probability around annotated onsets, averaged over events.

    Patch ``i`` covers ``[i*dt, (i+1)*dt)``. Per event:

    * ``prob_at_onset_patch``: the patch containing the onset;
    * ``mean_prob_at_onset``: mean over patches starting in ``[onset, onset + window)``;
    * ``peak_prob_near_onset``: max over patches starting in ``[onset - window, onset + window)``.

    Events whose onset lies outside the trace are skipped and counted.
    """
    if len(probabilities) and isinstance(probabilities[0], TraceRecord):
        probabilities = [float(np.atleast_1d(r.probability)[-1]) for r in probabilities]
    p = np.asarray(probabilities, dtype=float)
    starts = np.arange(len(p)) * patch_duration_s
    at, mean, peak = [], [], []
    skipped = 0
    for a in annotations:
        idx = int(math.floor(a.onset_s / patch_duration_s + 1e-9))
        if idx >= len(p) or a.onset_s < 0:
            skipped += 1
            continue
        at.append(p[idx])
        after = (starts >= a.onset_s - 1e-12) & (starts < a.onset_s + window_s)
        after[idx] = True
        near = (starts >= a.onset_s - window_s) & (starts < a.onset_s + window_s)
        near[idx] = True
        mean.append(p[after].mean())
        peak.append(p[near].max())
    if skipped:
        log.warning("onset_metrics: skipped %d event(s) outside the trace", skipped)

    def avg(v):
        return float(np.mean(v)) if v else float("nan")

    return {"mean_prob_at_onset": avg(mean), "peak_prob_near_onset": avg(peak),
            "prob_at_onset_patch": avg(at), "n_events": len(at), "n_skipped": skipped}


def summary_json(d: dict) -> str:
    return json.dumps(d, indent=2, sort_keys=True, default=float)
