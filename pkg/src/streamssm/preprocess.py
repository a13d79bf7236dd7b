"""Signal conditioning: Butterworth filters, resampling, montage, robust quartile normalisation."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sps

FS = 256.0
RQN_WINDOW = 1280
RQN_EPS = 1e-6

BANDS: dict[str, tuple[float, float]] = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 13.0),
    "beta": (13.0, 30.0),
    "gamma": (30.0, 75.0),
}

# TCP longitudinal bipolar ("double banana") montage, 22 derivations
DOUBLE_BANANA: list[tuple[str, str]] = [
    ("FP1", "F7"), ("F7", "T3"), ("T3", "T5"), ("T5", "O1"),
    ("FP2", "F8"), ("F8", "T4"), ("T4", "T6"), ("T6", "O2"),
    ("A1", "T3"), ("T3", "C3"), ("C3", "CZ"), ("CZ", "C4"), ("C4", "T4"), ("T4", "A2"),
    ("FP1", "F3"), ("F3", "C3"), ("C3", "P3"), ("P3", "O1"),
    ("FP2", "F4"), ("F4", "C4"), ("C4", "P4"), ("P4", "O2"),
]


@dataclass
class BiquadCascade:
    """Second-order sections ``(b0, b1, b2, a1, a2)`` with ``a0 == 1``."""

    sections: np.ndarray  # (n_sections, 5)

    @classmethod
    def from_sos(cls, sos) -> "BiquadCascade":
        sos = np.asarray(sos, dtype=float)
        sos = sos / sos[:, 3:4]
        return cls(np.column_stack([sos[:, 0], sos[:, 1], sos[:, 2], sos[:, 4], sos[:, 5]]))

    @property
    def sos(self) -> np.ndarray:
        s = self.sections
        return np.column_stack([s[:, 0], s[:, 1], s[:, 2], np.ones(len(s)), s[:, 3], s[:, 4]])

    @property
    def n_sections(self) -> int:
        return len(self.sections)

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for a1, a2 in self.sections[:, 3:5]])

    def response(self, freqs_hz, fs: float = FS) -> np.ndarray:
        """Complex frequency response, evaluated directly from the section polynomials."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / fs)
        zi = 1.0 / z
        h = np.ones_like(z)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * zi + b2 * zi**2) / (1.0 + a1 * zi + a2 * zi**2)
        return h

    def gain_db(self, freqs_hz, fs: float = FS) -> np.ndarray:
        return 20 * np.log10(np.abs(self.response(freqs_hz, fs)) + 1e-300)


def design_butterworth(kind: str, cutoffs_hz, fs_hz: float = FS, order: int = 4) -> BiquadCascade:
    """Digital Butterworth filter via bilinear transform with pre-warping.

    ``order`` is the prototype order; band filters therefore have ``2*order``
    poles.
    """
    cut = np.atleast_1d(np.asarray(cutoffs_hz, dtype=float))
    need = 2 if kind in ("bandpass", "bandstop") else 1
    if kind not in ("lowpass", "highpass", "bandpass", "bandstop"):
        raise ValueError(f"unknown filter kind {kind!r}")
    if cut.size != need:
        raise ValueError(f"{kind} needs {need} cutoff(s), got {cut.size}")
    if np.any(cut <= 0) or np.any(cut >= fs_hz / 2):
        raise ValueError(f"cutoffs {cut.tolist()} outside (0, {fs_hz / 2})")
    if need == 2 and cut[0] >= cut[1]:
        raise ValueError("band edges must be increasing")
    sos = sps.butter(order, cut if need == 2 else cut[0], btype=kind, fs=fs_hz, output="sos")
    return BiquadCascade.from_sos(sos)


def notch_60(fs_hz: float = FS) -> BiquadCascade:
    return design_butterworth("bandstop", (58.0, 62.0), fs_hz)


@dataclass
class CausalFilterState:
    cascade: BiquadCascade
    z: np.ndarray = None  # (n_sections, 2) transposed direct-form II delays

    def __post_init__(self):
        if self.z is None:
            self.z = np.zeros((self.cascade.n_sections, 2))

    @property
    def nbytes(self) -> int:
        return self.z.nbytes


def causal_filter_step(state: CausalFilterState, sample: float) -> float:
    """Single-sample transposed direct-form II update through every section."""
    x = float(sample)
    z = state.z
    for k, (b0, b1, b2, a1, a2) in enumerate(state.cascade.sections):
        y = b0 * x + z[k, 0]
        z[k, 0] = b1 * x - a1 * y + z[k, 1]
        z[k, 1] = b2 * x - a2 * y
        x = y
    return x


def lfilter_causal(signal, cascade: BiquadCascade, axis: int = -1):
    """Vectorised forward-only filtering from rest (same recursion as :func:`causal_filter_step`)."""
    return sps.sosfilt(cascade.sos, np.asarray(signal, dtype=float), axis=axis)


def filtfilt(signal, cascade: BiquadCascade, axis: int = -1):
    """Zero-phase forward-backward filtering with odd reflection padding of ``6 * n_sections`` samples."""
    x = np.asarray(signal, dtype=float)
    padlen = 3 * 2 * cascade.n_sections
    if x.shape[axis] <= padlen:
        raise ValueError(f"signal length {x.shape[axis]} too short for filtfilt (needs > {padlen})")
    return sps.sosfiltfilt(cascade.sos, x, axis=axis, padtype="odd", padlen=padlen)


def resample(signal, fs_in: float, fs_out: float = FS, axis: int = -1):
    """Polyphase windowed-sinc resampling; output length is ``round(n * fs_out / fs_in)``."""
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError("sampling rates must be positive")
    x = np.asarray(signal, dtype=float)
    if fs_in == fs_out:
        return x.copy()
    ratio = Fraction(fs_out).limit_denominator(10**6) / Fraction(fs_in).limit_denominator(10**6)
    y = sps.resample_poly(x, ratio.numerator, ratio.denominator, axis=axis)
    n_out = int(round(x.shape[axis] * fs_out / fs_in))
    y = np.moveaxis(y, axis, -1)
    if y.shape[-1] >= n_out:
        y = y[..., :n_out]
    else:
        y = np.concatenate([y, np.repeat(y[..., -1:], n_out - y.shape[-1], axis=-1)], axis=-1)
    return np.moveaxis(y, -1, axis)


def bipolar_montage(unipolar, electrodes: list[str], pairs=DOUBLE_BANANA):
    """Difference electrode pairs: ``out[k] = x[a_k] - x[b_k]``."""
    x = np.asarray(unipolar, dtype=float)
    index = {name.upper(): i for i, name in enumerate(electrodes)}
    missing = sorted({e for pair in pairs for e in pair if e.upper() not in index})
    if missing:
        raise ValueError(f"montage needs electrodes not present: {missing}")
    return np.stack([x[index[a.upper()]] - x[index[b.upper()]] for a, b in pairs])


def band_stop_ablate(signal, band: str, fs_hz: float = FS, axis: int = -1):
    """Remove one canonical EEG band with a zero-phase Butterworth band-stop."""
    if band not in BANDS:
        raise ValueError(f"unknown band {band!r}; expected one of {sorted(BANDS)}")
    return filtfilt(signal, design_butterworth("bandstop", BANDS[band], fs_hz), axis=axis)


def preprocess_offline(X, fs_in: float, fs_out: float = FS, band=(0.1, 75.0), notch: bool = True):
    """Zero-phase bandpass (default 0.1-75 Hz), 60 Hz notch, resampling (per channel)."""
    X = np.asarray(X, dtype=float)
    X = filtfilt(X, design_butterworth("bandpass", band, fs_in), axis=-1)
    if notch and fs_in > 124.0:  # the notch needs 62 Hz below Nyquist
        X = filtfilt(X, notch_60(fs_in), axis=-1)
    return resample(X, fs_in, fs_out, axis=-1)


# -- robust quartile normalisation ------------------------------------------

def quartiles_sorted(s) -> tuple[float, float, float]:
    """Q1, median, Q3 of an ascending sequence by linear interpolation of order statistics."""
    n = len(s)

    def q(p):
        pos = p * (n - 1)
        lo = int(pos)
        frac = pos - lo
        if lo + 1 < n:
            return s[lo] + frac * (s[lo + 1] - s[lo])
        return s[lo]

    return q(0.25), q(0.5), q(0.75)


def rqn_window(window, eps: float = RQN_EPS):
    """Per-channel ``(x - median) / (IQR + eps)`` with one set of statistics per window."""
    X = np.asarray(window, dtype=float)
    if X.shape[-1] < 4:
        raise ValueError("rqn_window needs at least 4 samples")
    q1, med, q3 = np.percentile(X, [25, 50, 75], axis=-1, keepdims=True)
    return (X - med) / (q3 - q1 + eps)


@dataclass
class RqnState:
    n_channels: int
    window: int = RQN_WINDOW
    eps: float = RQN_EPS
    ring: np.ndarray = field(init=False)
    sorted_vals: list[list[float]] = field(init=False)
    count: int = field(init=False, default=0)
    pos: int = field(init=False, default=0)

    def __post_init__(self):
        self.ring = np.zeros((self.n_channels, self.window))
        self.sorted_vals = [[] for _ in range(self.n_channels)]

    @property
    def nbytes(self) -> int:
        # ring plus the sorted mirror at full capacity
        return 2 * self.ring.nbytes


def rqn_stream_step(state: RqnState, sample_vec):
    """Push one multichannel sample and normalise it against the causal trailing buffer."""
    x = np.asarray(sample_vec, dtype=float)
    if x.shape != (state.n_channels,):
        raise ValueError(f"expected {state.n_channels} channel values, got {x.shape}")
    full = state.count == state.window
    out = np.empty(state.n_channels)
    for c in range(state.n_channels):
        sv = state.sorted_vals[c]
        if full:
            old = state.ring[c, state.pos]
            del sv[bisect.bisect_left(sv, old)]
        bisect.insort(sv, float(x[c]))
        state.ring[c, state.pos] = x[c]
        q1, med, q3 = quartiles_sorted(sv)
        out[c] = (x[c] - med) / (q3 - q1 + state.eps)
    state.pos = (state.pos + 1) % state.window
    if not full:
        state.count += 1
    return out


def rqn_stream(X, window: int = RQN_WINDOW, eps: float = RQN_EPS, state: RqnState | None = None):
    """Apply :func:`rqn_stream_step` to every sample of a ``(C, T)`` array."""
    X = np.asarray(X, dtype=float)
    if state is None:
        state = RqnState(X.shape[0], window, eps)
    out = np.empty_like(X)
    for t in range(X.shape[1]):
        out[:, t] = rqn_stream_step(state, X[:, t])
    return out
