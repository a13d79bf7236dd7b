"""Deterministic synthetic EEG with labelled events, and the recording file container.

Randomness comes from Philox-4x64 (a counter-based generator) keyed by
``(seed, component)``, so each signal component draws from its own stream and
switching one component off leaves the others bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import BANDS

MAGIC = b"SSMREC\x00\x00"
VERSION = 1

_COMPONENTS = {"background": 1, "noise": 2, "artifacts": 3, "events": 4, "phase": 5}


class RecordingFormatError(ValueError):
    pass


class ChecksumError(RecordingFormatError):
    pass


class VersionError(RecordingFormatError):
    pass


def philox(seed: int, component: str | int) -> np.random.Generator:
    key = _COMPONENTS.get(component, component) if isinstance(component, str) else component
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(key)])))


@dataclass
class Annotation:
    onset_s: float
    offset_s: float
    label: str = "seizure"


@dataclass
class Recording:
    fs: float
    channel_names: list[str]
    samples: np.ndarray  # (C, T) float32
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.channel_names):
            raise ValueError("samples must be (C, T) with one name per channel")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        dur = self.duration_s
        for a in self.annotations:
            if not (0 <= a.onset_s < a.offset_s <= dur + 1e-9):
                raise ValueError(f"annotation {a} outside [0, {dur}]")

    @property
    def duration_s(self) -> float:
        return self.samples.shape[1] / self.fs

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (self.fs == other.fs and self.channel_names == other.channel_names
                and self.samples.shape == other.samples.shape
                and self.samples.tobytes() == other.samples.tobytes()
                and self.annotations == other.annotations)


@dataclass
class EventSpec:
    n_events: int = 0
    duration_s: float = 20.0
    band: str = "delta"
    frequency_hz: float | None = None  # defaults to the band's geometric centre
    amplitude: float = 2.0
    precursor_lead_s: float = 10.0
    precursor_fraction: float = 0.3
    min_gap_s: float = 20.0


@dataclass
class SynthSpec:
    fs: float = 256.0
    n_channels: int = 4
    duration_s: float = 60.0
    band_amplitudes: dict[str, float] = field(default_factory=lambda: {
        "delta": 1.0, "theta": 0.6, "alpha": 0.8, "beta": 0.3, "gamma": 0.1})
    noise_amplitude: float = 0.3
    blink_per_min: float = 0.0
    muscle_per_min: float = 0.0
    pop_per_min: float = 0.0
    events: EventSpec = field(default_factory=EventSpec)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.events, dict):
            self.events = EventSpec(**self.events)
        unknown = set(self.band_amplitudes) - set(BANDS)
        if unknown:
            raise ValueError(f"unknown bands {sorted(unknown)}")
        if any(v < 0 for v in self.band_amplitudes.values()) or self.noise_amplitude < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.events.band not in BANDS:
            raise ValueError(f"unknown event band {self.events.band!r}")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.fs))


def _band_oscillation(rng, band: str, n: int, fs: float):
    """Unit-amplitude oscillation whose frequency wanders slowly inside ``band``."""
    lo, hi = BANDS[band]
    t = np.arange(n) / fs
    centre = math.sqrt(lo * hi)
    half = 0.4 * (hi - lo) / 2
    period = rng.uniform(5.0, 20.0)
    psi, phi = rng.uniform(0, 2 * math.pi, size=2)
    f = np.clip(centre + half * np.sin(2 * math.pi * t / period + psi), lo, hi)
    phase = 2 * math.pi * np.cumsum(f) / fs + phi
    return np.sin(phase)


def _pink_noise(rng, shape, fs: float):
    n = shape[-1]
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(n, 1 / fs)
    scale = np.zeros_like(freqs)
    scale[1:] = 1 / np.sqrt(freqs[1:])
    x = np.fft.irfft(spec * scale, n=n, axis=-1)
    std = x.std(axis=-1, keepdims=True)
    return x / np.where(std > 0, std, 1.0)


def event_schedule(spec: SynthSpec) -> list[tuple[int, int]]:
    """Sample-index ``[onset, offset)`` intervals of the injected events."""
    ev = spec.events
    if ev.n_events <= 0:
        return []
    rng = philox(spec.seed, "events")
    fs, n = spec.fs, spec.n_samples
    dur = int(round(ev.duration_s * fs))
    lead = int(round(ev.precursor_lead_s * fs))
    gap = int(round(ev.min_gap_s * fs))
    slot = lead + dur + gap
    usable = n - lead - dur
    if ev.n_events * slot > n:
        raise ValueError("recording too short for the requested events")
    slack = n - ev.n_events * slot
    cuts = np.sort(rng.integers(0, slack + 1, size=ev.n_events))
    out = []
    for k, c in enumerate(cuts):
        onset = int(c) + k * slot + lead
        if onset > usable:
            onset = usable
        out.append((onset, onset + dur))
    return out


def event_envelope(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ictal envelope (1 inside events, 0 elsewhere) and precursor ramp, both length T."""
    n = spec.n_samples
    ictal = np.zeros(n)
    pre = np.zeros(n)
    lead = int(round(spec.events.precursor_lead_s * spec.fs))
    for on, off in event_schedule(spec):
        ictal[on:off] = 1.0
        if lead > 0:
            start = max(0, on - lead)
            pre[start:on] = np.linspace(0.0, 1.0, on - start, endpoint=False)
    return ictal, pre


def gen_recording(spec: SynthSpec) -> Recording:
    fs, n, C = spec.fs, spec.n_samples, spec.n_channels
    X = np.zeros((C, n))

    rng_bg = philox(spec.seed, "background")
    for band in BANDS:
        amp = spec.band_amplitudes.get(band, 0.0)
        for c in range(C):
            # draw even when amp == 0 so other bands keep their streams
            osc = _band_oscillation(rng_bg, band, n, fs)
            if amp > 0:
                X[c] += amp * osc

    if spec.noise_amplitude > 0:
        X += spec.noise_amplitude * _pink_noise(philox(spec.seed, "noise"), (C, n), fs)

    X += _artifacts(spec)

    ev = spec.events
    if ev.n_events > 0:
        ictal, pre = event_envelope(spec)
        rng = philox(spec.seed, "phase")
        f0 = ev.frequency_hz or math.sqrt(BANDS[ev.band][0] * BANDS[ev.band][1])
        t = np.arange(n) / fs
        gains = rng.uniform(0.5, 1.0, size=C)
        phases = rng.uniform(0, 2 * math.pi, size=C)
        env = ictal + ev.precursor_fraction * pre
        for c in range(C):
            X[c] += ev.amplitude * gains[c] * env * np.sin(2 * math.pi * f0 * t + phases[c])

    ann = [Annotation(on / fs, off / fs, "seizure") for on, off in event_schedule(spec)]
    names = [f"CH{c:02d}" for c in range(C)]
    return Recording(fs, names, X.astype(np.float32), ann)


def _artifacts(spec: SynthSpec) -> np.ndarray:
    fs, n, C = spec.fs, spec.n_samples, spec.n_channels
    rng = philox(spec.seed, "artifacts")
    out = np.zeros((C, n))
    minutes = spec.duration_s / 60.0
    t = np.arange(n) / fs
    for _ in range(rng.poisson(spec.blink_per_min * minutes)):
        t0 = rng.uniform(0, spec.duration_s)
        bump = 8.0 * np.exp(-0.5 * ((t - t0) / 0.1) ** 2)
        out[: min(2, C)] += bump
    for _ in range(rng.poisson(spec.muscle_per_min * minutes)):
        t0 = rng.uniform(0, spec.duration_s)
        c = rng.integers(C)
        mask = (t >= t0) & (t < t0 + 1.0)
        out[c, mask] += 3.0 * rng.standard_normal(mask.sum())
    for _ in range(rng.poisson(spec.pop_per_min * minutes)):
        t0 = rng.uniform(0, spec.duration_s)
        c = rng.integers(C)
        after = t >= t0
        out[c, after] += 20.0 * np.exp(-(t[after] - t0) / 0.2)
    return out


# -- file container -----------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def encode_recording(rec: Recording) -> bytes:
    C, T = rec.samples.shape
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<dIQ", rec.fs, C, T)]
    parts += [_pack_str(n) for n in rec.channel_names]
    parts.append(rec.samples.astype("<f4", copy=False).tobytes(order="C"))
    parts.append(struct.pack("<I", len(rec.annotations)))
    for a in rec.annotations:
        parts.append(struct.pack("<dd", a.onset_s, a.offset_s) + _pack_str(a.label))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise RecordingFormatError("truncated recording file")
        b = self.buf[self.pos: self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def decode_recording(buf: bytes) -> Recording:
    if len(buf) < len(MAGIC) + 32 or buf[: len(MAGIC)] != MAGIC:
        raise RecordingFormatError("not a recording file (bad magic or truncated)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("recording checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"unsupported recording version {version}")
    fs, C, T = r.unpack("<dIQ")
    names = [r.string() for _ in range(C)]
    samples = np.frombuffer(r.take(4 * C * T), dtype="<f4").reshape(C, T).astype(np.float32)
    (n_ann,) = r.unpack("<I")
    ann = []
    for _ in range(n_ann):
        on, off = r.unpack("<dd")
        ann.append(Annotation(on, off, r.string()))
    if r.pos != len(body):
        raise RecordingFormatError("trailing bytes in recording file")
    return Recording(fs, names, samples, ann)


def write_recording(path, rec: Recording) -> None:
    Path(path).write_bytes(encode_recording(rec))


def read_recording(path) -> Recording:
    return decode_recording(Path(path).read_bytes())


def annotations_json(rec: Recording) -> str:
    return json.dumps({"schema": "annotations/1", "fs": rec.fs,
                       "duration_s": rec.duration_s,
                       "annotations": [asdict(a) for a in rec.annotations]}, indent=2)


def patch_labels(rec: Recording, patch_samples: int, label: str | None = None) -> np.ndarray:
    """1 for patches whose centre sample lies inside an annotated interval."""
    G = rec.samples.shape[1] // patch_samples
    centres = (np.arange(G) * patch_samples + patch_samples / 2) / rec.fs
    y = np.zeros(G, dtype=int)
    for a in rec.annotations:
        if label is None or a.label == label:
            y[(centres >= a.onset_s) & (centres < a.offset_s)] = 1
    return y
