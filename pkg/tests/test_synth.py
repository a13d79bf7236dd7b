from __future__ import annotations

import dataclasses
import hashlib
import json
import struct

import numpy as np
import pytest

from streamssm.synth import (MAGIC, Annotation, ChecksumError, EventSpec, Recording,
                             RecordingFormatError, SynthSpec, VersionError, annotations_json,
                             decode_recording, encode_recording, event_schedule, gen_recording,
                             patch_labels, read_recording, write_recording)

EVENTS = EventSpec(n_events=2, duration_s=10.0, amplitude=3.0)


def spec(**kw):
    base = dict(n_channels=3, duration_s=120.0, seed=4, events=EVENTS)
    base.update(kw)
    return SynthSpec(**base)


def test_generation_is_deterministic_and_seed_dependent():
    a, b = gen_recording(spec()), gen_recording(spec())
    assert a == b
    assert gen_recording(spec(seed=5)) != a


def test_components_draw_from_independent_streams():
    base = gen_recording(spec(noise_amplitude=0.0))
    with_noise = gen_recording(spec())
    noise_only = gen_recording(spec(band_amplitudes={b: 0.0 for b in ("delta", "theta", "alpha", "beta", "gamma")},
                                    events=EventSpec()))
    np.testing.assert_allclose(with_noise.samples, base.samples.astype(float) + noise_only.samples,
                               atol=1e-5)


def test_events_are_inside_and_separated():
    s = spec()
    sched = event_schedule(s)
    assert len(sched) == 2
    lead = int(EVENTS.precursor_lead_s * s.fs)
    gap = int(EVENTS.min_gap_s * s.fs)
    for (on, off) in sched:
        assert on >= lead and off <= s.n_samples and off - on == int(EVENTS.duration_s * s.fs)
    assert sched[1][0] - sched[0][1] >= gap + lead
    with pytest.raises(ValueError):
        event_schedule(spec(duration_s=30.0))


def test_event_raises_band_power():
    rec = gen_recording(spec(noise_amplitude=0.0))
    a = rec.annotations[0]
    fs = rec.fs
    inside = rec.samples[:, int(a.onset_s * fs): int(a.offset_s * fs)]
    before = rec.samples[:, : int(8 * fs)]
    assert inside.var() > 2.0 * before.var()


def test_patch_labels_use_patch_centres():
    rec = Recording(4.0, ["a"], np.zeros((1, 16)), [Annotation(1.0, 2.5)])
    # patches of 2 samples: centres at 0.25, 0.75, ..., 3.75 s
    np.testing.assert_array_equal(patch_labels(rec, 2), [0, 0, 1, 1, 1, 0, 0, 0])
    assert patch_labels(rec, 2, label="other").sum() == 0


def test_file_roundtrip(tmp_path):
    rec = gen_recording(spec())
    p = tmp_path / "r.ssmrec"
    write_recording(p, rec)
    assert read_recording(p) == rec
    doc = json.loads(annotations_json(rec))
    assert doc["schema"] == "annotations/1" and len(doc["annotations"]) == 2


def test_file_corruption_version_and_truncation():
    buf = encode_recording(gen_recording(spec(duration_s=60.0, events=EventSpec())))
    bad = bytearray(buf)
    bad[40] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_recording(bytes(bad))
    with pytest.raises(RecordingFormatError):
        decode_recording(buf[:20])
    body = bytearray(buf[:-32])
    body[len(MAGIC): len(MAGIC) + 2] = struct.pack("<H", 2)
    with pytest.raises(VersionError):
        decode_recording(bytes(body) + hashlib.sha256(bytes(body)).digest())


def test_recording_validation():
    with pytest.raises(ValueError):
        Recording(256.0, ["a", "b"], np.zeros((1, 10)))
    with pytest.raises(ValueError):
        Recording(256.0, ["a"], np.full((1, 10), np.nan))
    with pytest.raises(ValueError):
        Recording(10.0, ["a"], np.zeros((1, 10)), [Annotation(0.5, 2.0)])
    with pytest.raises(ValueError):
        SynthSpec(band_amplitudes={"kappa": 1.0})
    with pytest.raises(ValueError):
        SynthSpec(events=EventSpec(band="kappa"))


def test_artifact_rates_add_energy():
    quiet = gen_recording(spec(events=EventSpec()))
    noisy = gen_recording(spec(events=EventSpec(), blink_per_min=6, muscle_per_min=6, pop_per_min=2))
    assert np.abs(noisy.samples).max() > np.abs(quiet.samples).max()
    assert dataclasses.replace(spec()).n_samples == 120 * 256
