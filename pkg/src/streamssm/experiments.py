"""Desk-scale ablations on synthetic recordings.

* Persistence: a persistent session against one reset every 5 s.
* Spectral: zero-phase band-stop of each EEG band on held-out recordings.

Each seed draws fresh encoder weights and recordings. A linear head is fitted
on the frozen encoder's hidden states of the training recordings and scored
by AUROC on the held-out ones.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import MICRO_CONFIG, Encoder, ModelConfig
from .metrics import auroc
from .preprocess import BANDS, FS, RQN_EPS, RQN_WINDOW, band_stop_ablate, rqn_stream
from .runtime import sequence_hiddens
from .synth import EventSpec, Recording, SynthSpec, gen_recording, patch_labels

log = logging.getLogger(__name__)

ABLATION_CONFIG = dataclasses.replace(MICRO_CONFIG, d_model=32, d_state=16, d_head=16,
                                      n_queries=4, embed_heads=4)


@dataclass
class AblationSpec:
    config: ModelConfig = ABLATION_CONFIG
    n_train: int = 4
    n_test: int = 2
    duration_s: float = 240.0
    events: EventSpec = field(default_factory=lambda: EventSpec(n_events=3, amplitude=4.0))
    reset_s: float = 5.0
    head_steps: int = 500
    head_lr: float = 0.5
    head_l2: float = 1e-3

    @property
    def reset_patches(self) -> int:
        return int(round(self.reset_s * FS / self.config.patch_samples))


def make_recordings(spec: AblationSpec, seed: int) -> list[Recording]:
    n = spec.n_train + spec.n_test
    return [gen_recording(SynthSpec(n_channels=spec.config.n_channels, duration_s=spec.duration_s,
                                    seed=1000 * seed + i, events=spec.events)) for i in range(n)]


def fit_linear_head(features, labels, steps: int = 500, lr: float = 0.5, l2: float = 1e-3):
    """Class-balanced logistic regression by gradient descent.

    Features are standardised internally; the returned ``(W, b)`` act on raw
    features, so ``features @ W + b`` is the logit.
    """
    F = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if not 0 < y.mean() < 1:
        raise ValueError("head fitting needs both classes")
    mu, sd = F.mean(0), F.std(0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (F - mu) / sd
    weight = np.where(y == 1, 0.5 / y.mean(), 0.5 / (1 - y.mean())) / len(y)
    w, b = np.zeros(F.shape[1]), 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(Z @ w + b)))
        g = weight * (p - y)
        w -= lr * (Z.T @ g + l2 * w)
        b -= lr * g.sum()
    W = w / sd
    return W, b - mu @ W


def fine_tune_head(encoder: Encoder, hiddens, labels, **kw) -> Encoder:
    """Copy of ``encoder`` whose single-logit head is fitted on ``hiddens``."""
    if encoder.config.n_classes != 1:
        raise ValueError("fine_tune_head supports the single-logit head")
    W, b = fit_linear_head(hiddens, labels, **kw)
    out = encoder.copy()
    out.params["head.W"][:, 0] = W
    out.params["head.b"][0] = b
    return out


def _condition(rec: Recording):
    return rqn_stream(rec.samples.astype(float), RQN_WINDOW, RQN_EPS)


@dataclass
class PersistenceResult:
    seed: int
    auroc: dict[str, float]

    @property
    def delta(self) -> float:
        return self.auroc["persistent"] - self.auroc["windowed"]


def persistence_ablation(spec: AblationSpec, seed: int) -> PersistenceResult:
    enc = Encoder.init(spec.config, np.random.default_rng([seed, 7]))
    recs = make_recordings(spec, seed)
    X = [_condition(r) for r in recs]
    y = [patch_labels(r, spec.config.patch_samples) for r in recs]
    tr, te = slice(0, spec.n_train), slice(spec.n_train, None)
    out = {}
    for mode in ("persistent", "windowed"):
        H = [sequence_hiddens(enc, x, mode, spec.reset_patches) for x in X]
        head = fine_tune_head(enc, np.concatenate(H[tr]), np.concatenate(y[tr]),
                              steps=spec.head_steps, lr=spec.head_lr, l2=spec.head_l2)
        scores = np.concatenate([head.logits(h)[:, 0] for h in H[te]])
        out[mode] = auroc(scores, np.concatenate(y[te]))
    log.info("persistence seed %d: %s", seed, out)
    return PersistenceResult(seed, out)


@dataclass
class BandResult:
    seed: int
    baseline: float
    ablated: dict[str, float]

    @property
    def drops(self) -> dict[str, float]:
        return {b: self.baseline - v for b, v in self.ablated.items()}

    @property
    def largest_drop(self) -> str:
        d = self.drops
        return max(d, key=d.get)


def band_ablation(spec: AblationSpec, seed: int, mode: str = "persistent") -> BandResult:
    """Head fitted on clean training data; each band removed from the test signal only."""
    enc = Encoder.init(spec.config, np.random.default_rng([seed, 7]))
    recs = make_recordings(spec, seed)
    P = spec.config.patch_samples
    y = [patch_labels(r, P) for r in recs]
    tr, te = recs[: spec.n_train], recs[spec.n_train:]
    H = [sequence_hiddens(enc, _condition(r), mode, spec.reset_patches) for r in tr]
    head = fine_tune_head(enc, np.concatenate(H), np.concatenate(y[: spec.n_train]),
                          steps=spec.head_steps, lr=spec.head_lr, l2=spec.head_l2)
    y_te = np.concatenate(y[spec.n_train:])

    def score(signals):
        h = [sequence_hiddens(enc, rqn_stream(s, RQN_WINDOW, RQN_EPS), mode, spec.reset_patches)
             for s in signals]
        return auroc(np.concatenate([head.logits(x)[:, 0] for x in h]), y_te)

    raw = [r.samples.astype(float) for r in te]
    base = score(raw)
    ablated = {b: score([band_stop_ablate(s, b, FS) for s in raw]) for b in BANDS}
    log.info("band ablation seed %d: base %.3f %s", seed, base, ablated)
    return BandResult(seed, base, ablated)
