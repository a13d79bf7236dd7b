"""Sectioned ``key = value`` run configuration.

Sections: ``model``, ``preprocess``, ``stream``, ``synth``, ``ssl``, ``flowlab``.
Every key has a typed default; unknown sections or keys are rejected. The
hash of the fully resolved configuration names run directories and is
written into every output.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoder import ModelConfig
from .flowlab import FlowLabSpec
from .synth import EventSpec, SynthSpec

CONFIG_SCHEMA = "runconfig/1"


class ConfigError(ValueError):
    pass


@dataclass
class PreprocessSection:
    fs: float = 256.0
    bandpass_low_hz: float = 0.1
    bandpass_high_hz: float = 75.0
    notch: bool = True
    rqn_window: int = 1280
    rqn_eps: float = 1e-6


@dataclass
class StreamSection:
    mode: str = "persistent"
    reset_s: float = 5.0
    update_rate_hz: float = 16.0
    causal_filters: bool = False
    head_bias: float = -4.0  # untrained head: low probabilities near sigmoid(head_bias)
    head_weight_scale: float = 1e-3


@dataclass
class SynthSection:
    n_channels: int = 22
    duration_s: float = 60.0
    noise_amplitude: float = 0.3
    blink_per_min: float = 0.0
    muscle_per_min: float = 0.0
    pop_per_min: float = 0.0
    n_events: int = 0
    event_duration_s: float = 20.0
    event_band: str = "delta"
    event_amplitude: float = 2.0
    precursor_lead_s: float = 10.0
    precursor_fraction: float = 0.3


@dataclass
class SslSection:
    # toy pretraining; objective constants are fixed in streamssm.ssl
    steps: int = 200
    lr: float = 0.01
    windows: int = 2
    tokens: int = 20


@dataclass
class FlowlabSection:
    depth: int = 2
    rho: float = 0.5
    eps: float = 1e-3
    lam: float = 1.0


SECTIONS = {
    "model": ModelConfig,
    "preprocess": PreprocessSection,
    "stream": StreamSection,
    "synth": SynthSection,
    "ssl": SslSection,
    "flowlab": FlowlabSection,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    stream: StreamSection = field(default_factory=StreamSection)
    synth: SynthSection = field(default_factory=SynthSection)
    ssl: SslSection = field(default_factory=SslSection)
    flowlab: FlowlabSection = field(default_factory=FlowlabSection)

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_text(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {_format(v)}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)

    def synth_spec(self, seed: int) -> SynthSpec:
        s = self.synth
        events = EventSpec(n_events=s.n_events, duration_s=s.event_duration_s, band=s.event_band,
                           amplitude=s.event_amplitude, precursor_lead_s=s.precursor_lead_s,
                           precursor_fraction=s.precursor_fraction)
        return SynthSpec(fs=self.preprocess.fs, n_channels=s.n_channels, duration_s=s.duration_s,
                         noise_amplitude=s.noise_amplitude, blink_per_min=s.blink_per_min,
                         muscle_per_min=s.muscle_per_min, pop_per_min=s.pop_per_min,
                         events=events, seed=seed)

    def flowlab_spec(self, objective: str, **overrides) -> FlowLabSpec:
        f = self.flowlab
        kw = dict(depth=f.depth, rho=f.rho, eps=f.eps, objective=objective, lam=f.lam)
        kw.update(overrides)
        return FlowLabSpec(**kw)


def _section_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = getattr(v, "value", v)  # enums by value
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Apply ``{"section.key": "value"}`` overrides (values parsed like file values)."""
    values = cfg.to_dict()
    for dotted, raw in pairs.items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.key")
        sec, key = dotted.split(".", 1)
        if sec not in values:
            raise ConfigError(f"unknown section [{sec}]")
        if key not in values[sec]:
            raise ConfigError(f"unknown key {key!r} in [{sec}]")
        values[sec][key] = _coerce(str(raw), values[sec][key], dotted)
    return _build(values)


def _build(values: dict) -> RunConfig:
    try:
        return RunConfig(**{name: cls(**values[name]) for name, cls in SECTIONS.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    pairs = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            pairs[f"{sec}.{key}"] = raw
    return apply_overrides(RunConfig(), pairs)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def schema() -> dict:
    """Machine-readable description of every section and key with its type and default."""
    out = {"schema": CONFIG_SCHEMA, "sections": {}}
    for name, values in RunConfig().to_dict().items():
        out["sections"][name] = {k: {"type": type(v).__name__, "default": v} for k, v in values.items()}
    return out
