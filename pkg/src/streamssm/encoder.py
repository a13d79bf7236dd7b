"""Causal streaming encoder: patch embedder, cyclic positions, SSM blocks, linear head.

Parameters live in one flat ``dict[str, np.ndarray]`` keyed by dotted names
(``blocks.0.ssm.W_B`` ...). Views such as :meth:`Encoder.ssm_params` reference
the same arrays, so in-place edits (EMA updates, finite differences) are seen
everywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import cross_attention, rms_norm, sigmoid, softmax, swiglu_ffn
from .ssm import DEFAULT_CHUNK, Discretization, SsmParams, SsmState, ssm_scan, ssm_step


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 704
    n_blocks: int = 4
    d_state: int = 64
    d_head: int = 64
    ffn_expansion: int = 4
    rank: int = 4
    n_queries: int = 4
    embed_heads: int = 4
    patch_samples: int = 16
    pos_period: int = 80
    n_channels: int = 22
    n_classes: int = 1  # 1 means a single sigmoid output
    mode: Discretization = Discretization.TRAPEZOIDAL
    norm_eps: float = 1e-6
    scan_chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        object.__setattr__(self, "mode", Discretization(self.mode))
        if self.d_model % self.d_head:
            raise ValueError(f"d_model={self.d_model} is not a multiple of d_head={self.d_head}")
        if self.d_state % 2:
            raise ValueError("d_state must be even")
        if self.d_model % self.embed_heads:
            raise ValueError("d_model must be divisible by embed_heads")
        for name in ("n_blocks", "rank", "n_queries", "patch_samples", "pos_period",
                     "n_channels", "n_classes", "ffn_expansion", "scan_chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def heads(self) -> int:
        return self.d_model // self.d_head

    @property
    def window_samples(self) -> int:
        return self.patch_samples * self.pos_period

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


FULL_CONFIG = ModelConfig()

# micro model for numeric-gradient training and fast tests
MICRO_CONFIG = ModelConfig(d_model=16, n_blocks=2, d_state=8, d_head=8, ffn_expansion=4, rank=1,
                           n_queries=2, embed_heads=2, patch_samples=16, pos_period=20,
                           n_channels=4)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, C, P, Q = cfg.d_model, cfg.n_channels, cfg.patch_samples, cfg.n_queries
    f = cfg.ffn_expansion * d
    shapes = {
        "embed.W_patch": (P, d),
        "embed.b_patch": (d,),
        "embed.chan": (C, d),
        "embed.queries": (Q, d),
        "embed.W_out": (Q * d, d),
        "embed.b_out": (d,),
        "pos": (cfg.pos_period, d),
    }
    ssm_shapes = SsmParams.shapes(d, cfg.heads, cfg.d_state, cfg.d_head, cfg.rank)
    for i in range(cfg.n_blocks):
        shapes[f"blocks.{i}.norm1"] = (d,)
        for k, s in ssm_shapes.items():
            shapes[f"blocks.{i}.ssm.{k}"] = s
        shapes[f"blocks.{i}.norm2"] = (d,)
        shapes[f"blocks.{i}.ffn.W_gate"] = (d, f)
        shapes[f"blocks.{i}.ffn.W_up"] = (d, f)
        shapes[f"blocks.{i}.ffn.W_down"] = (f, d)
    shapes["head.W"] = (d, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.d_model

    def uni(shape, fan_in):
        b = math.sqrt(3.0 / fan_in)
        return rng.uniform(-b, b, size=shape)

    shapes = param_shapes(cfg)
    p: dict[str, np.ndarray] = {
        "embed.W_patch": uni(shapes["embed.W_patch"], cfg.patch_samples),
        "embed.b_patch": np.zeros(d),
        "embed.chan": rng.normal(0.0, 1.0, size=shapes["embed.chan"]),
        "embed.queries": rng.normal(0.0, 1.0, size=shapes["embed.queries"]),
        "embed.W_out": uni(shapes["embed.W_out"], cfg.n_queries * d),
        "embed.b_out": np.zeros(d),
        "pos": rng.normal(0.0, 0.02, size=shapes["pos"]),
    }
    for i in range(cfg.n_blocks):
        p[f"blocks.{i}.norm1"] = np.ones(d)
        ssm = SsmParams.init(rng, d, cfg.heads, cfg.d_state, cfg.d_head, cfg.rank)
        for k, v in ssm.as_dict().items():
            p[f"blocks.{i}.ssm.{k}"] = v
        p[f"blocks.{i}.norm2"] = np.ones(d)
        f = cfg.ffn_expansion * d
        p[f"blocks.{i}.ffn.W_gate"] = uni((d, f), d)
        p[f"blocks.{i}.ffn.W_up"] = uni((d, f), d)
        p[f"blocks.{i}.ffn.W_down"] = uni((f, d), f)
    p["head.W"] = uni(shapes["head.W"], d)
    p["head.b"] = np.zeros(cfg.n_classes)
    return p


@dataclass
class EncoderState:
    blocks: list[SsmState]
    tau: int = 0

    def copy(self) -> "EncoderState":
        return EncoderState([b.copy() for b in self.blocks], self.tau)

    @property
    def nbytes(self) -> int:
        return sum(b.nbytes for b in self.blocks)

    def block_norms(self) -> list[float]:
        return [float(np.linalg.norm(b.S)) for b in self.blocks]


def patchify(X, P: int):
    """Split a ``(C, T)`` signal into ``floor(T/P)`` patches of shape ``(C, P)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("patchify expects a (C, T) array")
    C, T = X.shape
    if T < P:
        raise ValueError(f"signal has {T} samples, fewer than one patch of {P}")
    G = T // P
    return X[:, : G * P].reshape(C, G, P).transpose(1, 0, 2)


@dataclass
class Encoder:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def init(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "Encoder":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(config, init_params(config, rng))

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise KeyError(f"parameter names do not match config: missing={missing[:3]} unknown={extra[:3]}")
        for k, s in expected.items():
            if tuple(self.params[k].shape) != tuple(s):
                raise ValueError(f"{k}: shape {self.params[k].shape} != {s}")
        self._ssm_views = [self._make_ssm_view(i) for i in range(self.config.n_blocks)]

    def _make_ssm_view(self, i: int) -> SsmParams:
        pre = f"blocks.{i}.ssm."
        return SsmParams(**{k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)})

    def ssm_params(self, i: int) -> SsmParams:
        return self._ssm_views[i]

    def copy(self) -> "Encoder":
        return Encoder(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- state -----------------------------------------------------------

    def reset(self, batch: tuple = ()) -> EncoderState:
        """Zero state; ``batch`` adds leading dims for stepping independent streams together."""
        return EncoderState([SsmState.zeros(v, batch) for v in self._ssm_views], 0)

    # -- pieces ----------------------------------------------------------

    def _check_patches(self, patches):
        cfg = self.config
        patches = np.asarray(patches, dtype=float)
        if patches.shape[-2:] != (cfg.n_channels, cfg.patch_samples):
            raise ValueError(
                f"patch shape {patches.shape[-2:]} != ({cfg.n_channels}, {cfg.patch_samples})")
        return patches

    def embed_reference(self, patches):
        """Channel embedder evaluated literally: per-channel features, then cross-attention."""
        cfg, p = self.config, self.params
        patches = self._check_patches(patches)
        feats = patches @ p["embed.W_patch"] + p["embed.b_patch"] + p["embed.chan"]
        out = cross_attention(p["embed.queries"], feats, feats, cfg.embed_heads)
        out = out.reshape(*out.shape[:-2], cfg.n_queries * cfg.d_model)
        return out @ p["embed.W_out"] + p["embed.b_out"]

    def embed(self, patches):
        """Channel embedder for ``(..., C, P)`` patches, returns ``(..., d_model)``.

        Same function as :meth:`embed_reference`. Keys and values are affine
        in the raw patch, so queries are pushed through the patch projection
        and the ``C x d_model`` feature matrix is never formed.
        """
        cfg, p = self.config, self.params
        patches = self._check_patches(patches)
        H, Q, P, C = cfg.embed_heads, cfg.n_queries, cfg.patch_samples, cfg.n_channels
        e = cfg.d_model // H
        W = p["embed.W_patch"].reshape(P, H, e).transpose(1, 0, 2)  # (H, P, e)
        k = (p["embed.b_patch"] + p["embed.chan"]).reshape(C, H, e).transpose(1, 0, 2)  # (H, C, e)
        q = p["embed.queries"].reshape(Q, H, e).transpose(1, 2, 0)  # (H, e, Q)
        x = patches[..., None, :, :]  # (..., 1, C, P)
        scores = (x @ (W @ q) + k @ q) / math.sqrt(e)  # (..., H, C, Q)
        w = softmax(np.swapaxes(scores, -1, -2), axis=-1)  # (..., H, Q, C)
        out = (w @ x) @ W + w @ k  # (..., H, Q, e)
        out = np.swapaxes(out, -2, -3).reshape(*patches.shape[:-2], Q * cfg.d_model)
        return out @ p["embed.W_out"] + p["embed.b_out"]

    def position(self, tau):
        return self.params["pos"][np.mod(tau, self.config.pos_period)]

    def _ffn(self, i: int, z):
        p = self.params
        return swiglu_ffn(z, p[f"blocks.{i}.ffn.W_gate"], p[f"blocks.{i}.ffn.W_up"],
                          p[f"blocks.{i}.ffn.W_down"])

    def _norm(self, name: str, z):
        return rms_norm(z, self.params[name], self.config.norm_eps)

    # -- execution -------------------------------------------------------

    def encode_step(self, state: EncoderState, patch):
        """One streaming step. Returns ``(hidden, new_state)``.

        ``patch`` is ``(C, P)`` or ``(B, C, P)`` with a state from ``reset((B,))``.
        """
        cfg = self.config
        z = self.embed(patch) + self.position(state.tau)
        new_blocks = []
        for i in range(cfg.n_blocks):
            y, s = ssm_step(self._ssm_views[i], state.blocks[i], self._norm(f"blocks.{i}.norm1", z),
                            cfg.mode)
            new_blocks.append(s)
            z = z + y
            z = z + self._ffn(i, self._norm(f"blocks.{i}.norm2", z))
        return z, EncoderState(new_blocks, state.tau + 1)

    def encode_sequence(self, patches, state: EncoderState | None = None):
        """Parallel form over ``(..., G, C, P)`` patches. Returns ``(hiddens (..., G, d), final_state)``.

        Leading dimensions are independent sequences, matched by a state from
        ``reset(batch)``.
        """
        cfg = self.config
        patches = np.asarray(patches, dtype=float)
        if patches.ndim < 3 or patches.shape[-3] == 0:
            raise ValueError("encode_sequence expects a non-empty (..., G, C, P) array")
        if state is None:
            state = self.reset(patches.shape[:-3])
        G = patches.shape[-3]
        z = self.embed(patches) + self.position(state.tau + np.arange(G))
        new_blocks = []
        for i in range(cfg.n_blocks):
            y, s = ssm_scan(self._ssm_views[i], self._norm(f"blocks.{i}.norm1", z), cfg.mode,
                            state.blocks[i], cfg.scan_chunk)
            new_blocks.append(s)
            z = z + y
            z = z + self._ffn(i, self._norm(f"blocks.{i}.norm2", z))
        return z, EncoderState(new_blocks, state.tau + G)

    def logits(self, hidden):
        hidden = np.asarray(hidden, dtype=float)
        return hidden @ self.params["head.W"] + self.params["head.b"]

    def classify(self, hidden):
        return probabilities(self.logits(hidden))

    # -- bookkeeping -----------------------------------------------------

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def param_breakdown(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for k, v in self.params.items():
            parts = k.split(".")
            if parts[0] == "blocks":
                g = "ssm" if parts[2] == "ssm" else ("ffn" if parts[2] == "ffn" else "norms")
            elif parts[0] in ("embed", "pos"):
                g = "embedder" if parts[0] == "embed" else "positions"
            else:
                g = "head"
            groups[g] = groups.get(g, 0) + v.size
        return groups


def probabilities(logits):
    """Sigmoid for a single output column, softmax otherwise."""
    logits = np.asarray(logits, dtype=float)
    if logits.shape[-1] == 1:
        return sigmoid(logits)
    return softmax(logits, axis=-1)


def classify(encoder: Encoder, hidden):
    return encoder.classify(hidden)


def embed_patch(encoder: Encoder, patch):
    return encoder.embed(patch)


def encode_step(encoder: Encoder, state: EncoderState, patch):
    return encoder.encode_step(state, patch)


def encode_sequence(encoder: Encoder, patches, state: EncoderState | None = None):
    return encoder.encode_sequence(patches, state)
