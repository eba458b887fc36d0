"""Self-attentive EEND encoder stack with optional outer residuals and per-block heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .features import FEAT_DIM
from .tensor import Tensor

AUX_MODES = ("none", "shared", "indiv")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    P: int = 4
    D: int = 256
    H: int = 4
    ffn_units: int = 1024
    S: int = 2
    residual: bool = False
    aux_mode: str = "none"
    lam: float = 1.0
    F: int = FEAT_DIM
    dropout: float = 0.1
    shared_head: bool = True

    def __post_init__(self):
        if self.P < 1:
            raise ConfigError(f"P must be >= 1, got {self.P}")
        if self.H < 1 or self.D % self.H:
            raise ConfigError(f"D={self.D} is not divisible by H={self.H}")
        if self.S < 2:
            raise ConfigError(f"S must be >= 2, got {self.S}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.aux_mode not in AUX_MODES:
            raise ConfigError(f"aux_mode must be one of {AUX_MODES}, got {self.aux_mode!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "base": dict(P=4, D=256, H=4, ffn_units=1024),
    "deep": dict(P=8, D=256, H=4, ffn_units=1024),
    "large": dict(P=8, D=512, H=8, ffn_units=1024),
    "small": dict(P=4, D=64, H=4, ffn_units=256),
}

VARIANTS = {
    "sa": dict(residual=False, aux_mode="none"),
    "rx": dict(residual=True, aux_mode="indiv"),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def _xavier(rng, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_params(config: ModelConfig, seed=0, dtype=None) -> dict[str, Tensor]:
    """Xavier-uniform linear maps, zero biases, unit layer-norm gains."""
    dtype = dtype or tn.default_dtype()
    rng = np.random.default_rng(seed)
    D, ff = config.D, config.ffn_units
    p: dict[str, np.ndarray] = {}

    def linear(name, n_in, n_out):
        p[f"{name}.w"] = _xavier(rng, n_in, n_out, dtype)
        p[f"{name}.b"] = np.zeros(n_out, dtype)

    def norm(name, n):
        p[f"{name}.g"] = np.ones(n, dtype)
        p[f"{name}.b"] = np.zeros(n, dtype)

    linear("embed.linear", config.F, D)
    norm("embed.norm", D)
    for i in range(1, config.P + 1):
        pre = f"blocks.{i}"
        norm(f"{pre}.norm1", D)
        for proj in ("q", "k", "v", "o"):
            linear(f"{pre}.attn.{proj}", D, D)
        norm(f"{pre}.norm2", D)
        linear(f"{pre}.ffn1", D, ff)
        linear(f"{pre}.ffn2", ff, D)
    if config.shared_head:
        linear("head", D, config.S)
    else:
        for i in range(1, config.P + 1):
            linear(f"heads.{i}", D, config.S)
    return {k: tn.parameter(v, name=k) for k, v in p.items()}


def head_name(config: ModelConfig, p: int) -> str:
    return "head" if config.shared_head else f"heads.{p}"


def _linear(x: Tensor, params, name) -> Tensor:
    return tn.add_bias(tn.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _norm(x: Tensor, params, name) -> Tensor:
    return tn.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _dropout(x: Tensor, rate, rng) -> Tensor:
    if rng is None or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return tn.mul_const(x, keep)


def embed_input(X: Tensor, params) -> Tensor:
    w = params["embed.linear.w"]
    if X.shape[-1] != w.shape[0]:
        raise tn.DimensionError(f"input rows have width {X.shape[-1]}, model expects {w.shape[0]}")
    return _norm(_linear(X, params, "embed.linear"), params, "embed.norm")


def self_attention(x: Tensor, params, prefix, H, return_weights=False):
    """Multi-head scaled dot-product attention over all frames of ``x`` (B x T x D)."""
    B, T, D = x.shape
    dk = D // H

    def heads(t):
        return tn.transpose(tn.reshape(t, (B, T, H, dk)), (0, 2, 1, 3))

    q = heads(_linear(x, params, f"{prefix}.q"))
    k = heads(_linear(x, params, f"{prefix}.k"))
    v = heads(_linear(x, params, f"{prefix}.v"))
    scores = tn.scale(tn.matmul(q, tn.swap_last(k)), 1.0 / math.sqrt(dk))
    att = tn.softmax_rows(scores)
    ctx = tn.reshape(tn.transpose(tn.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
    out = _linear(ctx, params, f"{prefix}.o")
    return (out, att) if return_weights else out


def encoder_block(E: Tensor, params, p: int, H: int, dropout=0.0, rng=None) -> Tensor:
    """Pre-norm transformer block: E + MHSA(Norm(E)), then + FFN(Norm(.))."""
    pre = f"blocks.{p}"
    squeeze = E.data.ndim == 2
    if squeeze:
        E = tn.reshape(E, (1,) + E.shape)
    a = self_attention(_norm(E, params, f"{pre}.norm1"), params, f"{pre}.attn", H)
    E1 = tn.add(E, _dropout(a, dropout, rng))
    h = tn.relu(_linear(_norm(E1, params, f"{pre}.norm2"), params, f"{pre}.ffn1"))
    f = _linear(h, params, f"{pre}.ffn2")
    out = tn.add(E1, _dropout(f, dropout, rng))
    if squeeze:
        out = tn.reshape(out, out.shape[1:])
    return out


def residual_block(E: Tensor, params, p: int, H: int, dropout=0.0, rng=None) -> Tensor:
    return tn.add(E, encoder_block(E, params, p, H, dropout, rng))


def head_logits(E: Tensor, params, name="head") -> Tensor:
    return _linear(E, params, name)


def head(E: Tensor, params, name="head") -> Tensor:
    return tn.sigmoid(head_logits(E, params, name))


class Output(NamedTuple):
    embeddings: list  # E^0 .. E^P
    logits: dict  # block index -> logits tensor
    posteriors: dict  # block index -> posterior tensor


def run(X, config: ModelConfig, params, want_all_blocks=False, train=False, rng=None) -> Output:
    """Chain embedding, P blocks and the heads.

    ``X`` is T x F or B x T x F.  Heads for blocks below P run only when an
    auxiliary loss is configured or ``want_all_blocks`` is set.  Dropout is
    active only when ``train`` is true and ``rng`` is given.
    """
    if not isinstance(X, Tensor):
        X = Tensor(X, dtype=params["embed.linear.w"].data.dtype)
    squeeze = X.data.ndim == 2
    if squeeze:
        X = tn.reshape(X, (1,) + X.shape)
    drop = config.dropout if train else 0.0
    block = residual_block if config.residual else encoder_block
    E = embed_input(X, params)
    embeddings = [E]
    for p in range(1, config.P + 1):
        E = block(E, params, p, config.H, drop, rng if train else None)
        embeddings.append(E)
    wanted = range(1, config.P + 1) if (want_all_blocks or config.aux_mode != "none") else [config.P]
    logits, posts = {}, {}
    for p in wanted:
        z = head_logits(embeddings[p], params, head_name(config, p))
        logits[p] = z
        posts[p] = tn.sigmoid(z)
    if squeeze:
        embeddings = [tn.reshape(e, e.shape[1:]) for e in embeddings]
        logits = {p: tn.reshape(z, z.shape[1:]) for p, z in logits.items()}
        posts = {p: tn.reshape(y, y.shape[1:]) for p, y in posts.items()}
    return Output(embeddings, logits, posts)


def forward(X, config: ModelConfig, params, want_all_blocks=False):
    """Evaluation-mode forward pass; returns (embeddings E^0..E^P, {p: posterior})."""
    out = run(X, config, params, want_all_blocks=want_all_blocks)
    return out.embeddings, out.posteriors


def with_variant(config: ModelConfig, variant: str) -> ModelConfig:
    return replace(config, **VARIANTS[variant])
