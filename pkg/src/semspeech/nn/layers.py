"""Transformer building blocks: linear, embeddings, multi-head attention,
pre-norm encoder/decoder stacks, sinusoidal positions, attention pooling.

Parameters are registered into a ParamStore under hierarchical names at init
time; apply functions are pure given the store contents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from .optim import ParamStore
from .tensor import Tensor, dropout, gelu, layer_norm, softmax, take_rows

NEG_INF = -1e9


@dataclass
class EncoderConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    dropout_rate: float = 0.1
    max_positions: int = 1024

    def validate(self) -> None:
        for name in ("layers", "model_dim", "heads", "ff_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1", field=name)
        if self.model_dim % self.heads != 0:
            raise ValidationError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}",
                field="heads",
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)", field="dropout_rate")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "model_dim": self.model_dim,
            "heads": self.heads,
            "ff_dim": self.ff_dim,
            "dropout_rate": self.dropout_rate,
            "max_positions": self.max_positions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


# -- initialization ----------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(
    store: ParamStore,
    rng: np.random.Generator,
    name: str,
    d_in: int,
    d_out: int,
    scale: float = 1.0,
):
    store.add(f"{name}.w", Tensor(scale * xavier_uniform(rng, d_in, d_out)))
    store.add(f"{name}.b", Tensor(np.zeros(d_out)))


def init_layer_norm(store: ParamStore, name: str, dim: int):
    store.add(f"{name}.g", Tensor(np.ones(dim)))
    store.add(f"{name}.b", Tensor(np.zeros(dim)))


def init_embedding(store: ParamStore, rng: np.random.Generator, name: str, vocab: int, dim: int):
    store.add(name, Tensor(0.02 * rng.standard_normal((vocab, dim))))


def init_attention(store: ParamStore, rng: np.random.Generator, name: str, dim: int):
    for proj in ("q", "k", "v", "o"):
        init_linear(store, rng, f"{name}.{proj}", dim, dim)


def init_block(
    store: ParamStore,
    rng: np.random.Generator,
    name: str,
    cfg: EncoderConfig,
    cross_attention: bool = False,
):
    init_layer_norm(store, f"{name}.ln1", cfg.model_dim)
    init_attention(store, rng, f"{name}.attn", cfg.model_dim)
    if cross_attention:
        init_layer_norm(store, f"{name}.lnx", cfg.model_dim)
        init_attention(store, rng, f"{name}.xattn", cfg.model_dim)
    init_layer_norm(store, f"{name}.ln2", cfg.model_dim)
    init_linear(store, rng, f"{name}.ff1", cfg.model_dim, cfg.ff_dim)
    init_linear(store, rng, f"{name}.ff2", cfg.ff_dim, cfg.model_dim)


# -- forward pieces ----------------------------------------------------------

def apply_linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return x @ store[f"{name}.w"] + store[f"{name}.b"]


def apply_layer_norm(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None].astype(np.float64)
    half = (dim + 1) // 2
    i = np.arange(half)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : dim // 2])
    return out


def causal_mask(n: int) -> np.ndarray:
    """(1, 1, n, n) additive mask hiding future positions."""
    m = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), NEG_INF, 0.0)
    return m[None, None, :, :]


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, 1, 1, T) additive mask hiding invalid key positions."""
    return np.where(valid[:, None, None, :], 0.0, NEG_INF)


def apply_attention(
    store: ParamStore,
    name: str,
    q_in: Tensor,
    kv_in: Tensor,
    heads: int,
    mask: np.ndarray | None = None,
) -> Tensor:
    b, t, d = q_in.shape
    s = kv_in.shape[1]
    dh = d // heads
    q = apply_linear(store, f"{name}.q", q_in).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
    k = apply_linear(store, f"{name}.k", kv_in).reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    v = apply_linear(store, f"{name}.v", kv_in).reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor(mask)
    attn = softmax(scores, axis=-1)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return apply_linear(store, f"{name}.o", out)


def apply_ffn(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return apply_linear(store, f"{name}.ff2", gelu(apply_linear(store, f"{name}.ff1", x)))


def apply_block(
    store: ParamStore,
    name: str,
    x: Tensor,
    cfg: EncoderConfig,
    self_mask: np.ndarray | None = None,
    memory: Tensor | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    def drop(t: Tensor) -> Tensor:
        if train and cfg.dropout_rate > 0.0:
            return dropout(t, cfg.dropout_rate, rng)
        return t

    h = apply_layer_norm(store, f"{name}.ln1", x)
    x = x + drop(apply_attention(store, f"{name}.attn", h, h, cfg.heads, self_mask))
    if memory is not None:
        h = apply_layer_norm(store, f"{name}.lnx", x)
        x = x + drop(apply_attention(store, f"{name}.xattn", h, memory, cfg.heads))
    h = apply_layer_norm(store, f"{name}.ln2", x)
    x = x + drop(apply_ffn(store, name, h))
    return x


# -- encoder over continuous features -----------------------------------------

def init_feature_encoder(
    store: ParamStore,
    rng: np.random.Generator,
    cfg: EncoderConfig,
    d_in: int,
    prefix: str = "enc",
):
    cfg.validate()
    init_linear(store, rng, f"{prefix}.in", d_in, cfg.model_dim)
    for layer in range(cfg.layers):
        init_block(store, rng, f"{prefix}.block{layer}", cfg)
    init_layer_norm(store, f"{prefix}.ln_f", cfg.model_dim)


def transformer_encode(
    x: Tensor,
    store: ParamStore,
    cfg: EncoderConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    valid: np.ndarray | None = None,
    prefix: str = "enc",
) -> Tensor:
    """Project frames, add positions, run pre-norm blocks; (B,T,d) or (T,d)."""
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    b, t, _ = x.shape
    if t > cfg.max_positions:
        raise ValidationError(
            f"sequence length {t} exceeds max_positions {cfg.max_positions}",
            field="max_positions",
        )
    if t < 1:
        raise ValidationError("empty sequence", field="x")
    if train_mode and cfg.dropout_rate > 0.0 and rng is None:
        raise ValidationError("train_mode with dropout requires an rng", field="rng")

    h = apply_linear(store, f"{prefix}.in", x) + Tensor(sinusoidal_positions(t, cfg.model_dim))
    if train_mode and cfg.dropout_rate > 0.0:
        h = dropout(h, cfg.dropout_rate, rng)
    mask = padding_mask(valid) if valid is not None else None
    for layer in range(cfg.layers):
        h = apply_block(
            store, f"{prefix}.block{layer}", h, cfg, self_mask=mask, train=train_mode, rng=rng
        )
    h = apply_layer_norm(store, f"{prefix}.ln_f", h)
    return h.reshape(t, cfg.model_dim) if single else h


def attention_pool(h: Tensor, w: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """z = Softmax(w.H^T).H over the time axis; (T,d)->(d,) or (B,T,d)->(B,d)."""
    single = h.ndim == 2
    if single:
        h = h.reshape(1, *h.shape)
    b, t, d = h.shape
    if t < 1:
        raise ValidationError("cannot pool an empty sequence", field="h")
    if w.shape != (d,):
        raise ValidationError(f"pool weight shape {w.shape} does not match dim {d}", field="w")
    scores = (h @ w.reshape(d, 1)).reshape(b, t)
    if valid is not None:
        scores = scores + Tensor(np.where(valid, 0.0, NEG_INF))
    weights = softmax(scores, axis=-1)
    z = (weights.reshape(b, 1, t) @ h).reshape(b, d)
    return z.reshape(d) if single else z


# -- autoregressive decoder over tokens ---------------------------------------

def init_token_decoder(
    store: ParamStore,
    rng: np.random.Generator,
    cfg: EncoderConfig,
    vocab: int,
    prefix: str = "dec",
    condition_mode: str = "memory",
):
    cfg.validate()
    if condition_mode not in ("memory", "add"):
        raise ValidationError(
            f"condition_mode must be 'memory' or 'add', got {condition_mode!r}",
            field="condition_mode",
        )
    init_embedding(store, rng, f"{prefix}.tok", vocab, cfg.model_dim)
    for layer in range(cfg.layers):
        init_block(
            store, rng, f"{prefix}.block{layer}", cfg, cross_attention=condition_mode == "memory"
        )
    init_layer_norm(store, f"{prefix}.ln_f", cfg.model_dim)
    # small output head keeps initial logits near uniform (loss starts at ~ln V)
    init_linear(store, rng, f"{prefix}.out", cfg.model_dim, vocab, scale=0.1)


def decode_tokens(
    tokens: np.ndarray,
    z: Tensor,
    store: ParamStore,
    cfg: EncoderConfig,
    vocab: int,
    prefix: str = "dec",
    condition_mode: str = "memory",
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced forward: next-token logits at every prefix position.

    tokens: (B, S) or (S,) int array; z: (B, d) or (d,). The conditioning
    vector is either the sole cross-attention memory slot or added to every
    input embedding.
    """
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
        z = z.reshape(1, *z.shape)
    b, s = tokens.shape
    if s < 1:
        raise ValidationError("empty token prefix", field="tokens")
    if s > cfg.max_positions:
        raise ValidationError(
            f"sequence length {s} exceeds max_positions {cfg.max_positions}",
            field="max_positions",
        )
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise ValidationError(
            f"token id outside vocabulary of size {vocab}", field="tokens"
        )
    if train_mode and cfg.dropout_rate > 0.0 and rng is None:
        raise ValidationError("train_mode with dropout requires an rng", field="rng")

    h = take_rows(store[f"{prefix}.tok"], tokens) + Tensor(
        sinusoidal_positions(s, cfg.model_dim)
    )
    memory = None
    if condition_mode == "add":
        h = h + z.reshape(b, 1, z.shape[-1])
    else:
        memory = z.reshape(b, 1, z.shape[-1])
    if train_mode and cfg.dropout_rate > 0.0:
        h = dropout(h, cfg.dropout_rate, rng)
    mask = causal_mask(s)
    for layer in range(cfg.layers):
        h = apply_block(
            store,
            f"{prefix}.block{layer}",
            h,
            cfg,
            self_mask=mask,
            memory=memory,
            train=train_mode,
            rng=rng,
        )
    h = apply_layer_norm(store, f"{prefix}.ln_f", h)
    logits = apply_linear(store, f"{prefix}.out", h)
    return logits.reshape(s, vocab) if single else logits


def decoder_step(
    prev_tokens: np.ndarray,
    z: Tensor,
    store: ParamStore,
    cfg: EncoderConfig,
    vocab: int,
    prefix: str = "dec",
    condition_mode: str = "memory",
) -> Tensor:
    """Next-token logits given the prefix; eval mode."""
    logits = decode_tokens(
        np.asarray(prev_tokens), z, store, cfg, vocab, prefix=prefix,
        condition_mode=condition_mode,
    )
    return logits[-1]
