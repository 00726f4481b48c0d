"""Incremental decoding with a KV cache.

For a StableMask model each new row is softmaxed together with one suffix
score ``tau`` standing in for the pseudo columns the row would see at the
training length, so earlier rows never need recomputing. Past the training
length ``tau = -n * gamma``. An optional sliding window keeps only the most
recent ``W`` keys/values, with no initial-token retention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .masking import build_infer_row, suffix_tau
from .position import rope_rotate
from .tensor import Tensor, add, matmul, no_grad, rmsnorm, softmax_np


@dataclass
class KVCache:
    """Per-layer keys (un-rotated) and values, shape ``(H, m, dh)`` each."""

    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    length: int = 0
    window: int | None = None

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")

    @classmethod
    def empty(cls, model, window: int | None = None) -> "KVCache":
        H, dh = model.config.n_heads, model.config.head_dim
        z = [np.zeros((H, 0, dh)) for _ in range(model.config.n_layers)]
        return cls(keys=z, values=[a.copy() for a in z], window=window)

    @property
    def stored(self) -> int:
        return len(self.positions)

    def check(self, model) -> None:
        if len(self.keys) != model.config.n_layers or len(self.values) != len(self.keys):
            raise RuntimeError("cache layer count does not match the model")
        for k, v in zip(self.keys, self.values):
            if k.shape[1] != self.stored or v.shape[1] != self.stored:
                raise RuntimeError("cache corrupted: key/value length mismatch")
        expected = self.length if self.window is None else min(self.length, self.window)
        if self.stored != expected:
            raise RuntimeError(f"cache corrupted: holds {self.stored} entries, expected {expected}")

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.keys + self.values)


@dataclass
class DecodeConfig:
    max_new_tokens: int = 32
    temperature: float | None = None
    window: int | None = None
    seed: int = 0
    reindex_rope: bool = False

    def __post_init__(self):
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")


def _attend_row(model, l, q, keys, vals, key_pos, q_pos, n):
    """Attention output ``(H, dh)`` for one query given the visible keys."""
    cfg, pe, mask = model.config, model.pe, model.mask
    if pe.kind == "rope":
        q = rope_rotate(q[:, None, :], [q_pos], pe.rope_base)[:, 0, :]
        keys = rope_rotate(keys, key_pos, pe.rope_base)
    scores = np.einsum("hd,hmd->hm", q, keys) / math.sqrt(cfg.head_dim)
    if pe.kind == "alibi":
        dist = q_pos - np.asarray(key_pos, dtype=float)
        scores = scores - np.asarray(pe.alibi_slopes)[:, None] * dist[None, :]
    if mask is None:
        w = softmax_np(scores)
    else:
        m = scores.shape[1]
        w = np.stack([build_infer_row(scores[h], m, mask.max_train_len, g,
                                      tau=suffix_tau(n, mask.max_train_len, g))[0]
                      for h, g in enumerate(mask.gamma_per_head)])
    return np.einsum("hm,hmd->hd", w, vals)


def decode_step(model, cache: KVCache, token: int, reindex_rope: bool = False):
    """Feed one token; returns ``(logits, cache)`` with the cache updated in place."""
    cache.check(model)
    cfg = model.config
    H, dh = cfg.n_heads, cfg.head_dim
    pos = cache.length
    n = pos + 1
    with no_grad():
        x = model.embed(np.array([token]), np.array([pos]))
        positions = np.append(cache.positions, pos)
        if cache.window is not None and len(positions) > cache.window:
            positions = positions[-cache.window:]
        for l in range(cfg.n_layers):
            w = model.attn_weights(l)
            h = rmsnorm(x, model.params[f"layers.{l}.attn_norm"], cfg.norm_eps).data[0]
            q = (h @ w.wq.data).reshape(H, dh)
            k = (h @ w.wk.data).reshape(H, 1, dh)
            v = (h @ w.wv.data).reshape(H, 1, dh)
            keys = np.concatenate([cache.keys[l], k], axis=1)
            vals = np.concatenate([cache.values[l], v], axis=1)
            if cache.window is not None and keys.shape[1] > cache.window:
                keys, vals = keys[:, -cache.window:], vals[:, -cache.window:]
            cache.keys[l], cache.values[l] = keys, vals
            if reindex_rope:
                key_pos, q_pos = np.arange(len(positions)), len(positions) - 1
            else:
                key_pos, q_pos = positions, pos
            o = _attend_row(model, l, q, keys, vals, key_pos, q_pos, n)
            x = add(x, matmul(Tensor(o.reshape(1, H * dh)), w.wo))
            x = add(x, model.ffn(l, x))
        logits = model.head(x).data[0]
    cache.positions = positions
    cache.length = n
    return logits, cache


def prefill(model, tokens, window: int | None = None, reindex_rope: bool = False):
    """Decode ``tokens`` one at a time; returns ``(per-position logits, cache)``."""
    cache = KVCache.empty(model, window)
    out = []
    for t in tokens:
        logits, cache = decode_step(model, cache, int(t), reindex_rope)
        out.append(logits)
    V = model.config.vocab_size
    return (np.stack(out) if out else np.zeros((0, V))), cache


def generate(model, prompt, cfg: DecodeConfig) -> list[int]:
    """Greedy or temperature sampling after the prompt; returns prompt + new tokens."""
    tokens = [int(t) for t in prompt]
    if not tokens:
        raise ValueError("prompt must contain at least one token")
    if cfg.max_new_tokens == 0:
        return tokens
    rng = np.random.default_rng(cfg.seed)
    logits_seq, cache = prefill(model, tokens, cfg.window, cfg.reindex_rope)
    logits = logits_seq[-1]
    for _ in range(cfg.max_new_tokens):
        nxt = sample_token(logits, cfg.temperature, rng)
        tokens.append(nxt)
        logits, cache = decode_step(model, cache, nxt, cfg.reindex_rope)
    return tokens


def sample_token(logits, temperature: float | None, rng) -> int:
    if temperature is None:
        return int(np.argmax(logits))
    p = softmax_np(np.asarray(logits, dtype=float) / temperature)
    return int(rng.choice(len(p), p=p))


def windowed_ppl(model, sequence, window: int, reindex_rope: bool = False) -> np.ndarray:
    """Per-token negative log-likelihood under sliding-window incremental decoding.

    Entry ``t`` scores ``sequence[t + 1]`` given the (windowed) prefix up to ``t``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    seq = np.asarray(sequence, dtype=np.int64)
    logits, _ = prefill(model, seq[:-1], window, reindex_rope)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[np.arange(len(seq) - 1), seq[1:]]
