"""Position encodings: RoPE (multiplicative), ALiBi (additive) and absolute tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _result, embedding

PE_KINDS = ("none", "rope", "alibi", "ape-learn", "ape-sin")


@dataclass
class PEConfig:
    kind: str = "rope"
    rope_base: float = 10000.0
    alibi_slopes: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in PE_KINDS:
            raise ValueError(f"pe kind must be one of {PE_KINDS}, got {self.kind!r}")

    def validate(self, n_heads: int) -> None:
        if self.kind == "alibi" and len(self.alibi_slopes) != n_heads:
            raise ValueError(f"need {n_heads} alibi slopes, got {len(self.alibi_slopes)}")


def rope_angles(positions, dim: int, base: float = 10000.0) -> np.ndarray:
    """``(len(positions), dim // 2)`` rotation angles ``pos * base**(-2k/dim)``."""
    if dim % 2:
        raise ValueError(f"RoPE needs an even dimension, got {dim}")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=float) / dim)
    return np.asarray(positions, dtype=float)[:, None] * inv_freq[None, :]


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(x, positions, base: float = 10000.0):
    """Rotate consecutive pairs ``(x[2k], x[2k+1])`` by ``pos * base**(-2k/dim)``.

    ``x`` has the sequence on its second-to-last axis. Works on Tensors
    (differentiable) and on plain arrays.
    """
    dim = x.shape[-1]
    ang = rope_angles(positions, dim, base)
    if ang.shape[0] != x.shape[-2]:
        raise ValueError(f"{ang.shape[0]} positions for a sequence of {x.shape[-2]}")
    cos, sin = np.cos(ang), np.sin(ang)
    if not isinstance(x, Tensor):
        return _rotate(np.asarray(x, dtype=float), cos, sin)
    # the inverse rotation is the transpose, so the gradient rotates back
    return _result(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),), "rope")


def alibi_slopes(n_heads: int) -> list[float]:
    return [2.0 ** (-8.0 * h / n_heads) for h in range(1, n_heads + 1)]


def alibi_bias(n: int, slope: float, rows=None, cols=None) -> np.ndarray:
    """``-slope * (i - j)`` for ``j <= i``; zero above the diagonal."""
    r = np.arange(n) if rows is None else np.asarray(rows)
    c = np.arange(n) if cols is None else np.asarray(cols)
    dist = r[:, None] - c[None, :]
    return np.where(dist >= 0, -slope * dist, 0.0)


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    """Row ``p``: ``[sin(p w_0), cos(p w_0), sin(p w_1), ...]`` with ``w_k = 10000**(-2k/dim)``."""
    ang = rope_angles(np.arange(n_positions), dim + (dim % 2))
    table = np.empty((n_positions, dim + (dim % 2)))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table[:, :dim]


def ape_embed(positions, table):
    """Rows of an absolute position table (learnable Tensor or fixed array)."""
    positions = np.asarray(positions, dtype=np.int64)
    if isinstance(table, Tensor):
        return embedding(table, positions)
    table = np.asarray(table)
    if positions.size and positions.max() >= table.shape[0]:
        raise IndexError(f"position {positions.max()} beyond table of {table.shape[0]}")
    return Tensor(table[positions])
