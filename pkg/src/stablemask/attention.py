"""Multi-head causal self-attention with a pluggable mask.

This is the dense O(n^2) path: every probability matrix is materialised, so
it doubles as the reference the blocked kernel and the KV-cache decoder are
checked against.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .masking import MaskSpec, Mode, causal_softmax, keep_matrix, stacked_pseudo
from .position import PEConfig, alibi_bias, rope_rotate
from .tensor import Tensor, add, matmul, mul, reshape, scale, softmax_rows, swap_last, transpose


@dataclass
class AttnWeights:
    """Projections for all heads, row-vector convention (``Q = X @ wq``).

    Head ``h`` owns columns ``h*dh:(h+1)*dh`` of ``wq``/``wk``/``wv`` and the
    same rows of ``wo``.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def head_dim(self, n_heads: int) -> int:
        inner = self.wq.shape[1]
        if inner % n_heads:
            raise ValueError(f"projection width {inner} not divisible by {n_heads} heads")
        return inner // n_heads

    def head(self, h: int, n_heads: int) -> dict:
        """Per-head slices (plain arrays) ``W_Q, W_K, W_V: d -> dh`` and ``W_O: dh -> d``."""
        dh = self.head_dim(n_heads)
        sl = slice(h * dh, (h + 1) * dh)
        return {"wq": self.wq.data[:, sl], "wk": self.wk.data[:, sl],
                "wv": self.wv.data[:, sl], "wo": self.wo.data[sl, :]}


@dataclass
class AttnTrace:
    """Post-softmax attention and per-row real mass for one layer.

    ``probs`` has shape ``(..., H, n, n)``; ``alpha`` is ``probs.sum(-1)``.
    """

    probs: np.ndarray
    alpha: np.ndarray
    logits: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        out = {"probs": self.probs.tolist(), "alpha": self.alpha.tolist()}
        if self.logits is not None:
            out["logits"] = np.where(np.isfinite(self.logits), self.logits, None).tolist()
        return out

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    def save_alpha_csv(self, path) -> None:
        alpha = self.alpha.reshape(-1, self.alpha.shape[-1])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["head"] + [f"pos{i + 1}" for i in range(alpha.shape[-1])])
            for h, row in enumerate(alpha):
                wr.writerow([h] + [repr(float(v)) for v in row])


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, width = x.shape
    x = reshape(x, tuple(lead) + (n, n_heads, width // n_heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return transpose(x, tuple(axes))


def merge_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = transpose(x, tuple(axes))
    *lead, n, h, dh = x.shape
    return reshape(x, tuple(lead) + (n, h * dh))


def attention_scores(q: Tensor, k: Tensor, pe: PEConfig | None, positions) -> Tensor:
    """Scaled logits ``QK^T / sqrt(dh)`` with RoPE or ALiBi folded in."""
    n, dh = q.shape[-2], q.shape[-1]
    if pe is not None and pe.kind == "rope":
        q = rope_rotate(q, positions, pe.rope_base)
        k = rope_rotate(k, positions, pe.rope_base)
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(dh))
    if pe is not None and pe.kind == "alibi":
        bias = np.stack([alibi_bias(n, s, rows=positions, cols=positions) for s in pe.alibi_slopes])
        scores = add(scores, bias)
    return scores


def masked_softmax(scores: Tensor, mask: MaskSpec | None) -> Tensor:
    """Vanilla causal softmax when ``mask`` is None, else ``softmax(A*C + P) * C``."""
    if mask is None:
        return causal_softmax(scores)
    n = scores.shape[-1]
    C = keep_matrix(n)
    P = stacked_pseudo(n, mask)
    return mul(softmax_rows(add(mul(scores, C), P)), C)


def mha_forward(x: Tensor, weights: AttnWeights, n_heads: int, pe: PEConfig | None = None,
                mask: MaskSpec | None = None, positions=None, capture: bool = False,
                keep_logits: bool = False):
    """Self-attention over ``x`` of shape ``(..., n, d)``.

    Returns ``(y, trace)``; ``trace`` is None unless ``capture`` is set.
    """
    n = x.shape[-2]
    if mask is not None:
        if mask.n_heads != n_heads:
            raise ValueError(f"mask has {mask.n_heads} gammas for {n_heads} heads")
        if mask.mode is Mode.TRAIN and n > mask.max_train_len:
            raise ValueError(f"sequence length {n} exceeds training length {mask.max_train_len}")
    if positions is None:
        positions = np.arange(n)
    q = split_heads(matmul(x, weights.wq), n_heads)
    k = split_heads(matmul(x, weights.wk), n_heads)
    v = split_heads(matmul(x, weights.wv), n_heads)
    scores = attention_scores(q, k, pe, positions)
    probs = masked_softmax(scores, mask)
    y = matmul(merge_heads(matmul(probs, v)), weights.wo)
    trace = None
    if capture:
        trace = AttnTrace(probs=probs.data.copy(), alpha=probs.data.sum(axis=-1),
                          logits=scores.data.copy() if keep_logits else None)
    return y, trace
