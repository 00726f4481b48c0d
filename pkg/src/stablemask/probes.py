"""Attention diagnostics: disproportional-attention scan, mask-ratio curve,
first-token trend and CSV dumps of attention matrices."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .tasks import mutual_info_ratio
from .tensor import no_grad

DEFAULT_EPSILON = 0.05


def _traces(model, tokens):
    with no_grad():
        _, traces = model.forward(np.asarray(tokens, dtype=np.int64), capture=True)
    return traces


@dataclass
class DAReport:
    """Per layer and head: fraction of inputs with any flagged ``(i, n)`` pair,
    per-pair flag rates, mean attention on the first token by query position,
    and mean attention mass by token class."""

    epsilon: float
    n_inputs: int
    flag_rate: np.ndarray           # (L, H)
    pair_rate: np.ndarray           # (L, H, n, i), NaN where i >= n
    first_token_mass: np.ndarray    # (L, H, n)
    class_mass: dict = field(default_factory=dict)  # class -> (L, H)

    @property
    def overall_rate(self) -> float:
        return float(self.flag_rate.mean())

    def to_json(self) -> dict:
        def clean(a):
            return np.where(np.isnan(a), None, a).tolist()
        return {"epsilon": self.epsilon, "n_inputs": self.n_inputs,
                "overall_rate": self.overall_rate,
                "flag_rate": self.flag_rate.tolist(),
                "pair_rate": clean(self.pair_rate),
                "first_token_mass": self.first_token_mass.tolist(),
                "class_mass": {k: v.tolist() for k, v in self.class_mass.items()}}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def mi_ratio_matrix(length: int, ratio_fn) -> np.ndarray:
    """``R[n-1, i-1] = ratio_fn(i, n)`` for ``i < n``; NaN elsewhere."""
    R = np.full((length, length), np.nan)
    for n in range(2, length + 1):
        for i in range(1, n):
            R[n - 1, i - 1] = ratio_fn(i, n)
    return R


def da_flags(probs: np.ndarray, R: np.ndarray, epsilon: float) -> np.ndarray:
    """Boolean ``(..., n, i)`` array of disproportional-attention flags.

    Row ``n`` is flagged at ``i < n`` when its prefix mass up to ``i`` exceeds
    ``R[n, i]`` times its mass up to ``n`` plus ``epsilon``.
    """
    prefix = np.cumsum(probs, axis=-1)
    total = np.diagonal(prefix, axis1=-2, axis2=-1)[..., :, None]
    valid = ~np.isnan(R)
    with np.errstate(invalid="ignore"):
        flags = prefix > np.where(valid, R, np.inf) * total + epsilon
    return flags & valid


def da_scan(model, samples, epsilon: float = DEFAULT_EPSILON, vocab: int | None = None,
            ratio_fn=None, sentinel_tokens=()) -> DAReport:
    """Scan softCopyLast inputs for disproportional attention.

    ``samples`` are token arrays (or ``TaskSample``) of a common length;
    ``ratio_fn(i, n)`` defaults to the analytic softCopyLast ratio.
    """
    seqs = [np.asarray(getattr(s, "input_tokens", s), dtype=np.int64) for s in samples]
    if not seqs:
        raise ValueError("no samples to scan")
    L = len(seqs[0])
    if any(len(s) != L for s in seqs):
        raise ValueError("all samples must share one length")
    if ratio_fn is None:
        v = vocab or model.config.vocab_size
        ratio_fn = lambda i, n: mutual_info_ratio(i, n, v)  # noqa: E731
    R = mi_ratio_matrix(L, ratio_fn)
    batch = np.stack(seqs)
    traces = _traces(model, batch)
    n_layers, H = len(traces), traces[0].probs.shape[1]
    flag_any = np.zeros((n_layers, H))
    pair = np.zeros((n_layers, H, L, L))
    first = np.zeros((n_layers, H, L))
    cls = {"initial": np.zeros((n_layers, H)), "sentinel": np.zeros((n_layers, H)),
           "other": np.zeros((n_layers, H))}
    sentinel = np.isin(batch, list(sentinel_tokens))
    for l, tr in enumerate(traces):
        probs = tr.probs                                  # (B, H, L, L)
        flags = da_flags(probs, R, epsilon)
        flag_any[l] = flags.any(axis=(-1, -2)).mean(axis=0)
        pair[l] = flags.mean(axis=0)
        first[l] = probs[..., 0].mean(axis=0)
        init_mass = probs[..., 0]
        sent_mass = np.einsum("bhqk,bk->bhq", probs, sentinel.astype(float))
        sent_mass = sent_mass - np.where(sentinel[:, None, None, 0], init_mass, 0.0)
        total = probs.sum(axis=-1)
        cls["initial"][l] = init_mass.mean(axis=(0, 2))
        cls["sentinel"][l] = sent_mass.mean(axis=(0, 2))
        cls["other"][l] = (total - init_mass - sent_mass).mean(axis=(0, 2))
    pair[:, :, np.isnan(R)] = np.nan
    return DAReport(epsilon, len(seqs), flag_any, pair, first, cls)


def mask_ratio_curve(model, tokens) -> np.ndarray:
    """Per-position real attention mass, averaged over layers and heads."""
    traces = _traces(model, tokens)
    alpha = np.stack([t.alpha for t in traces])          # (L, [B,] H, n)
    axes = tuple(range(alpha.ndim - 1))
    return alpha.mean(axis=axes)


def first_token_trend(model, sequences) -> np.ndarray:
    """``(n, 2)`` array of (1-based query position, mean attention on token 1)."""
    batch = np.stack([np.asarray(s, dtype=np.int64) for s in sequences])
    traces = _traces(model, batch)
    mass = np.stack([t.probs[..., 0] for t in traces])   # (L, B, H, n)
    mean = mass.mean(axis=(0, 1, 2))
    return np.column_stack([np.arange(1, len(mean) + 1), mean])


def dump_attention(traces, path) -> None:
    """Write every layer/head matrix as CSV rows ``layer, head, query, k1..kn, row_sum``.

    ``traces`` is a per-layer list of :class:`AttnTrace` for a single
    sequence (``probs`` of shape ``(H, n, n)``).
    """
    n = traces[0].probs.shape[-1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["layer", "head", "query"] + [f"k{j + 1}" for j in range(n)] + ["row_sum"])
        for l, tr in enumerate(traces):
            if tr.probs.ndim != 3:
                raise ValueError("dump_attention expects unbatched traces (H, n, n)")
            for h, mat in enumerate(tr.probs):
                for i, row in enumerate(mat):
                    wr.writerow([l, h, i + 1] + [repr(float(x)) for x in row]
                                + [repr(float(tr.alpha[h, i]))])


def load_attention_csv(path) -> tuple[dict, dict]:
    """Parse a dump back into ``{(layer, head): matrix}`` and ``{(layer, head): row sums}``."""
    mats, sums = {}, {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        for row in rd:
            key = (int(row[0]), int(row[1]))
            mats.setdefault(key, []).append([float(x) for x in row[3:-1]])
            sums.setdefault(key, []).append(float(row[-1]))
    return ({k: np.array(v) for k, v in mats.items()}, {k: np.array(v) for k, v in sums.items()})
