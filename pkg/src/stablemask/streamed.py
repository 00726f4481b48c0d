"""Blocked online-softmax attention forward pass with StableMask tiles.

Row blocks of Q are processed independently. Within a row block the column
blocks are visited left to right, maintaining a running row max ``m``, a
running denominator ``l`` (which includes pseudo mass) and an output
accumulator that only receives the re-masked probabilities. Column blocks
above the diagonal are not skipped: their pseudo scores belong to the
denominator.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .masking import apply_stablemask_np, keep_matrix, pseudo_matrix


@dataclass(frozen=True)
class BlockPlan:
    n: int
    Br: int
    Bc: int

    def __post_init__(self):
        if self.Br < 1 or self.Bc < 1:
            raise ValueError(f"block sizes must be >= 1, got Br={self.Br}, Bc={self.Bc}")
        if self.n < 1:
            raise ValueError("sequence length must be >= 1")

    @property
    def Tr(self) -> int:
        return math.ceil(self.n / self.Br)

    @property
    def Tc(self) -> int:
        return math.ceil(self.n / self.Bc)

    def rows(self, i: int) -> range:
        return range(i * self.Br, min((i + 1) * self.Br, self.n))

    def cols(self, j: int) -> range:
        return range(j * self.Bc, min((j + 1) * self.Bc, self.n))


@dataclass
class RowState:
    m: np.ndarray
    l: np.ndarray
    O_acc: np.ndarray
    L: np.ndarray | None = None


def block_mask_tiles(i: int, j: int, plan: BlockPlan, gamma: float, kind: str = "decay",
                     value: float = 1e-2):
    """Keep and pseudo tiles for block ``(i, j)``, computed from global indices."""
    if not (0 <= i < plan.Tr and 0 <= j < plan.Tc):
        raise IndexError(f"block ({i}, {j}) outside {plan.Tr} x {plan.Tc} grid")
    r, c = np.asarray(plan.rows(i)), np.asarray(plan.cols(j))
    C = (c[None, :] <= r[:, None]).astype(float)
    P = pseudo_matrix(plan.n, gamma, kind, value, rows=r, cols=c)
    return C, P


def _row_block(i, Q, K, V, plan, gamma, kind, value, scale, on_step):
    rows = plan.rows(i)
    Qi = Q[rows.start:rows.stop] * scale
    br, d = Qi.shape
    m = np.full(br, -np.inf)
    l = np.zeros(br)
    O = np.zeros((br, V.shape[1]))
    for j in range(plan.Tc):
        cols = plan.cols(j)
        below = cols.stop - 1 <= rows.start        # every entry visible
        above = cols.start > rows.stop - 1         # every entry pseudo
        if below:
            S = Qi @ K[cols.start:cols.stop].T
        elif above:
            _, P = block_mask_tiles(i, j, plan, gamma, kind, value)
            S = P
        else:
            C, P = block_mask_tiles(i, j, plan, gamma, kind, value)
            S = (Qi @ K[cols.start:cols.stop].T) * C + P
        m_new = np.maximum(m, S.max(axis=1))
        m_safe = np.where(np.isneginf(m_new), 0.0, m_new)
        Pt = np.exp(S - m_safe[:, None])
        # m = -inf means nothing has been accumulated yet
        corr = np.where(np.isneginf(m), 0.0, np.exp(m - m_safe))
        l = corr * l + Pt.sum(axis=1)
        if above:
            O = corr[:, None] * O                  # D = P~ * C is all zero here
        else:
            D = Pt if below else Pt * C
            O = corr[:, None] * O + D @ V[cols.start:cols.stop]
        m = m_new
        if on_step is not None:
            on_step(i, j, RowState(m=m.copy(), l=l.copy(), O_acc=O.copy()))
    return rows, O / l[:, None], m + np.log(l)


def streamed_forward(Q, K, V, gamma: float, plan: BlockPlan, kind: str = "decay",
                     value: float = 1e-2, scale: float | None = None, workers: int = 1,
                     on_step=None):
    """Blocked StableMask attention for one head.

    ``Q, K, V`` are ``(n, d)`` arrays; logits are ``scale * Q K^T`` with
    ``scale`` defaulting to ``1/sqrt(d)``. Returns ``(O, L)`` where ``L`` is the
    per-row log of the softmax denominator (pseudo mass included).

    Row blocks are independent, so ``workers > 1`` maps them over a thread
    pool; each block runs the same arithmetic either way and the result is
    bitwise identical to the sequential run. ``on_step(i, j, RowState)`` is
    called after every column block (sequential use only).
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    n = Q.shape[0]
    if K.shape[0] != n or V.shape[0] != n or plan.n != n:
        raise ValueError("Q, K, V and the plan must agree on sequence length")
    if scale is None:
        scale = 1.0 / math.sqrt(Q.shape[1])
    O = np.empty((n, V.shape[1]))
    L = np.empty(n)

    def run(i):
        return _row_block(i, Q, K, V, plan, gamma, kind, value, scale, on_step)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(plan.Tr)))
    else:
        results = [run(i) for i in range(plan.Tr)]
    for rows, Oi, Li in results:
        O[rows.start:rows.stop] = Oi
        L[rows.start:rows.stop] = Li
    return O, L


def naive_forward(Q, K, V, gamma: float, kind: str = "decay", value: float = 1e-2,
                  scale: float | None = None):
    """Dense reference: ``(softmax(A*C + P) * C) V`` and the log-denominators."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    n = Q.shape[0]
    if scale is None:
        scale = 1.0 / math.sqrt(Q.shape[1])
    A = scale * (Q @ K.T)
    C = keep_matrix(n)
    Pm = pseudo_matrix(n, gamma, kind, value)
    probs, _ = apply_stablemask_np(A, C, Pm)
    S = A * C + Pm
    mx = S.max(axis=1)
    L = mx + np.log(np.exp(S - mx[:, None]).sum(axis=1))
    return probs @ V, L


def bench(shapes, tilings, gamma: float = 0.5, seed: int = 0, repeats: int = 3):
    """Time the blocked pass against the dense one.

    ``shapes`` is an iterable of ``(n, d)``; ``tilings`` of ``(Br, Bc)`` where a
    block size of 0 means "whole sequence". Yields dict rows with keys
    ``n, d, Br, Bc, wall_ms, naive_ms, max_diff``.
    """
    rng = np.random.default_rng(seed)
    for n, d in shapes:
        Q, K, V = (rng.standard_normal((n, d)) for _ in range(3))
        t0 = time.perf_counter()
        for _ in range(repeats):
            ref, _ = naive_forward(Q, K, V, gamma)
        naive_ms = (time.perf_counter() - t0) * 1e3 / repeats
        for Br, Bc in tilings:
            plan = BlockPlan(n, Br or n, Bc or n)
            t0 = time.perf_counter()
            for _ in range(repeats):
                out, _ = streamed_forward(Q, K, V, gamma, plan)
            wall = (time.perf_counter() - t0) * 1e3 / repeats
            yield {"n": n, "d": d, "Br": plan.Br, "Bc": plan.Bc, "wall_ms": wall,
                   "naive_ms": naive_ms, "max_diff": float(np.abs(out - ref).max())}


def write_bench_csv(rows, path) -> list[dict]:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["n", "d", "Br", "Bc", "wall_ms", "naive_ms", "max_diff"])
        wr.writeheader()
        for r in rows:
            wr.writerow({**r, "max_diff": repr(r["max_diff"])})
    return rows
