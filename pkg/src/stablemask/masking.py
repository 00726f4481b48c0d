"""StableMask algebra: keep-matrix C, pseudo-score matrix P, remasking, and
the suffix column used for cached inference.

Columns and rows are 1-based in the docstrings (as in the usual matrix
notation) and 0-based in code. The pseudo score in column ``k`` is
``-(k - 1) * gamma`` for every row that cannot see column ``k``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, add, mul, softmax_np, softmax_rows


class Mode(str, enum.Enum):
    TRAIN = "train"
    INFER = "infer"
    EXTRAPOLATE = "extrapolate"


PSEUDO_KINDS = ("decay", "neg_inf", "zero", "constant")


@dataclass
class MaskSpec:
    """Per-head decay rates plus the maximum training length.

    ``pseudo`` selects what fills the strict upper triangle before softmax:
    ``decay`` (the positional schedule), ``neg_inf`` (plain causal mask),
    ``zero`` or ``constant`` (``pseudo_value`` everywhere), the last three
    existing for ablations.
    """

    gamma_per_head: list[float]
    max_train_len: int
    mode: Mode = Mode.TRAIN
    pseudo: str = "decay"
    pseudo_value: float = 1e-2

    def __post_init__(self):
        self.gamma_per_head = [float(g) for g in self.gamma_per_head]
        self.mode = Mode(self.mode)
        if not self.gamma_per_head:
            raise ValueError("gamma_per_head must be non-empty")
        if any(not g > 0 for g in self.gamma_per_head):
            raise ValueError(f"all gamma must be > 0, got {self.gamma_per_head}")
        if self.max_train_len < 1:
            raise ValueError("max_train_len must be >= 1")
        if self.pseudo not in PSEUDO_KINDS:
            raise ValueError(f"pseudo must be one of {PSEUDO_KINDS}")

    @property
    def n_heads(self) -> int:
        return len(self.gamma_per_head)


@dataclass
class MaskPair:
    C: np.ndarray
    P: np.ndarray = field(repr=False)


def head_gammas(gamma: float, n_heads: int, headwise: bool = False) -> list[float]:
    """Shared ``gamma`` for every head, or ``gamma * 2**(1 - 2h/H)`` for h = 1..H."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if not headwise:
        return [float(gamma)] * n_heads
    return [gamma * 2.0 ** (1.0 - 2.0 * h / n_heads) for h in range(1, n_heads + 1)]


def keep_matrix(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def pseudo_matrix(n: int, gamma: float, kind: str = "decay", value: float = 1e-2,
                  rows=None, cols=None) -> np.ndarray:
    """Pseudo scores for the given global row/column indices (0-based).

    With ``rows``/``cols`` omitted this is the full ``n x n`` matrix. Entries on
    or below the diagonal are 0.
    """
    r = np.arange(n) if rows is None else np.asarray(rows)
    c = np.arange(n) if cols is None else np.asarray(cols)
    above = c[None, :] > r[:, None]
    if kind == "decay":
        fill = np.broadcast_to(-(c[None, :].astype(float)) * gamma, above.shape)
    elif kind == "neg_inf":
        fill = np.full(above.shape, -np.inf)
    elif kind == "zero":
        fill = np.zeros(above.shape)
    elif kind == "constant":
        fill = np.full(above.shape, float(value))
    else:
        raise ValueError(f"unknown pseudo kind {kind!r}")
    return np.where(above, fill, 0.0)


def build_masks(n: int, gamma: float, kind: str = "decay", value: float = 1e-2) -> MaskPair:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return MaskPair(C=keep_matrix(n), P=pseudo_matrix(n, gamma, kind, value))


def stacked_pseudo(n: int, spec: MaskSpec) -> np.ndarray:
    """``(H, n, n)`` pseudo matrices, one per head."""
    return np.stack([pseudo_matrix(n, g, spec.pseudo, spec.pseudo_value)
                     for g in spec.gamma_per_head])


def apply_stablemask_np(A: np.ndarray, C: np.ndarray, P: np.ndarray):
    """``softmax(A * C + P) * C`` and the per-row real mass, on raw arrays."""
    if A.shape[-1] != A.shape[-2]:
        raise ValueError(f"attention logits must be square, got {A.shape}")
    probs = softmax_np(A * C + P) * C
    return probs, probs.sum(axis=-1)


def pseudo_mass(A: np.ndarray, C: np.ndarray, P: np.ndarray) -> np.ndarray:
    """``1 - alpha`` per row, summed directly over the pseudo columns.

    Late rows have ``alpha`` within one ulp of 1, where ``alpha`` alone can no
    longer show the ordering; this sum keeps full relative precision.
    """
    p = softmax_np(A * C + P)
    return (p * (1.0 - C)).sum(axis=-1)


def apply_stablemask(A, masks: MaskPair):
    """Differentiable StableMask softmax. Returns ``(probs, alpha)``.

    ``alpha`` is a plain array (the mask ratio of each row); ``probs`` is a
    Tensor when ``A`` is one.
    """
    if not isinstance(A, Tensor):
        return apply_stablemask_np(np.asarray(A, dtype=float), masks.C, masks.P)
    if A.shape[-1] != A.shape[-2]:
        raise ValueError(f"attention logits must be square, got {A.shape}")
    probs = mul(softmax_rows(add(mul(A, masks.C), masks.P)), masks.C)
    return probs, probs.data.sum(axis=-1)


def causal_softmax(A):
    """Plain causal attention: ``softmax(A + M)`` with ``-inf`` above the diagonal."""
    n = A.shape[-1]
    M = np.where(np.triu(np.ones((n, n), dtype=bool), 1), -np.inf, 0.0)
    if isinstance(A, Tensor):
        return softmax_rows(add(A, M))
    return softmax_np(np.asarray(A, dtype=float) + M)


def tau_infer(n: int, N: int, gamma: float) -> float:
    """``log(sum_{i=n}^{N-1} exp(-i * gamma))``; ``-inf`` when the sum is empty (n == N)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > N:
        raise ValueError(f"sequence length {n} exceeds training length {N}; use tau_extrapolate")
    if n == N:
        return -math.inf
    # log-sum-exp with the largest term (i = n) factored out
    k = N - n
    return -n * gamma + math.log(-math.expm1(-k * gamma)) - math.log(-math.expm1(-gamma))


def tau_extrapolate(n: int, gamma: float) -> float:
    return -n * gamma


def suffix_tau(n: int, N: int, gamma: float) -> float:
    """Suffix score for a sequence of current length ``n``.

    Up to the training length the summed tail is used (empty, so ``-inf``, at
    n == N); beyond it the extrapolation rule ``-n * gamma`` takes over.
    """
    if n <= N:
        return tau_infer(n, N, gamma)
    return tau_extrapolate(n, gamma)


def build_infer_row(real_logits, n: int, N: int, gamma: float, tau: float | None = None):
    """Attention row ``m = len(real_logits)`` of a length-``n`` prefix with a suffix column.

    The row is softmaxed over its real logits, the pseudo columns ``m+1..n``
    and the suffix score ``tau``; pseudo and suffix entries are then dropped.
    Returns ``(weights, alpha)``.
    """
    z = np.asarray(real_logits, dtype=float)
    m = z.shape[-1]
    if m > n:
        raise ValueError(f"row length {m} exceeds sequence length {n}")
    if tau is None:
        tau = suffix_tau(n, N, gamma)
    pseudo = -np.arange(m, n, dtype=float) * gamma
    full = np.concatenate([z, pseudo, [tau]])
    w = softmax_np(full)[:m]
    return w, float(w.sum())
