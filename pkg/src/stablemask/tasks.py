"""Synthetic position tasks, the softCopyLast chain, and a byte-level corpus.

Vocabulary for the position tasks (``n_max`` = longest supported sequence):
symbols ``0..n_max``, then the ``[ABE]`` marker ``n_max + 1``, then an
artificial-token sentinel ``n_max + 2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import no_grad

TASK_KINDS = ("pos-mapping", "pos-identify", "odd-even", "soft-copy-last", "char-lm")
POSITION_TASKS = ("pos-mapping", "pos-identify", "odd-even")


@dataclass
class TaskSample:
    input_tokens: np.ndarray
    target_tokens: np.ndarray
    eval_mask: np.ndarray

    def __post_init__(self):
        self.input_tokens = np.asarray(self.input_tokens, dtype=np.int64)
        self.target_tokens = np.asarray(self.target_tokens, dtype=np.int64)
        self.eval_mask = np.asarray(self.eval_mask, dtype=bool)
        if not (len(self.input_tokens) == len(self.target_tokens) == len(self.eval_mask)):
            raise ValueError("input, target and eval mask must have equal lengths")
        if not self.eval_mask.any():
            raise ValueError("sample has no scored position")

    def __len__(self) -> int:
        return len(self.input_tokens)

    def to_json(self) -> dict:
        return {"input_tokens": self.input_tokens.tolist(),
                "target_tokens": self.target_tokens.tolist(),
                "eval_mask": self.eval_mask.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "TaskSample":
        return cls(d["input_tokens"], d["target_tokens"], d["eval_mask"])


@dataclass
class TaskSpec:
    kind: str
    train_lengths: list[int] = field(default_factory=lambda: list(range(4, 33)))
    eval_lengths: list[int] = field(default_factory=lambda: list(range(4, 33)))
    n_max: int = 32
    vocab: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}")
        if self.kind in POSITION_TASKS:
            longest = max(self.train_lengths + self.eval_lengths)
            if longest > self.n_max:
                raise ValueError(f"length {longest} exceeds n_max {self.n_max}")
            self.vocab = self.vocab or position_vocab(self.n_max)
            if self.vocab < position_vocab(self.n_max):
                raise ValueError("vocab too small for the position task symbols")
        elif self.kind == "soft-copy-last":
            self.vocab = self.vocab or 8
            if self.vocab < 2:
                raise ValueError("softCopyLast needs vocab >= 2")
        elif self.kind == "char-lm":
            self.vocab = self.vocab or BYTE_VOCAB


def position_vocab(n_max: int) -> int:
    return n_max + 3


def abe_token(n_max: int) -> int:
    return n_max + 1


def at_token(n_max: int) -> int:
    return n_max + 2


# -- position tasks -------------------------------------------------------------

def gen_pos_mapping(n: int, n_max: int = 32) -> TaskSample:
    """All-zero input; target ``1..n``."""
    if not 1 <= n <= n_max:
        raise ValueError(f"n={n} outside 1..{n_max}")
    return TaskSample(np.zeros(n), np.arange(1, n + 1), np.ones(n, dtype=bool))


def gen_pos_identify(n: int, k: int, n_max: int = 32, score_all: bool = False) -> TaskSample:
    """Zeros with ``[ABE]`` at 1-based position ``k``; target ``k`` there, 0 elsewhere."""
    if not 1 <= n <= n_max:
        raise ValueError(f"n={n} outside 1..{n_max}")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside 1..{n}")
    inp = np.zeros(n, dtype=np.int64)
    inp[k - 1] = abe_token(n_max)
    tgt = np.zeros(n, dtype=np.int64)
    tgt[k - 1] = k
    mask = np.ones(n, dtype=bool) if score_all else (np.arange(1, n + 1) == k)
    return TaskSample(inp, tgt, mask)


def gen_odd_even(n: int, n_max: int = 32) -> TaskSample:
    """All-zero input; target ``1, 2, 1, 2, ...``."""
    if not 1 <= n <= n_max:
        raise ValueError(f"n={n} outside 1..{n_max}")
    return TaskSample(np.zeros(n), 1 + np.arange(n) % 2, np.ones(n, dtype=bool))


def gen_at_baseline(sample: TaskSample, k_tokens: int, n_max: int = 32) -> TaskSample:
    """Prepend ``k_tokens`` sentinel tokens that are never scored."""
    if k_tokens < 0:
        raise ValueError("k_tokens must be >= 0")
    if k_tokens == 0:
        return sample
    pad = np.full(k_tokens, at_token(n_max))
    return TaskSample(np.concatenate([pad, sample.input_tokens]),
                      np.concatenate([np.zeros(k_tokens, dtype=np.int64), sample.target_tokens]),
                      np.concatenate([np.zeros(k_tokens, dtype=bool), sample.eval_mask]))


def position_sample(kind: str, n: int, rng: np.random.Generator, n_max: int = 32) -> TaskSample:
    if kind == "pos-mapping":
        return gen_pos_mapping(n, n_max)
    if kind == "odd-even":
        return gen_odd_even(n, n_max)
    if kind == "pos-identify":
        return gen_pos_identify(n, int(rng.integers(1, n + 1)), n_max)
    raise ValueError(f"not a position task: {kind!r}")


def position_eval_set(kind: str, lengths, n_max: int = 32) -> list[TaskSample]:
    """Deterministic evaluation set: one sample per length (every ``k`` for identification)."""
    out = []
    for n in lengths:
        if kind == "pos-identify":
            out.extend(gen_pos_identify(n, k, n_max) for k in range(1, n + 1))
        else:
            out.append(position_sample(kind, n, None, n_max))
    return out


def position_batches(spec: TaskSpec, batch_size: int, at_tokens: int = 0):
    """``batches(rng, step)`` for the training loop; one length per batch."""
    def batches(rng, step):
        n = int(rng.choice(spec.train_lengths))
        samples = [gen_at_baseline(position_sample(spec.kind, n, rng, spec.n_max), at_tokens, spec.n_max)
                   for _ in range(batch_size)]
        return stack_samples(samples)
    return batches


def stack_samples(samples) -> tuple:
    return (np.stack([s.input_tokens for s in samples]),
            np.stack([s.target_tokens for s in samples]),
            np.stack([s.eval_mask for s in samples]).astype(float))


# -- softCopyLast -------------------------------------------------------------------

def copy_prob(n: int) -> float:
    """Probability that token ``n + 1`` copies token ``n`` (``n = 0``: no copy)."""
    return -math.expm1(-n)


def gen_soft_copy_last(length: int, vocab: int, rng: np.random.Generator) -> np.ndarray:
    """Sample one sequence: ``x_1`` uniform, then ``x_{n+1} = x_n`` w.p. ``1 - e^{-n}``,
    otherwise a fresh uniform draw over the whole vocabulary."""
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    seq = np.empty(length, dtype=np.int64)
    seq[0] = rng.integers(vocab)
    for n in range(1, length):
        if rng.random() < copy_prob(n):
            seq[n] = seq[n - 1]
        else:
            seq[n] = rng.integers(vocab)
    return seq


def soft_copy_last_stream(length: int, vocab: int, seed: int):
    """Infinite iterator of softCopyLast ``TaskSample`` (LM form: predict the next token)."""
    rng = np.random.default_rng(seed)
    while True:
        seq = gen_soft_copy_last(length + 1, vocab, rng)
        yield TaskSample(seq[:-1], seq[1:], np.ones(length, dtype=bool))


def soft_copy_last_batches(length: int, vocab: int, batch_size: int):
    def batches(rng, step):
        seqs = np.stack([gen_soft_copy_last(length + 1, vocab, rng) for _ in range(batch_size)])
        return seqs[:, :-1], seqs[:, 1:], np.ones((batch_size, length))
    return batches


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def copy_chain_mi(i: int, n: int, vocab: int) -> float:
    """``I(X_{<=i}; X_{n+1})`` in nats for softCopyLast.

    The chain is Markov with uniform marginals, so this equals
    ``I(X_i; X_{n+1})``: ``X_{n+1}`` keeps ``X_i`` with probability
    ``rho = prod_{m=i}^{n} (1 - e^{-m})`` and is uniform otherwise.
    """
    rho = 1.0
    for m in range(i, n + 1):
        rho *= copy_prob(m)
    row = np.full(vocab, (1.0 - rho) / vocab)
    row[0] += rho
    return math.log(vocab) - _entropy(row)


def mutual_info_ratio(i: int, n: int, vocab: int = 2) -> float:
    """``I(X_{<=i}; X_{n+1}) / I(X_{<=n}; X_{n+1})`` under softCopyLast."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= i <= n:
        raise ValueError(f"need 1 <= i <= n, got i={i}, n={n}")
    den = copy_chain_mi(n, n, vocab)
    if den <= 0:
        raise ZeroDivisionError("I(X<=n; X_{n+1}) is zero")
    return copy_chain_mi(i, n, vocab) / den


# -- byte-level corpus ----------------------------------------------------------------

BYTE_VOCAB = 256


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def decode_bytes(ids) -> str:
    return bytes(np.asarray(ids, dtype=np.uint8).tolist()).decode("utf-8", errors="replace")


def ingest_char_corpus(path, chunk: int = 64) -> list[TaskSample]:
    """Split a UTF-8 file into ``floor(L / chunk)`` byte chunks (LM form)."""
    data = Path(path).read_bytes()
    if not data:
        raise ValueError(f"{path}: empty corpus")
    data.decode("utf-8")
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    count = len(ids) // chunk
    if count == 0:
        raise ValueError(f"{path}: shorter than one chunk of {chunk} bytes")
    out = []
    for c in range(count):
        seg = ids[c * chunk:(c + 1) * chunk]
        nxt = ids[c * chunk + 1:(c + 1) * chunk + 1]
        if len(nxt) < chunk:
            nxt = np.append(nxt, seg[-1])
            mask = np.ones(chunk, dtype=bool)
            mask[-1] = False
        else:
            mask = np.ones(chunk, dtype=bool)
        out.append(TaskSample(seg, nxt, mask))
    return out


def corpus_batches(ids: np.ndarray, seq_len: int, batch_size: int):
    """Random windows of ``seq_len + 1`` bytes from an encoded corpus."""
    if len(ids) <= seq_len + 1:
        raise ValueError("corpus shorter than one training window")

    def batches(rng, step):
        starts = rng.integers(0, len(ids) - seq_len - 1, size=batch_size)
        win = np.stack([ids[s:s + seq_len + 1] for s in starts])
        return win[:, :-1], win[:, 1:], np.ones((batch_size, seq_len))
    return batches


# -- evaluation and dumps -------------------------------------------------------------

def predict(model, sample: TaskSample) -> np.ndarray:
    with no_grad():
        return np.argmax(model.forward_logits(sample.input_tokens), axis=-1)


def eval_accuracy(model, samples, mode: str = "exact") -> float:
    """Greedy argmax accuracy over the scored positions.

    ``mode="exact"``: a sample counts only if every scored position matches.
    ``mode="token"``: fraction of scored positions that match.
    ``model`` may also be a callable mapping an input array to predictions.
    """
    if mode not in ("exact", "token"):
        raise ValueError("mode must be 'exact' or 'token'")
    hits = total = 0
    by_len = {}
    for s in samples:
        by_len.setdefault(len(s), []).append(s)
    for group in by_len.values():
        inputs = np.stack([s.input_tokens for s in group])
        if callable(model) and not hasattr(model, "forward_logits"):
            preds = np.stack([np.asarray(model(x)) for x in inputs])
        else:
            preds = np.argmax(model.forward_logits(inputs), axis=-1)
        for s, pred in zip(group, preds):
            ok = pred[s.eval_mask] == s.target_tokens[s.eval_mask]
            if mode == "exact":
                hits += int(ok.all())
                total += 1
            else:
                hits += int(ok.sum())
                total += int(ok.size)
    return hits / total


def dump_samples(samples, path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def load_samples(path) -> list[TaskSample]:
    with open(path) as fh:
        return [TaskSample.from_json(json.loads(line)) for line in fh if line.strip()]
