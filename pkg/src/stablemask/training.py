"""AdamW with warmup + decay, global-norm clipping and a seeded training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


@dataclass
class TrainConfig:
    peak_lr: float = 3e-3
    begin_lr: float = 1e-6
    warmup_steps: int = 100
    total_steps: int = 2000
    decay: str = "linear"
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 16
    seq_len: int = 32
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.decay not in ("linear", "cosine"):
            raise ValueError(f"decay must be 'linear' or 'cosine', got {self.decay!r}")
        if self.peak_lr <= 0 or self.begin_lr < 0 or self.clip_norm <= 0:
            raise ValueError("learning rates and clip_norm must be positive")
        if self.batch_size < 1 or self.seq_len < 1 or self.total_steps < 1:
            raise ValueError("batch_size, seq_len and total_steps must be positive")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``begin_lr`` to ``peak_lr``, then decay to 0 at ``total_steps``."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.begin_lr + (cfg.peak_lr - cfg.begin_lr) * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.peak_lr
    frac = min(max((step - cfg.warmup_steps) / span, 0.0), 1.0)
    if cfg.decay == "linear":
        return cfg.peak_lr * (1.0 - frac)
    return 0.5 * cfg.peak_lr * (1.0 + math.cos(math.pi * frac))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when already within bounds).
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm {norm}")
    if norm <= max_norm:
        return 1.0
    s = max_norm / norm
    for g in grads:
        g *= s
    return s


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def as_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "step": self.step}

    @classmethod
    def from_dict(cls, d: dict | None) -> "AdamWState":
        if not d:
            return cls()
        return cls(m=dict(d["m"]), v=dict(d["v"]), step=int(d["step"]))


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               betas=(0.9, 0.98), eps: float = 1e-8, weight_decay: float = 0.0,
               decay_mask: dict | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` (name -> array)."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r} at step {t}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        wd = weight_decay if decay_mask is None or decay_mask.get(name, True) else 0.0
        if wd:
            p -= lr * wd * p
        p -= lr * mhat / (np.sqrt(vhat) + eps)


def train(model, batches, cfg: TrainConfig, state: AdamWState | None = None,
          eval_fn=None, start_step: int = 0):
    """Run the optimisation loop, yielding one metrics dict per step.

    ``batches(rng, step)`` returns ``(inputs, targets, weights)``; the rng is
    seeded from ``cfg.seed`` so identical configs give identical streams.
    Metrics carry ``step, loss, lr, grad_norm`` plus ``wall_ms`` (the only
    non-deterministic field). If ``eval_fn`` is given and ``cfg.eval_every``
    is positive, its dict result is merged in on those steps.
    """
    rng = np.random.default_rng(cfg.seed)
    state = state or AdamWState()
    params = model.params
    decay_mask = {k: p.ndim >= 2 for k, p in params.items()}
    t0 = time.perf_counter()
    for step in range(start_step, cfg.total_steps):
        inputs, targets, weights = batches(rng, step)
        model.zero_grad()
        loss = model.loss(inputs, targets, weights)
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at step {step}")
        loss.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        norm = global_norm(grads.values())
        clip_global_norm(list(grads.values()), cfg.clip_norm)
        lr = lr_at(step, cfg)
        adamw_step({k: p.data for k, p in params.items()}, grads, state, lr, cfg.betas,
                   cfg.eps, cfg.weight_decay, decay_mask)
        rec = {"step": step, "loss": loss.item(), "lr": lr, "grad_norm": norm}
        if eval_fn is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            with no_grad():
                rec.update(eval_fn(model))
        rec["wall_ms"] = (time.perf_counter() - t0) * 1e3
        yield rec


def metrics_line(rec: dict, timing: bool = True) -> str:
    """One JSON line; ``timing=False`` drops the wall-clock field."""
    if not timing:
        rec = {k: v for k, v in rec.items() if k != "wall_ms"}
    return json.dumps(rec, sort_keys=False)


def eval_loss(model, batches, n_batches: int, seed: int = 12345) -> float:
    """Mean loss over ``n_batches`` fixed-seed batches; PPL is ``exp`` of this."""
    rng = np.random.default_rng(seed)
    total = 0.0
    with no_grad():
        for i in range(n_batches):
            inputs, targets, weights = batches(rng, i)
            total += model.loss(inputs, targets, weights).item()
    return total / n_batches
