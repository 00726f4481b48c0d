"""Invariant suite behind ``stablemask verify``.

Each check returns a :class:`CheckResult`; :func:`run_all` collects them.
The checks are small enough to run in a few seconds on one core.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .inference import prefill
from .masking import (apply_stablemask_np, build_masks, build_infer_row, causal_softmax,
                      keep_matrix, pseudo_mass, tau_infer)
from .model import ModelConfig, Transformer, construct_position_probe_weights, xi_closed_form
from .streamed import BlockPlan, naive_forward, streamed_forward
from .tensor import Tensor, no_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_err: float
    detail: str = ""
    seconds: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (perturbs ``x`` in place, restores it)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max(max|a|, max|b|, 1e-8)``, one number for a whole array."""
    scale = max(float(np.abs(a).max(initial=0)), float(np.abs(b).max(initial=0)), 1e-8)
    return float(np.abs(a - b).max(initial=0)) / scale


def model_gradcheck(model: Transformer, tokens, h: float = 1e-5, names=None,
                    max_entries: int | None = None, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences over ``names``.

    ``max_entries`` limits each parameter to a random subset of coordinates.
    """
    tokens = np.asarray(tokens)
    model.zero_grad()
    loss = model.loss_lm(tokens)
    loss.backward()
    grads = {k: p.grad.copy() for k, p in model.params.items() if p.grad is not None}

    def f():
        with no_grad():
            return model.loss_lm(tokens).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names or list(model.params):
        p = model.params[name].data
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            num[j] = (fp - fm) / (2 * h)
        ana = grads.get(name, np.zeros_like(p)).reshape(-1)[idx]
        worst = max(worst, rel_error(ana, num))
    return worst


def increasing_where_resolvable(got: np.ndarray, exact: np.ndarray, ulps: int = 8) -> bool:
    """Non-decreasing up to ``ulps`` of rounding, and strictly increasing at every
    step whose exact increment exceeds ``ulps`` units in the last place."""
    step = np.diff(got)
    if np.any(step < -ulps * np.spacing(np.abs(got[1:]))):
        return False
    resolvable = np.diff(exact) > ulps * np.spacing(np.abs(exact[1:]))
    return bool(np.all(step[resolvable] > 0))


# -- individual checks ---------------------------------------------------------------

def check_mask_algebra(sizes=(1, 2, 5, 16, 64), gammas=(0.1, 0.5, 1.0), seed: int = 0) -> CheckResult:
    """Causality, mask-ratio range and ordering, last row exactly one, vanilla reduction."""
    rng = np.random.default_rng(seed)
    worst, bad = 0.0, []
    for n in sizes:
        C = keep_matrix(n)
        for g in gammas:
            A = rng.standard_normal((n, n)) * 3
            probs, alpha = apply_stablemask_np(A, C, build_masks(n, g).P)
            if np.any(probs[np.triu_indices(n, 1)] != 0):
                bad.append(f"causality n={n}")
            if alpha[-1] != 1.0 and abs(alpha[-1] - 1.0) > 1e-12:
                bad.append(f"alpha_n n={n}")
            if np.any(alpha <= 0) or np.any(alpha > 1 + 1e-12):
                bad.append(f"alpha range n={n}")
            P0 = build_masks(n, g).P
            _, flat = apply_stablemask_np(np.zeros((n, n)), C, P0)
            beta = pseudo_mass(np.zeros((n, n)), C, P0)
            # alpha rounds to 1 on late rows; the ordering is checked on 1 - alpha
            if not increasing_where_resolvable(flat, 1.0 - beta) or np.any(np.diff(beta) >= 0) or np.any(beta[:-1] <= 0):
                bad.append(f"monotone n={n} gamma={g}")
            ref = causal_softmax(A)
            red, _ = apply_stablemask_np(A, C, build_masks(n, g, kind="neg_inf").P)
            worst = max(worst, float(np.abs(red - ref).max()))
    ok = not bad and worst < 1e-12
    return CheckResult("mask_algebra", ok, worst, "; ".join(bad))


def check_xi_construction(lengths=(1, 2, 8, 33, 64), gammas=(0.25, 0.5, 1.0)) -> CheckResult:
    worst, bad = 0.0, []
    for g in gammas:
        for n in lengths:
            cfg = ModelConfig(vocab_size=5, model_dim=8, n_layers=1, n_heads=2, pe="rope",
                              gamma=g, max_len=n)
            model = Transformer(cfg, seed=n)
            construct_position_probe_weights(model)
            tokens = np.arange(n) % cfg.vocab_size
            with no_grad():
                _, _, hidden = model.forward(tokens, return_hidden=True)
            got = hidden[0][:, 1]
            want = xi_closed_form(n, g)
            worst = max(worst, float(np.abs(got - want).max()))
            if n > 1 and not increasing_where_resolvable(got, want):
                bad.append(f"not increasing n={n}")
    ok = not bad and worst < 1e-12
    return CheckResult("xi_construction", ok, worst, "; ".join(bad))


def check_suffix_equivalence(lengths=(8, 16), seed: int = 0) -> CheckResult:
    """Incremental logits at every prefix match the full forward at training length."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    for N in lengths:
        cfg = ModelConfig(vocab_size=11, model_dim=16, n_layers=2, n_heads=2, max_len=N,
                          init_std=0.3)
        model = Transformer(cfg, seed=N)
        seq = rng.integers(0, cfg.vocab_size, size=N)
        full = model.forward_logits(seq)
        inc, _ = prefill(model, seq[:N - 1])
        worst = max(worst, float(np.abs(inc - full[:N - 1]).max()))
    return CheckResult("suffix_equivalence", worst < 1e-10, worst)


def check_tau(seed: int = 0) -> CheckResult:
    """Single suffix entry reproduces the real mass of a training-length row."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for N in (4, 8, 20):
        for g in (0.25, 0.5, 1.0):
            A = rng.standard_normal((N, N))
            probs, _ = apply_stablemask_np(A, keep_matrix(N), build_masks(N, g).P)
            for n in range(1, N + 1):
                w, _ = build_infer_row(A[n - 1, :n], n, N, g, tau=tau_infer(n, N, g))
                worst = max(worst, float(np.abs(w - probs[n - 1, :n]).max()))
    return CheckResult("tau_infer", worst < 1e-12, worst)


def check_streamed(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n, d in ((1, 4), (7, 8), (33, 16), (64, 8)):
        Q, K, V = (rng.standard_normal((n, d)) for _ in range(3))
        for g in (0.1, 0.5, 1.0):
            ref, _ = naive_forward(Q, K, V, g)
            for br, bc in ((1, 1), (4, 8), (16, 16), (n, n)):
                out, _ = streamed_forward(Q, K, V, g, BlockPlan(n, br, bc))
                worst = max(worst, float(np.abs(out - ref).max()))
    return CheckResult("streamed_vs_naive", worst < 1e-10, worst)


def check_gradients(seeds=(0, 1, 2), h: float = 1e-5) -> CheckResult:
    """Attention-only and 1-layer-model gradients against central differences."""
    from .masking import apply_stablemask
    worst = 0.0
    for s in seeds:
        rng = np.random.default_rng(s)
        n = 6
        A = Tensor(rng.standard_normal((2, n, n)), requires_grad=True)
        up = rng.standard_normal((2, n, n))
        masks = build_masks(n, 0.5)
        probs, _ = apply_stablemask(A, masks)
        from .tensor import mul, tsum
        tsum(mul(probs, Tensor(up))).backward()

        def f():
            p, _ = apply_stablemask_np(A.data, masks.C, masks.P)
            return float((p * up).sum())

        worst = max(worst, rel_error(A.grad, numeric_grad(f, A.data, h)))
        cfg = ModelConfig(vocab_size=7, model_dim=8, n_layers=1, n_heads=2, max_len=8,
                          ffn_expansion=2, init_std=0.3)
        model = Transformer(cfg, seed=s)
        tokens = rng.integers(0, 7, size=(2, 7))
        worst = max(worst, model_gradcheck(model, tokens, h, max_entries=6, seed=s))
    return CheckResult("gradients", worst < 1e-5, worst)


CHECKS = (check_mask_algebra, check_tau, check_xi_construction, check_suffix_equivalence,
          check_streamed, check_gradients)


def run_all() -> list[CheckResult]:
    out = []
    for fn in CHECKS:
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # report, don't abort the suite
            res = CheckResult(fn.__name__.removeprefix("check_"), False, math.nan,
                              f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out
