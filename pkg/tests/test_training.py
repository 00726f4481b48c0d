import math

import numpy as np
import pytest

from stablemask.model import ModelConfig, Transformer
from stablemask.tasks import soft_copy_last_batches
from stablemask.training import (AdamWState, TrainConfig, adamw_step, clip_global_norm, eval_loss,
                                 global_norm, lr_at, metrics_line, train)


def test_lr_schedule_endpoints():
    cfg = TrainConfig(peak_lr=1e-3, begin_lr=1e-6, warmup_steps=10, total_steps=100)
    assert lr_at(0, cfg) == 1e-6
    assert lr_at(10, cfg) == pytest.approx(1e-3, abs=1e-18)
    assert lr_at(100, cfg) == 0.0
    assert lr_at(55, cfg) == pytest.approx(0.5e-3)


def test_cosine_midpoint():
    cfg = TrainConfig(peak_lr=2e-3, warmup_steps=10, total_steps=110, decay="cosine")
    assert lr_at(60, cfg) == pytest.approx(1e-3 * (1 + math.cos(math.pi / 2)), abs=1e-15)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=5)
    with pytest.raises(ValueError):
        TrainConfig(decay="step")
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0.0)


def test_clip_below_max_untouched():
    g = [np.array([0.3, 0.4])]
    assert clip_global_norm(g, 1.0) == 1.0
    assert g[0].tolist() == [0.3, 0.4]


def test_clip_scales_to_max():
    g = [np.array([1.2, 1.6])]
    clip_global_norm(g, 1.0)
    assert abs(global_norm(g) - 1.0) < 1e-12


def test_clip_random_grads(rng):
    for _ in range(20):
        g = [rng.normal(0, rng.uniform(0.1, 10), s) for s in ((3, 4), (5,), (2, 2, 2))]
        clip_global_norm(g, 1.5)
        assert global_norm(g) <= 1.5 + 1e-12


def test_clip_non_finite_raises():
    with pytest.raises(FloatingPointError):
        clip_global_norm([np.array([np.inf])], 1.0)


def test_adamw_zero_grad_no_decay_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamWState(), lr=0.1, weight_decay=0.0)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adamw_decay_only_shrinks():
    p = {"w": np.array([2.0])}
    adamw_step(p, {"w": np.zeros(1)}, AdamWState(), lr=0.1, weight_decay=0.01)
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), abs=1e-15)


def test_adamw_single_scalar_step():
    # bias correction makes the first Adam step lr * g / (|g| + eps)
    p0, g, lr, wd, eps = 1.0, 0.5, 0.1, 0.01, 1e-8
    p = {"w": np.array([p0])}
    adamw_step(p, {"w": np.array([g])}, AdamWState(), lr=lr, betas=(0.9, 0.98), eps=eps,
               weight_decay=wd)
    want = p0 * (1 - lr * wd) - lr * g / (abs(g) + eps)
    assert p["w"][0] == pytest.approx(want, abs=1e-15)


def test_adamw_decay_mask_and_non_finite():
    p = {"w": np.array([1.0]), "b": np.array([1.0])}
    adamw_step(p, {}, AdamWState(), lr=0.1, weight_decay=0.5, decay_mask={"w": True, "b": False})
    assert p["w"][0] == pytest.approx(0.95) and p["b"][0] == 1.0
    with pytest.raises(FloatingPointError):
        adamw_step(p, {"w": np.array([np.nan])}, AdamWState(), lr=0.1)


def _run(seed=0, steps=12):
    m = Transformer(ModelConfig(vocab_size=4, model_dim=8, n_layers=1, n_heads=2, max_len=8,
                                ffn_expansion=2), seed=seed)
    cfg = TrainConfig(total_steps=steps, warmup_steps=2, batch_size=4, seed=seed)
    return m, [metrics_line(r, timing=False) for r in train(m, soft_copy_last_batches(8, 4, 4), cfg)]


def test_fixed_seed_reproduces_metrics():
    _, a = _run()
    _, b = _run()
    assert a == b
    _, c = _run(seed=1)
    assert a != c


def test_metrics_fields():
    m = Transformer(ModelConfig(vocab_size=4, model_dim=8, n_layers=1, n_heads=2, max_len=8), seed=0)
    rec = next(train(m, soft_copy_last_batches(8, 4, 2), TrainConfig(total_steps=1, warmup_steps=0)))
    assert list(rec) == ["step", "loss", "lr", "grad_norm", "wall_ms"]


def test_loss_decreases_on_copy_task():
    m = Transformer(ModelConfig(vocab_size=4, model_dim=16, n_layers=1, n_heads=2, max_len=12,
                                ffn_expansion=2), seed=0)
    batches = soft_copy_last_batches(12, 4, 8)
    cfg = TrainConfig(total_steps=60, warmup_steps=5, batch_size=8, peak_lr=3e-3, eval_every=20)
    evals = [r["eval"] for r in train(m, batches, cfg, eval_fn=lambda mm: {"eval": eval_loss(mm, batches, 4)})
             if "eval" in r]
    assert len(evals) == 3
    assert evals[0] > evals[1] > evals[2]


def test_eval_loss_is_mean_of_batches():
    m = Transformer(ModelConfig(vocab_size=4, model_dim=8, n_layers=1, n_heads=2, max_len=8), seed=0)
    batches = soft_copy_last_batches(8, 4, 2)
    rng = np.random.default_rng(12345)
    manual = np.mean([m.loss(*batches(rng, i)).item() for i in range(3)])
    assert eval_loss(m, batches, 3) == pytest.approx(manual, abs=1e-14)
