import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stablemask.model import (ModelConfig, Transformer, construct_position_probe_weights,
                              load_checkpoint, save_checkpoint, xi_closed_form)
from stablemask.tensor import no_grad
from stablemask.verify import increasing_where_resolvable, model_gradcheck

XI_N3_G05 = [0.50648039105565402590, 0.84463759650303639321, 1.0]


def tiny(**kw):
    base = dict(vocab_size=9, model_dim=8, n_layers=1, n_heads=2, ffn_expansion=2, max_len=8,
                init_std=0.3)
    base.update(kw)
    return Transformer(ModelConfig(**base), seed=kw.pop("seed", 0))


def rope_np(x, pos, base=10000.0):
    out = x.copy()
    for k in range(x.shape[-1] // 2):
        th = pos * base ** (-2 * k / x.shape[-1])
        a, b = x[2 * k], x[2 * k + 1]
        out[2 * k], out[2 * k + 1] = a * math.cos(th) - b * math.sin(th), a * math.sin(th) + b * math.cos(th)
    return out


def forward_oracle(model, tokens):
    """Independent single-layer forward written with explicit loops."""
    P = {k: v.data for k, v in model.params.items()}
    cfg = model.config
    n, d, H = len(tokens), cfg.model_dim, cfg.n_heads
    dh = d // H
    g = cfg.gamma

    def norm(v, w):
        return v / math.sqrt((v * v).mean() + cfg.norm_eps) * w

    x = P["tok_emb"][tokens].copy()
    h = np.array([norm(r, P["layers.0.attn_norm"]) for r in x])
    att = np.zeros((n, d))
    for hd in range(H):
        sl = slice(hd * dh, (hd + 1) * dh)
        q = [rope_np(r, i) for i, r in enumerate(h @ P["layers.0.wq"][:, sl])]
        k = [rope_np(r, i) for i, r in enumerate(h @ P["layers.0.wk"][:, sl])]
        v = h @ P["layers.0.wv"][:, sl]
        for i in range(n):
            e = [math.exp(q[i] @ k[j] / math.sqrt(dh)) for j in range(i + 1)]
            z = sum(e) + sum(math.exp(-c * g) for c in range(i + 1, n))
            att[i, sl] = sum(e[j] / z * v[j] for j in range(i + 1))
    x = x + att @ P["layers.0.wo"]
    f = np.array([norm(r, P["layers.0.ffn_norm"]) for r in x])
    a = f @ P["layers.0.w_gate"]
    x = x + (a / (1 + np.exp(-a)) * (f @ P["layers.0.w_up"])) @ P["layers.0.w_down"]
    y = np.array([norm(r, P["final_norm"]) for r in x])
    return y @ P["lm_head"] + P["lm_bias"]


def test_matches_hand_rolled_forward():
    m = tiny()
    toks = np.array([3, 1, 4, 1, 5, 8])
    np.testing.assert_allclose(m.forward_logits(toks), forward_oracle(m, toks), atol=1e-12)


def test_zero_weights_give_bias_logits():
    m = tiny()
    for k, p in m.params.items():
        p.data[...] = 0.0
    m.params["lm_bias"].data[:] = np.arange(9.0)
    out = m.forward_logits(np.array([1, 2, 3]))
    np.testing.assert_array_equal(out, np.tile(np.arange(9.0), (3, 1)))


@given(st.integers(0, 6), st.integers(0, 100))
def test_causality_end_to_end(t, seed):
    m = tiny(n_layers=2)
    toks = np.random.default_rng(seed).integers(0, 9, 7)
    base = m.forward_logits(toks)
    toks2 = toks.copy()
    toks2[t] = (toks2[t] + 1) % 9
    np.testing.assert_array_equal(m.forward_logits(toks2)[:t], base[:t])


def test_batched_equals_unbatched():
    m = tiny(n_layers=2)
    toks = np.random.default_rng(0).integers(0, 9, (3, 6))
    batched = m.forward_logits(toks)
    for b in range(3):
        np.testing.assert_allclose(batched[b], m.forward_logits(toks[b]), atol=1e-13)


def test_initial_loss_near_log_vocab():
    m = Transformer(ModelConfig(vocab_size=50, max_len=16), seed=0)
    toks = np.random.default_rng(0).integers(0, 50, (4, 16))
    with no_grad():
        assert abs(m.loss_lm(toks).item() - math.log(50)) < 0.05


@pytest.mark.parametrize("kw", [dict(), dict(mask="vanilla"), dict(pe="alibi"), dict(pe="ape-learn"),
                                dict(pe="ape-sin"), dict(pe="none", tie_embeddings=True),
                                dict(headwise_gamma=True)])
def test_full_model_gradients(kw):
    m = tiny(**kw)
    toks = np.random.default_rng(1).integers(0, 9, (2, 6))
    assert model_gradcheck(m, toks, max_entries=5) < 1e-5


def test_length_limits():
    m = tiny(pe="ape-learn")
    with pytest.raises(ValueError):
        m.forward_logits(np.zeros(9, dtype=int))


@pytest.mark.parametrize("kw", [dict(model_dim=7), dict(mask="causal"), dict(gamma=0.0),
                                dict(pe="t5"), dict(model_dim=6, n_heads=2)])
def test_config_validation(kw):
    base = dict(vocab_size=5)
    base.update(kw)
    with pytest.raises(ValueError):
        ModelConfig(**base)


def test_checkpoint_round_trip_is_exact(tmp_path):
    m = tiny(n_layers=2)
    opt = {"m": {"tok_emb": np.ones((9, 8))}, "v": {"tok_emb": np.full((9, 8), 2.0)}, "step": 7}
    save_checkpoint(tmp_path / "c.npz", m, step=12, seed=3, optimizer_state=opt)
    m2, meta, opt2 = load_checkpoint(tmp_path / "c.npz")
    toks = np.array([1, 2, 3, 4])
    np.testing.assert_array_equal(m.forward_logits(toks), m2.forward_logits(toks))
    for k in m.params:
        np.testing.assert_array_equal(m.params[k].data, m2.params[k].data)
    assert meta["step"] == 12 and meta["seed"] == 3 and opt2["step"] == 7
    np.testing.assert_array_equal(opt2["v"]["tok_emb"], opt["v"]["tok_emb"])


def test_checkpoint_version_checked(tmp_path):
    m = tiny()
    save_checkpoint(tmp_path / "c.npz", m)
    with np.load(tmp_path / "c.npz") as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    meta["version"] = 99
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.npz")


def test_load_state_dict_shape_mismatch():
    m = tiny()
    state = {k: v.copy() for k, v in m.state_dict().items()}
    state["lm_bias"] = np.zeros(3)
    with pytest.raises(ValueError):
        m.load_state_dict(state)
    del state["lm_bias"]
    with pytest.raises(KeyError):
        m.load_state_dict(state)


# -- absolute-position construction ----------------------------------------------------

def test_xi_closed_form_small():
    np.testing.assert_allclose(xi_closed_form(3, 0.5), XI_N3_G05, atol=1e-15)


@pytest.mark.parametrize("n,gamma", [(3, 0.5), (12, 0.25), (40, 1.0)])
def test_construction_recovers_xi(n, gamma):
    m = Transformer(ModelConfig(vocab_size=6, model_dim=12, n_layers=2, n_heads=3, gamma=gamma,
                                max_len=n), seed=n)
    construct_position_probe_weights(m, head=1)
    toks = np.random.default_rng(n).integers(0, 6, n)
    with no_grad():
        _, _, hidden = m.forward(toks, return_hidden=True)
    want = xi_closed_form(n, gamma)
    assert np.abs(hidden[0][:, 1] - want).max() < 1e-12
    assert np.abs(hidden[1][:, 1] - want).max() < 1e-12  # the FFN leaves it alone
    assert increasing_where_resolvable(hidden[0][:, 1], want)


def test_construction_requires_stablemask_and_logit_free_pe():
    with pytest.raises(ValueError):
        construct_position_probe_weights(tiny(mask="vanilla"))
    with pytest.raises(ValueError):
        construct_position_probe_weights(tiny(pe="alibi"))
    with pytest.raises(ValueError):
        construct_position_probe_weights(tiny(), head=5)
