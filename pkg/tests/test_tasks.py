import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stablemask.tasks import (TaskSample, TaskSpec, abe_token, at_token, copy_chain_mi, copy_prob,
                              corpus_batches, decode_bytes, dump_samples, encode_text, eval_accuracy,
                              gen_at_baseline, gen_odd_even, gen_pos_identify, gen_pos_mapping,
                              gen_soft_copy_last, ingest_char_corpus, load_samples, mutual_info_ratio,
                              position_batches, position_eval_set, position_sample)

# I(X_1; X_5) / I(X_<=4; X_5) for the binary chain, 40-digit enumeration
RATIO_I1_N4_V2 = 0.21259785966974455793
# upper 0.1% point of chi-square with 7 degrees of freedom
CHI2_7_999 = 24.322


def test_mapping_example():
    s = gen_pos_mapping(5)
    assert s.input_tokens.tolist() == [0] * 5 and s.target_tokens.tolist() == [1, 2, 3, 4, 5]
    assert gen_pos_mapping(1).target_tokens.tolist() == [1]


def test_identify_example():
    s = gen_pos_identify(6, 3)
    A = abe_token(32)
    assert s.input_tokens.tolist() == [0, 0, A, 0, 0, 0]
    assert s.target_tokens.tolist() == [0, 0, 3, 0, 0, 0]
    assert s.eval_mask.tolist() == [False, False, True, False, False, False]
    assert gen_pos_identify(6, 3, score_all=True).eval_mask.all()
    assert gen_pos_identify(4, 1).input_tokens[0] == A


def test_odd_even_example():
    assert gen_odd_even(4).target_tokens.tolist() == [1, 2, 1, 2]
    assert gen_odd_even(1).target_tokens.tolist() == [1]
    t = gen_odd_even(9).target_tokens
    assert all(t[i - 1] == 1 + (i - 1) % 2 for i in range(1, 10))


@pytest.mark.parametrize("fn,args", [(gen_pos_mapping, (0,)), (gen_pos_mapping, (33,)),
                                     (gen_pos_identify, (5, 6)), (gen_odd_even, (40,))])
def test_generator_bounds(fn, args):
    with pytest.raises(ValueError):
        fn(*args)


def test_identify_position_uniform_chi_square():
    rng = np.random.default_rng(7)
    n, draws = 8, 10_000
    ks = [int(np.argmax(position_sample("pos-identify", n, rng).eval_mask)) for _ in range(draws)]
    counts = np.bincount(ks, minlength=n)
    chi2 = ((counts - draws / n) ** 2 / (draws / n)).sum()
    assert chi2 < CHI2_7_999


def test_at_baseline():
    s = gen_odd_even(4)
    assert gen_at_baseline(s, 0) is s
    t = gen_at_baseline(s, 1)
    assert len(t) == 5 and t.input_tokens[0] == at_token(32)
    t3 = gen_at_baseline(gen_pos_identify(4, 2), 3)
    assert not t3.eval_mask[:3].any()
    with pytest.raises(ValueError):
        gen_at_baseline(s, -1)


def test_position_batches_one_length_per_batch():
    spec = TaskSpec("pos-identify", train_lengths=[5, 9])
    inp, tgt, w = position_batches(spec, 6)(np.random.default_rng(0), 0)
    assert inp.shape[0] == 6 and inp.shape[1] in (5, 9)
    assert w.sum() == 6


def test_eval_set_contents():
    assert len(position_eval_set("pos-identify", [3, 4])) == 7
    assert len(position_eval_set("odd-even", range(4, 33))) == 29


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec("sorting")
    with pytest.raises(ValueError):
        TaskSpec("pos-mapping", train_lengths=[40])
    with pytest.raises(ValueError):
        TaskSpec("pos-mapping", vocab=10)
    assert TaskSpec("soft-copy-last").vocab == 8
    assert TaskSpec("char-lm").vocab == 256
    assert TaskSpec("odd-even").vocab == 35


def test_sample_validation():
    with pytest.raises(ValueError):
        TaskSample([0, 0], [1], [True, True])
    with pytest.raises(ValueError):
        TaskSample([0], [1], [False])


# -- softCopyLast ----------------------------------------------------------------------

def test_copy_probability_value():
    assert copy_prob(5) == pytest.approx(0.99326205300091453290, abs=1e-15)
    assert copy_prob(0) == 0.0


def test_copy_frequency_monte_carlo():
    rng = np.random.default_rng(11)
    V, L, draws = 4, 6, 10_000
    seqs = np.stack([gen_soft_copy_last(L, V, rng) for _ in range(draws)])
    for n in range(1, L):
        p = copy_prob(n) + (1 - copy_prob(n)) / V   # fresh draws can repeat by chance
        freq = (seqs[:, n] == seqs[:, n - 1]).mean()
        assert abs(freq - p) <= 3 * math.sqrt(p * (1 - p) / draws) + 1e-12


def test_first_token_uniform():
    rng = np.random.default_rng(3)
    first = [gen_soft_copy_last(2, 5, rng)[0] for _ in range(5000)]
    counts = np.bincount(first, minlength=5)
    assert ((counts - 1000) ** 2 / 1000).sum() < 18.467  # chi-square df=4, 0.1%


def _brute_mi(i, n, V):
    """I(X_<=i; X_{n+1}) by enumerating every sequence of length n + 1."""
    def prob(seq):
        p = 1.0 / V
        for t in range(1, len(seq)):
            c = copy_prob(t)
            p *= (c if seq[t] == seq[t - 1] else 0.0) + (1 - c) / V
        return p

    pa, pb, pab = {}, {}, {}
    for s in itertools.product(range(V), repeat=n + 1):
        p = prob(s)
        a, b = s[:i], s[n]
        pa[a] = pa.get(a, 0) + p
        pb[b] = pb.get(b, 0) + p
        pab[(a, b)] = pab.get((a, b), 0) + p
    return sum(p * math.log(p / (pa[a] * pb[b])) for (a, b), p in pab.items() if p > 0)


def test_mi_ratio_frozen_value():
    assert mutual_info_ratio(1, 4, 2) == pytest.approx(RATIO_I1_N4_V2, abs=1e-14)


@pytest.mark.parametrize("i,n,V", [(1, 4, 2), (2, 4, 2), (3, 5, 2), (1, 3, 3), (2, 3, 3)])
def test_mi_against_enumeration(i, n, V):
    assert copy_chain_mi(i, n, V) == pytest.approx(_brute_mi(i, n, V), abs=1e-13)
    assert mutual_info_ratio(i, n, V) == pytest.approx(_brute_mi(i, n, V) / _brute_mi(n, n, V), abs=1e-12)


@given(st.integers(1, 30), st.integers(2, 16))
def test_mi_ratio_properties(n, V):
    r = [mutual_info_ratio(i, n, V) for i in range(1, n + 1)]
    assert r[-1] == 1.0
    assert all(0 < a <= b for a, b in zip(r, r[1:]))


def test_mi_ratio_argument_checks():
    with pytest.raises(ValueError):
        mutual_info_ratio(0, 3)
    with pytest.raises(ValueError):
        mutual_info_ratio(4, 3)
    with pytest.raises(ValueError):
        mutual_info_ratio(1, 0)


# -- corpus ------------------------------------------------------------------------------

def test_empty_corpus_rejected(tmp_path):
    (tmp_path / "e.txt").write_text("")
    with pytest.raises(ValueError):
        ingest_char_corpus(tmp_path / "e.txt")


def test_corpus_chunk_count(tmp_path):
    text = "abcdefghij" * 20 + "xyz"
    (tmp_path / "c.txt").write_text(text)
    samples = ingest_char_corpus(tmp_path / "c.txt", chunk=64)
    assert len(samples) == len(text) // 64
    assert decode_bytes(samples[0].input_tokens) == text[:64]
    assert samples[0].target_tokens[0] == ord(text[1])


def test_encode_round_trip():
    text = "naive café, tab\there\n"
    assert decode_bytes(encode_text(text)) == text


def test_corpus_batches_shapes():
    ids = encode_text("hello world, " * 20)
    x, y, w = corpus_batches(ids, 16, 3)(np.random.default_rng(0), 0)
    assert x.shape == y.shape == (3, 16)
    np.testing.assert_array_equal(x[:, 1:], y[:, :-1])


# -- evaluation ---------------------------------------------------------------------------

def test_perfect_predictor_scores_one():
    samples = position_eval_set("pos-mapping", range(1, 9))
    assert eval_accuracy(lambda x: np.arange(1, len(x) + 1), samples) == 1.0


def test_random_predictor_near_chance():
    samples = [gen_odd_even(32) for _ in range(200)]
    rng = np.random.default_rng(0)
    acc = eval_accuracy(lambda x: rng.integers(1, 3, len(x)), samples, mode="token")
    assert abs(acc - 0.5) < 3 * math.sqrt(0.25 / (200 * 32))
    assert eval_accuracy(lambda x: rng.integers(1, 3, len(x)), samples, mode="exact") == 0.0


def test_exact_vs_token_modes():
    samples = [gen_odd_even(4)]
    pred = lambda x: np.array([1, 2, 1, 1])  # noqa: E731
    assert eval_accuracy(pred, samples, "exact") == 0.0
    assert eval_accuracy(pred, samples, "token") == 0.75
    with pytest.raises(ValueError):
        eval_accuracy(pred, samples, "loose")


def test_sample_dump_round_trip(tmp_path):
    samples = position_eval_set("pos-identify", [3])
    dump_samples(samples, tmp_path / "s.jsonl")
    back = load_samples(tmp_path / "s.jsonl")
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.input_tokens, b.input_tokens)
        np.testing.assert_array_equal(a.eval_mask, b.eval_mask)
