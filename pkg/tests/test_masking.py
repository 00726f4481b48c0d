import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stablemask.masking import (MaskSpec, Mode, apply_stablemask, apply_stablemask_np, build_infer_row,
                                build_masks, causal_softmax, head_gammas, keep_matrix, pseudo_mass,
                                pseudo_matrix, stacked_pseudo, suffix_tau, tau_extrapolate, tau_infer)
from stablemask.tensor import Tensor, mul, tsum
from stablemask.verify import numeric_grad, rel_error

# exact values from an independent 40-digit evaluation of the closed forms
ALPHA_N3_G05 = [0.50648039105565402590, 0.84463759650303639321, 1.0]
TAU_N8_n5_G05 = -1.8197303293582654241


def dense_oracle(A, gamma):
    """Row-by-row exp/sum with explicit pseudo columns."""
    n = A.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        real = [math.exp(A[i, j]) for j in range(i + 1)]
        pseudo = [math.exp(-c * gamma) for c in range(i + 1, n)]
        z = sum(real) + sum(pseudo)
        out[i, :i + 1] = np.array(real) / z
    return out


def test_first_row_pseudo_values():
    P = build_masks(4, 0.5).P
    assert P[0, 1:].tolist() == [-0.5, -1.0, -1.5]


def test_single_token_masks():
    m = build_masks(1, 0.7)
    assert m.C.tolist() == [[1.0]] and m.P.tolist() == [[0.0]]


def test_pseudo_column_constant_down_the_column():
    P = build_masks(3, 0.5).P
    assert P[:2, 2].tolist() == [-1.0, -1.0]


def test_pseudo_zero_on_and_below_diagonal():
    P = pseudo_matrix(6, 0.3)
    assert np.all(P[np.tril_indices(6)] == 0.0)


def test_pseudo_variants():
    n = 4
    up = np.triu_indices(n, 1)
    assert np.all(np.isneginf(pseudo_matrix(n, 0.5, "neg_inf")[up]))
    assert np.all(pseudo_matrix(n, 0.5, "zero")[up] == 0.0)
    assert np.all(pseudo_matrix(n, 0.5, "constant", 0.25)[up] == 0.25)
    with pytest.raises(ValueError):
        pseudo_matrix(n, 0.5, "bogus")


@pytest.mark.parametrize("gamma", [0.0, -0.5])
def test_nonpositive_gamma_rejected(gamma):
    with pytest.raises(ValueError):
        build_masks(4, gamma)


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec([0.5, 0.0], 8)
    with pytest.raises(ValueError):
        MaskSpec([], 8)
    assert MaskSpec([0.5], 8, mode="infer").mode is Mode.INFER


def test_constant_logit_mask_ratio_closed_form():
    _, alpha = apply_stablemask_np(np.zeros((3, 3)), keep_matrix(3), build_masks(3, 0.5).P)
    np.testing.assert_allclose(alpha, ALPHA_N3_G05, atol=1e-15)


def test_matches_dense_oracle(rng):
    A = rng.standard_normal((7, 7)) * 2
    probs, _ = apply_stablemask_np(A, keep_matrix(7), build_masks(7, 0.4).P)
    np.testing.assert_allclose(probs, dense_oracle(A, 0.4), atol=1e-15)


@given(st.integers(1, 40), st.floats(0.05, 2.0), st.integers(0, 2**31))
def test_causality_and_ratio_bounds(n, gamma, seed):
    A = np.random.default_rng(seed).normal(0, 3, (n, n))
    probs, alpha = apply_stablemask_np(A, keep_matrix(n), build_masks(n, gamma).P)
    assert np.all(probs[np.triu_indices(n, 1)] == 0.0)
    assert np.all(alpha > 0) and np.all(alpha <= 1 + 1e-12)
    assert abs(alpha[-1] - 1.0) <= 1e-15


@given(st.integers(2, 120), st.floats(0.05, 2.0))
def test_constant_logits_ratio_ordering(n, gamma):
    C, P = keep_matrix(n), build_masks(n, gamma).P
    beta = pseudo_mass(np.zeros((n, n)), C, P)
    assert np.all(np.diff(beta) < 0) and np.all(beta[:-1] > 0) and beta[-1] == 0.0


@given(st.integers(1, 30), st.integers(0, 2**31))
def test_perturbing_future_logits_changes_nothing(n, seed):
    r = np.random.default_rng(seed)
    A = r.standard_normal((n, n))
    B = A + np.triu(r.normal(0, 5, (n, n)), 1)
    P = build_masks(n, 0.5).P
    np.testing.assert_array_equal(apply_stablemask_np(A, keep_matrix(n), P)[0],
                                  apply_stablemask_np(B, keep_matrix(n), P)[0])


@pytest.mark.parametrize("n", [1, 3, 17])
def test_neg_inf_reduces_to_causal_softmax(rng, n):
    A = rng.standard_normal((n, n))
    red, _ = apply_stablemask_np(A, keep_matrix(n), pseudo_matrix(n, 0.5, "neg_inf"))
    assert np.abs(red - causal_softmax(A)).max() < 1e-12


def test_tensor_path_matches_array_path(rng):
    A = rng.standard_normal((2, 5, 5))
    m = build_masks(5, 0.5)
    p_t, a_t = apply_stablemask(Tensor(A), m)
    p_n, a_n = apply_stablemask_np(A, m.C, m.P)
    np.testing.assert_array_equal(p_t.data, p_n)
    np.testing.assert_array_equal(a_t, a_n)


def test_gradient_matches_finite_differences(rng):
    A = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
    up = rng.standard_normal((6, 6))
    m = build_masks(6, 0.5)
    probs, _ = apply_stablemask(A, m)
    tsum(mul(probs, Tensor(up))).backward()
    g = numeric_grad(lambda: float((apply_stablemask_np(A.data, m.C, m.P)[0] * up).sum()), A.data)
    assert rel_error(A.grad, g) < 1e-6


def test_gradient_on_masked_positions_is_zero(rng):
    A = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
    probs, _ = apply_stablemask(A, build_masks(5, 0.5))
    tsum(mul(probs, Tensor(rng.standard_normal((5, 5))))).backward()
    assert np.all(A.grad[np.triu_indices(5, 1)] == 0.0)


def test_head_gammas():
    assert head_gammas(0.5, 3) == [0.5, 0.5, 0.5]
    g = head_gammas(0.5, 4, headwise=True)
    np.testing.assert_allclose(g, [0.5 * 2 ** (1 - 2 * h / 4) for h in range(1, 5)])
    assert stacked_pseudo(4, MaskSpec(g, 4)).shape == (4, 4, 4)


# -- inference suffix -------------------------------------------------------------

def test_tau_direct_sum_example():
    assert abs(tau_infer(5, 8, 0.5) - TAU_N8_n5_G05) < 1e-14


def test_tau_single_term():
    assert abs(tau_infer(1, 2, 0.5) - (-0.5)) < 1e-15


def test_tau_empty_sum_at_training_length():
    assert tau_infer(8, 8, 0.5) == -math.inf
    assert math.exp(tau_infer(8, 8, 0.5)) == 0.0


def test_tau_past_training_length_rejected():
    with pytest.raises(ValueError):
        tau_infer(9, 8, 0.5)


@given(st.integers(1, 200), st.floats(0.05, 2.0))
def test_tau_matches_log_of_sum(N, gamma):
    for n in range(1, min(N, 30)):
        direct = math.log(math.fsum(math.exp(-i * gamma) for i in range(n, N)))
        assert abs(tau_infer(n, N, gamma) - direct) < 1e-12 * max(1.0, abs(direct))


def test_tau_extrapolate():
    assert tau_extrapolate(100, 0.5) == -50.0
    assert tau_extrapolate(8, 0.5) == -8 * 0.5
    taus = [tau_extrapolate(n, 0.5) for n in (1, 2, 4, 8, 16)]
    assert all(b < a for a, b in zip(taus, taus[1:]))


def test_suffix_tau_switches_after_training_length():
    assert suffix_tau(8, 8, 0.5) == -math.inf
    assert suffix_tau(9, 8, 0.5) == -4.5
    assert suffix_tau(3, 8, 0.5) == tau_infer(3, 8, 0.5)


def test_infer_last_row_is_softmax_with_suffix():
    z = np.array([0.3, -1.2, 2.0])
    w, _ = build_infer_row(z, 3, 8, 0.5)
    full = np.exp(np.append(z, tau_infer(3, 8, 0.5)))
    np.testing.assert_allclose(w, full[:3] / full.sum(), atol=1e-15)


@pytest.mark.parametrize("N", [4, 9, 16])
def test_infer_rows_equal_training_length_rows(rng, N):
    A = rng.standard_normal((N, N))
    probs, _ = apply_stablemask_np(A, keep_matrix(N), build_masks(N, 0.5).P)
    for n in range(1, N + 1):
        for m in range(1, n + 1):
            w, _ = build_infer_row(A[m - 1, :m], n, N, 0.5)
            assert np.abs(w - probs[m - 1, :m]).max() < 1e-12


def test_infer_row_at_training_length_is_vanilla(rng):
    z = rng.standard_normal(6)
    w, a = build_infer_row(z, 6, 6, 0.5)
    e = np.exp(z - z.max())
    np.testing.assert_allclose(w, e / e.sum(), atol=1e-15)
    assert abs(a - 1.0) < 1e-15
