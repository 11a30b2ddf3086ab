import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncasm.estep import ModeWeights, surrogate_q
from ncasm.mstep import (
    RankDeficientError,
    RegressionAccumulator,
    run_mstep,
    solve_normal,
    update_A_anticausal,
    update_A_causal,
    update_C_joint,
    update_covariances,
    update_pi,
)
from ncasm.simulate import SimConfig, simulate
from conftest import single_mode_theta
from oracles import cramer_2x2, normal_equations, stable_matrix


def hard(s_c, s_a, m_c=2, m_a=2):
    return ModeWeights.one_hot(s_c, s_a, m_c, m_a)


def test_pi_all_on_first_mode():
    pc, pa = update_pi(hard([0, 0, 0], [1, 1, 0]))
    np.testing.assert_array_equal(pc, [1, 0])
    np.testing.assert_allclose(pa, [1 / 3, 2 / 3])


def test_pi_counting():
    pc, _ = update_pi(hard([0, 1, 0, 0], [0, 0, 0, 0]))
    np.testing.assert_allclose(pc, [0.75, 0.25])


def test_scalar_causal_least_squares_by_hand():
    x = np.array([[1.0], [2.0], [4.0]])
    A = update_A_causal(0, x, ModeWeights(np.ones((3, 1)), np.ones((3, 1))))
    assert A[0, 0] == pytest.approx((2 * 1 + 4 * 2) / (1 + 4), abs=1e-14)


def test_scalar_anticausal_least_squares_by_hand():
    x = np.array([[4.0], [2.0], [1.0]])  # regress x(t) on x(t+1)
    A = update_A_anticausal(0, x, ModeWeights(np.ones((3, 1)), np.ones((3, 1))))
    assert A[0, 0] == pytest.approx(2.0, abs=1e-14)


def test_noiseless_exact_recovery_of_A():
    A = np.array([[1.0, 0.2], [0.3, 0.8]])
    x = np.zeros((40, 2))
    x[0] = [1.0, -0.5]
    for t in range(1, 40):
        x[t] = A @ x[t - 1]
    w = ModeWeights(np.ones((40, 1)), np.ones((40, 1)))
    np.testing.assert_allclose(update_A_causal(0, x, w), A, atol=1e-8)
    np.testing.assert_allclose(update_A_anticausal(0, x[::-1], w), A, atol=1e-8)


def test_noiseless_exact_recovery_of_C():
    rng = np.random.default_rng(1)
    xc, xa = rng.standard_normal((30, 2)), rng.standard_normal((30, 2))
    Cc, Ca = np.array([[0.3, 0.7]]), np.array([[0.2, 0.6]])
    y = xc @ Cc.T + xa @ Ca.T
    w = ModeWeights(np.ones((30, 1)), np.ones((30, 1)))
    C_c, C_a = update_C_joint(xc, xa, y, w)
    np.testing.assert_allclose(C_c[0], Cc, atol=1e-8)
    np.testing.assert_allclose(C_a[0], Ca, atol=1e-8)


def test_joint_C_two_by_two_cramer():
    xc = np.array([[1.0], [2.0]])
    xa = np.array([[3.0], [-1.0]])
    y = np.array([[5.0], [0.5]])
    w = ModeWeights(np.ones((2, 1)), np.ones((2, 1)))
    C_c, C_a = update_C_joint(xc, xa, y, w)
    cc, ca = cramer_2x2(1.0, 3.0, 2.0, -1.0, 5.0, 0.5)
    assert C_c[0, 0, 0] == pytest.approx(cc, abs=1e-12)
    assert C_a[0, 0, 0] == pytest.approx(ca, abs=1e-12)


def test_joint_C_switching_recovery():
    rng = np.random.default_rng(2)
    T = 400
    s_c, s_a = rng.integers(0, 2, T), rng.integers(0, 2, T)
    Cc = rng.standard_normal((2, 2, 3))
    Ca = rng.standard_normal((2, 2, 2))
    xc, xa = rng.standard_normal((T, 3)), rng.standard_normal((T, 2))
    y = np.einsum("tij,tj->ti", Cc[s_c], xc) + np.einsum("tij,tj->ti", Ca[s_a], xa)
    C_c, C_a = update_C_joint(xc, xa, y, hard(s_c, s_a))
    np.testing.assert_allclose(C_c, Cc, atol=1e-8)
    np.testing.assert_allclose(C_a, Ca, atol=1e-8)


def test_zero_residuals_zero_covariances():
    x = np.array([[1.0], [2.0], [4.0]])
    w = ModeWeights(np.ones((3, 1)), np.ones((3, 1)))
    y = x - x[::-1]
    Sc, Sa, Sm = update_covariances(x, x[::-1], y, w, [[[2.0]]], [[[1.0]]], [[[2.0]]], [[[-1.0]]])
    np.testing.assert_allclose(Sc, 0, atol=1e-14)
    np.testing.assert_allclose(Sa, 0, atol=1e-14)
    np.testing.assert_allclose(Sm, 0, atol=1e-14)


def test_two_sample_variance_by_hand():
    w = ModeWeights(np.ones((2, 1)), np.ones((2, 1)))
    Z = np.zeros((2, 1))
    _, _, Sm = update_covariances(Z, Z, np.array([[1.0], [-1.0]]), w, [[[0.0]]], [[[0.0]]], [[[0.0]]], [[[0.0]]])
    assert Sm[0, 0] == pytest.approx(1.0)
    Sc, _, _ = update_covariances(np.array([[0.0], [1.0], [-1.0]]), np.zeros((3, 1)), np.zeros((3, 1)),
                                  ModeWeights(np.ones((3, 1)), np.ones((3, 1))),
                                  [[[0.0]]], [[[0.0]]], [[[0.0]]], [[[0.0]]])
    assert Sc[0, 0, 0] == pytest.approx(1.0)


def test_zero_mass_mode_keeps_previous(caplog):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((20, 2))
    w = hard(np.zeros(20, int), np.zeros(20, int))
    prev = np.full((2, 2), 7.0)
    with caplog.at_level(logging.WARNING, logger="ncasm.mstep"):
        A = update_A_causal(1, x, w, prev)
    np.testing.assert_array_equal(A, prev)
    assert "A_c(2)" in caplog.text and "zero weight" in caplog.text


def test_zero_gram_with_mass_raises():
    w = ModeWeights(np.ones((5, 1)), np.ones((5, 1)))
    with pytest.raises(RankDeficientError, match="A_c\\(1\\).*more"):
        update_A_causal(0, np.zeros((5, 2)), w)


def test_ridge_applied_to_ill_conditioned_gram():
    G = np.diag([1.0, 1e-14])
    B = solve_normal(G, np.array([[1.0, 1e-14]]))
    assert np.all(np.isfinite(B))
    assert B[0, 1] == pytest.approx(1e-14 / (1e-14 + 1e-8 * 0.5), rel=1e-6)


def test_accumulator_bookkeeping():
    acc = RegressionAccumulator.empty(2, 1).add(np.eye(2), np.array([[1.0], [2.0]]), np.array([1.0, 0.0]))
    assert acc.count == 1 and acc.mass == 1.0
    np.testing.assert_array_equal(acc.gram, [[1, 0], [0, 0]])


def _random_problem(seed, T=60, n=2, m=2):
    rng = np.random.default_rng(seed)
    xc, xa = rng.standard_normal((T, n)), rng.standard_normal((T, n))
    y = rng.standard_normal((T, 1))
    s_c, s_a = rng.integers(0, m, T), rng.integers(0, m, T)
    s_c[:m], s_a[:m] = np.arange(m), np.arange(m)
    return rng, xc, xa, y, s_c, s_a


def _rss(A, x, w):
    r = x[1:] - x[:-1] @ A.T
    return float(np.sum(w[1:] * np.sum(r * r, axis=1)))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ls_update_never_increases_own_objective(seed):
    rng, xc, _, _, s_c, s_a = _random_problem(seed)
    w = hard(s_c, s_a)
    for j in range(2):
        prev = rng.standard_normal((2, 2))
        A = update_A_causal(j, xc, w, prev)
        assert _rss(A, xc, w.w_c[:, j]) <= _rss(prev, xc, w.w_c[:, j]) + 1e-10


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_label_permutation_equivariance(seed):
    _, xc, xa, y, s_c, s_a = _random_problem(seed)
    a = update_C_joint(xc, xa, y, hard(s_c, s_a))
    b = update_C_joint(xc, xa, y, hard(1 - s_c, s_a))
    np.testing.assert_allclose(b[0][::-1], a[0], atol=1e-9)
    A0 = update_A_causal(0, xc, hard(s_c, s_a))
    A1 = update_A_causal(1, xc, hard(1 - s_c, s_a))
    np.testing.assert_allclose(A0, A1, atol=1e-10)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_single_mode_matches_naive_normal_equations(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((25, 3))
    w = ModeWeights(np.ones((25, 1)), np.ones((25, 1)))
    np.testing.assert_allclose(update_A_causal(0, x, w), normal_equations(x[:-1], x[1:]), atol=1e-10)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hard_weight_mass_sums_to_T(seed):
    _, _, _, _, s_c, s_a = _random_problem(seed)
    w = hard(s_c, s_a)
    assert w.w_c.sum() == len(s_c)
    assert sum((w.w_c[:, j][:, None] * w.w_a).sum() for j in range(2)) == len(s_c)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_mstep_maximizes_surrogate(seed, soft):
    rng, xc, xa, y, s_c, s_a = _random_problem(seed)
    if soft:
        w = ModeWeights(rng.dirichlet(np.ones(2), len(y)), rng.dirichlet(np.ones(2), len(y)))
    else:
        w = hard(s_c, s_a)
    th0 = single_mode_theta(np.eye(2), np.ones((1, 2)), np.eye(2), np.eye(2), np.ones((1, 2)), np.eye(2), [[1.0]])
    arr = th0.arrays()
    arr = {k: (np.concatenate([v, v]) if k not in ("Sigma_m",) else v) for k, v in arr.items()}
    arr["pi_c"] = arr["pi_a"] = np.array([0.5, 0.5])
    from ncasm import ThetaBundle
    th0 = ThetaBundle.from_arrays(**arr)
    best = run_mstep(th0, y, xc, xa, w)
    q_best = surrogate_q(best, y, xc, xa, w)
    assert q_best >= surrogate_q(th0, y, xc, xa, w) - 1e-8
    for _ in range(3):
        pert = best.arrays()
        for k in ("A_c", "C_c", "A_a", "C_a"):
            pert[k] = pert[k] + 1e-3 * rng.standard_normal(pert[k].shape)
        for k in ("Sigma_c", "Sigma_a"):
            pert[k] = pert[k] * np.exp(1e-3 * rng.standard_normal())
        assert surrogate_q(ThetaBundle.from_arrays(**pert), y, xc, xa, w) <= q_best + 1e-8


def test_example_scale_mstep_on_true_states(stable_example):
    tr = simulate(stable_example, SimConfig(T=10_000, seed=21))
    th = run_mstep(stable_example, tr.y, tr.x_c, tr.x_a, hard(tr.s_c, tr.s_a))
    assert np.max(np.abs(th.A_c - stable_example.A_c)) < 0.1
    assert np.max(np.abs(th.A_a - stable_example.A_a)) < 0.1
    assert np.max(np.abs(th.C_c - stable_example.C_c)) < 0.05
    assert np.max(np.abs(th.C_a - stable_example.C_a)) < 0.05
    assert np.max(np.abs(th.pi_c - stable_example.pi_c)) < 0.02
    assert abs(th.Sigma_m[0, 0] - 1.0) < 0.05
    assert np.linalg.norm(th.Sigma_c[0] - np.eye(2)) < 0.1
