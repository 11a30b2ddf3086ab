import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ncasm
from ncasm import _kernels
from ncasm.estep import (
    EStepOptions,
    ModeWeights,
    SingularInnovationError,
    classify_modes,
    correct,
    innovation_covariance,
    posterior_covariance_for_gain,
    predict_anticausal,
    predict_causal,
    run_estep,
    surrogate_q,
)
from ncasm.model import AntiCausalModeParams, CausalModeParams
from ncasm.simulate import SimConfig, simulate
from conftest import single_mode_theta
from oracles import expected_loglik_quadrature, gauss_logpdf, random_psd, stable_matrix, textbook_kf


def cmode(A, Sig, C=None):
    return CausalModeParams(A, np.ones((1, A.shape[0])) if C is None else C, Sig)


def amode(A, Sig):
    return AntiCausalModeParams(A, np.ones((1, A.shape[0])), Sig)


# ---------------------------------------------------------------- predict


def test_predict_identity():
    x, P = predict_causal(np.array([1.0, 2.0]), np.eye(2), cmode(np.eye(2), np.zeros((2, 2))))
    np.testing.assert_array_equal(x, [1, 2])
    np.testing.assert_array_equal(P, np.eye(2))


def test_predict_zero_dynamics():
    Q = np.array([[2.0, 0.3], [0.3, 1.0]])
    x, P = predict_causal(np.array([1.0, 2.0]), np.eye(2), cmode(np.zeros((2, 2)), Q))
    np.testing.assert_array_equal(x, 0)
    np.testing.assert_allclose(P, Q)


def test_predict_example_matrix():
    A = np.array([[1.0, 0.2], [0.3, 0.8]])
    _, P = predict_causal(np.zeros(2), np.eye(2), cmode(A, np.eye(2)))
    # A A^T + I by hand: [[1.04, 0.46], [0.46, 0.73]] + I
    np.testing.assert_allclose(P, [[2.04, 0.46], [0.46, 1.73]], atol=1e-14)


def test_predict_anticausal_cases():
    x, P = predict_anticausal(np.array([3.0, -1.0]), np.eye(2), amode(np.eye(2), np.zeros((2, 2))))
    np.testing.assert_array_equal(x, [3, -1])
    _, P = predict_anticausal(np.zeros(2), np.eye(2), amode(0.5 * np.eye(2), np.zeros((2, 2))))
    np.testing.assert_allclose(P, 0.25 * np.eye(2))
    A = np.array([[0.6, 0.2], [0.3, 0.8]])
    _, P = predict_anticausal(np.zeros(2), np.eye(2), amode(A, np.eye(2)))
    np.testing.assert_allclose(P, [[1.40, 0.34], [0.34, 1.73]], atol=1e-14)


# ---------------------------------------------------------------- innovation / correct


def test_innovation_single_chain():
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    R = np.array([[0.3, 0.1], [0.1, 0.4]])
    S = innovation_covariance(P, np.eye(2), np.eye(2), np.zeros((2, 2)), R)
    np.testing.assert_allclose(S, P + R)


def test_innovation_zero_priors():
    S = innovation_covariance(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((1, 2)), np.ones((1, 2)), [[0.7]])
    np.testing.assert_allclose(S, [[0.7]])


def test_innovation_example_modes(example1):
    S = innovation_covariance(np.eye(2), np.eye(2), example1.C_c[0], example1.C_a[0], example1.Sigma_m)
    assert S[0, 0] == pytest.approx(1.98, abs=1e-14)


def test_correct_scalar_by_hand():
    r = correct([0.0], [0.0], [[1.0]], [[1.0]], [3.0], [[1.0]], [[1.0]], [[1.0]])
    assert r.K_c[0, 0] == pytest.approx(1 / 3) and r.K_a[0, 0] == pytest.approx(1 / 3)
    assert r.P_c_post[0, 0] == pytest.approx(2 / 3) and r.P_a_post[0, 0] == pytest.approx(2 / 3)
    assert r.xhat_c_post[0] == pytest.approx(1.0)


def test_correct_perfect_prior_untouched():
    r = correct([1.0, 2.0], [0.5], np.zeros((2, 2)), [[1.0]], [4.0], [[1.0, 1.0]], [[1.0]], [[1.0]])
    np.testing.assert_array_equal(r.K_c, 0)
    np.testing.assert_array_equal(r.xhat_c_post, [1, 2])
    np.testing.assert_array_equal(r.P_c_post, 0)


def test_correct_singular_innovation():
    with pytest.raises(SingularInnovationError, match="t=5"):
        correct([0.0], [0.0], [[0.0]], [[0.0]], [1.0], [[1.0]], [[1.0]], [[0.0]], t=5)


def test_correct_reduces_to_textbook_update():
    rng = np.random.default_rng(0)
    P = random_psd(rng, 3)
    C = rng.standard_normal((2, 3))
    R = random_psd(rng, 2)
    x = rng.standard_normal(3)
    y = rng.standard_normal(2)
    r = correct(x, np.zeros(2), P, np.eye(2), y, C, np.zeros((2, 2)), R)
    _, _, xk, Pk, Kk = textbook_kf(np.eye(3), C, np.zeros((3, 3)), R, y[None], x, P)
    np.testing.assert_allclose(r.K_c, Kk[0], atol=1e-12)
    np.testing.assert_allclose(r.xhat_c_post, xk[0], atol=1e-12)
    np.testing.assert_allclose(r.P_c_post, Pk[0], atol=1e-12)


def _random_gain_instance(rng, n_c, n_a, n_y):
    Pc, Pa = random_psd(rng, n_c), random_psd(rng, n_a)
    Cc, Ca = rng.standard_normal((n_y, n_c)), rng.standard_normal((n_y, n_a))
    Sm = random_psd(rng, n_y)
    r = correct(np.zeros(n_c), np.zeros(n_a), Pc, Pa, np.zeros(n_y), Cc, Ca, Sm)
    return Pc, Pa, Cc, Ca, Sm, r


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_gain_is_stationary_minimum(n_c, n_a, n_y, seed):
    rng = np.random.default_rng(seed)
    Pc, Pa, Cc, Ca, Sm, r = _random_gain_instance(rng, n_c, n_a, n_y)
    base_c = np.trace(posterior_covariance_for_gain(r.K_c, Pc, Pa, Cc, Ca, Sm))
    base_a = np.trace(posterior_covariance_for_gain(r.K_a, Pa, Pc, Ca, Cc, Sm))
    for _ in range(3):
        Dc = rng.standard_normal(r.K_c.shape)
        Da = rng.standard_normal(r.K_a.shape)
        assert np.trace(posterior_covariance_for_gain(r.K_c + 1e-4 * Dc, Pc, Pa, Cc, Ca, Sm)) >= base_c - 1e-12
        assert np.trace(posterior_covariance_for_gain(r.K_a + 1e-4 * Da, Pa, Pc, Ca, Cc, Sm)) >= base_a - 1e-12


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_short_form_equals_full_quadratic_form(n_c, n_a, n_y, seed):
    rng = np.random.default_rng(seed)
    Pc, Pa, Cc, Ca, Sm, r = _random_gain_instance(rng, n_c, n_a, n_y)
    full = posterior_covariance_for_gain(r.K_c, Pc, Pa, Cc, Ca, Sm)
    np.testing.assert_allclose(r.P_c_post, full, atol=1e-10 * max(1.0, np.abs(full).max()))
    full = posterior_covariance_for_gain(r.K_a, Pa, Pc, Ca, Cc, Sm)
    np.testing.assert_allclose(r.P_a_post, full, atol=1e-10 * max(1.0, np.abs(full).max()))


# ---------------------------------------------------------------- whole E-step


def _decoupled_instance(seed, T=50, n=3, n_y=2):
    rng = np.random.default_rng(seed)
    A = stable_matrix(rng, n, 0.9)
    C = rng.standard_normal((n_y, n))
    Q, R = random_psd(rng, n, 0.3), random_psd(rng, n_y, 0.3)
    Z = np.zeros((2, 2))
    th = single_mode_theta(A, C, Q, Z, np.zeros((n_y, 2)), Z, R)
    y = rng.standard_normal((T, n_y))
    x0, P0 = rng.standard_normal(n), random_psd(rng, n)
    return th, y, A, C, Q, R, x0, P0


@pytest.mark.parametrize("seed", range(5))
def test_decoupled_path_matches_textbook_filter(seed):
    th, y, A, C, Q, R, x0, P0 = _decoupled_instance(seed)
    est = run_estep(th, y, options=EStepOptions(x_c0=x0, P_c0=P0))
    ref = textbook_kf(A, C, Q, R, y, x0, P0)
    fs = est.states
    for mine, theirs in zip((fs.xhat_c_prior, fs.P_c_prior, fs.xhat_c_post, fs.P_c_post, fs.K_c), ref):
        np.testing.assert_allclose(mine, theirs, rtol=0, atol=1e-10)


def test_noiseless_single_mode_recovers_states():
    rng = np.random.default_rng(3)
    Z = np.zeros((2, 2))
    A_c, A_a = stable_matrix(rng, 2, 0.95), stable_matrix(rng, 2, 0.95)
    th = single_mode_theta(A_c, rng.standard_normal((1, 2)), Z, A_a, rng.standard_normal((1, 2)), Z, [[0.01]])
    x0, xT = np.array([3.0, -2.0]), np.array([1.0, 4.0])
    tr = simulate(th, SimConfig(T=80, seed=0, x_c_init=x0, x_a_terminal=xT))
    est = run_estep(th, tr, options=EStepOptions(x_c0=x0, P_c0=Z, x_a_end=xT, P_a_end=Z))
    np.testing.assert_allclose(est.states.xhat_c_post, tr.x_c, atol=1e-8)
    np.testing.assert_allclose(est.states.xhat_a_post, tr.x_a, atol=1e-8)


def test_single_mode_labels_trivial(stable_example):
    th = stable_example
    th1 = ncasm.ThetaBundle.from_arrays(**{**th.arrays(), "A_c": th.A_c[:1], "C_c": th.C_c[:1],
                                           "Sigma_c": th.Sigma_c[:1], "pi_c": [1.0]})
    tr = simulate(th1, SimConfig(T=200, seed=1))
    est = run_estep(th1, tr)
    np.testing.assert_array_equal(est.s_c, 0)
    assert est.weights.w_c.shape == (200, 1) and np.all(est.weights.w_c == 1)


def test_zero_prior_mode_never_selected(stable_example):
    tr = simulate(stable_example, SimConfig(T=300, seed=2))
    est = run_estep(stable_example.updated(pi_c=np.array([1.0, 0.0])), tr)
    assert np.all(est.s_c == 0)


def test_filter_state_invariants(stable_example):
    tr = simulate(stable_example, SimConfig(T=1000, seed=4))
    est = run_estep(stable_example, tr)
    fs = est.states
    for prior, post in ((fs.P_c_prior, fs.P_c_post), (fs.P_a_prior, fs.P_a_post)):
        for M in (prior, post):
            assert np.max(np.abs(M - np.swapaxes(M, 1, 2))) <= 1e-10
            assert np.linalg.eigvalsh(M).min() >= -1e-10
        assert np.linalg.eigvalsh(prior - post).min() >= -1e-10
    w = est.weights
    np.testing.assert_allclose(w.w_c.sum(axis=1), 1, atol=1e-12)
    assert w.is_hard


def test_soft_weights_normalized(stable_example):
    tr = simulate(stable_example, SimConfig(T=300, seed=4))
    est = run_estep(stable_example, tr, options=EStepOptions(soft_weights=True))
    np.testing.assert_allclose(est.weights.w_c.sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(est.weights.w_a.sum(axis=1), 1, atol=1e-12)
    assert not est.weights.is_hard


def test_backward_labels_reproduced_by_classifier(stable_example):
    tr = simulate(stable_example, SimConfig(T=500, seed=6))
    est = run_estep(stable_example, tr)
    w, new_c, new_a = classify_modes(stable_example, tr, est.states, est.s_c, est.s_a)
    np.testing.assert_array_equal(new_a, est.s_a)
    again = classify_modes(stable_example, tr, est.states, est.s_c, new_a)
    np.testing.assert_array_equal(again[2], new_a)
    np.testing.assert_array_equal(again[1], new_c)


def test_fixed_modes_respected(stable_example):
    tr = simulate(stable_example, SimConfig(T=300, seed=8))
    est = run_estep(stable_example, tr, fixed_c=tr.s_c, fixed_a=tr.s_a)
    np.testing.assert_array_equal(est.s_c, tr.s_c)
    np.testing.assert_array_equal(est.s_a, tr.s_a)


def test_joint_mode_search_runs(stable_example):
    tr = simulate(stable_example, SimConfig(T=300, seed=8))
    est = run_estep(stable_example, tr, options=EStepOptions(joint_mode_search=True))
    assert np.isfinite(est.q)


def test_singular_innovation_names_time():
    Z = np.zeros((1, 1))
    th = single_mode_theta(Z, [[1.0]], Z, Z, [[1.0]], Z, [[1e-300]])
    th = th.updated(Sigma_m=np.zeros((1, 1)))
    with pytest.raises(SingularInnovationError, match="t=1"):
        run_estep(th, np.ones((4, 1)), options=EStepOptions(P_c0=Z, P_a_end=Z, diffuse=0.0))


def test_q_matches_quadrature_on_two_steps():
    th = single_mode_theta([[0.7]], [[1.2]], [[0.5]], [[0.4]], [[-0.8]], [[0.9]], [[0.6]])
    y = np.array([[0.3], [-1.1]])
    xc, xa = np.array([[0.5], [-0.2]]), np.array([[1.0], [0.4]])
    Pc, Pa = np.array([[[0.3]], [[0.2]]]), np.array([[[0.25]], [[0.15]]])
    w = ModeWeights(np.ones((2, 1)), np.ones((2, 1)))

    def loglik(z):
        c1, c2, a1, a2 = z
        out = gauss_logpdf(c2 - 0.7 * c1, 0.5) + gauss_logpdf(a1 - 0.4 * a2, 0.9)
        out += gauss_logpdf(y[0, 0] - 1.2 * c1 + 0.8 * a1, 0.6) + gauss_logpdf(y[1, 0] - 1.2 * c2 + 0.8 * a2, 0.6)
        return out

    ref = expected_loglik_quadrature(loglik, [0.5, -0.2, 1.0, 0.4], [0.3, 0.2, 0.25, 0.15], order=6)
    assert surrogate_q(th, y, xc, xa, w, Pc, Pa) == pytest.approx(ref, abs=1e-4)
    point = loglik([0.5, -0.2, 1.0, 0.4])
    assert surrogate_q(th, y, xc, xa, w) == pytest.approx(point, abs=1e-12)


def test_q_counts_mixing_terms(stable_example):
    tr = simulate(stable_example, SimConfig(T=50, seed=0))
    w = ModeWeights.one_hot(tr.s_c, tr.s_a, 2, 2)
    _, parts = surrogate_q(stable_example, tr.y, tr.x_c, tr.x_a, w, terms=True)
    n1 = np.sum(tr.s_c == 0)
    assert parts["pi_c"] == pytest.approx(n1 * np.log(0.7) + (50 - n1) * np.log(0.3))


def test_compiled_and_interpreted_kernels_agree(stable_example):
    if not _kernels.USING_NUMBA:
        pytest.skip("numba not active")
    tr = simulate(stable_example, SimConfig(T=200, seed=9))
    th = stable_example
    T = tr.T
    args = (np.ascontiguousarray(th.A_c), np.ascontiguousarray(th.C_c), np.ascontiguousarray(th.Sigma_c),
            np.log(np.asarray(th.pi_c)), np.ascontiguousarray(tr.y), np.zeros((T, 2, 1)),
            np.tile(np.eye(1), (T, 2, 1, 1)), np.zeros(T, dtype=np.int64), np.log(np.asarray(th.pi_a)),
            np.full(T, -1, dtype=np.int64), np.zeros(2), 10 * np.eye(2), np.ascontiguousarray(th.Sigma_m), False)
    jit = _kernels.filter_pass(*args)
    py = _kernels._filter_pass_py(*args)
    for a, b in zip(jit, py):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_numpy_fallback_matches_in_subprocess(stable_example):
    code = ("import numpy as np, ncasm; th=ncasm.example1_theta(); th=th.updated(A_c=0.9*np.array(th.A_c));"
            "tr=ncasm.simulate(th, ncasm.SimConfig(T=150, seed=1)); e=ncasm.run_estep(th, tr);"
            "print(ncasm._kernels.USING_NUMBA, repr(e.q))")
    env = dict(os.environ, NCASM_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    flag, q = out.stdout.split()
    assert flag == "False"
    tr = simulate(stable_example, SimConfig(T=150, seed=1))
    assert float(q) == pytest.approx(run_estep(stable_example, tr).q, rel=1e-12)
