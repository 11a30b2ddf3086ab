"""Hot inner loops: per-step filter recursion and chain propagation.

Every kernel is written once as plain numpy code and compiled with
``numba.njit`` at import time. Set ``NCASM_DISABLE_NUMBA=1`` to run the
uncompiled numpy versions instead (useful for debugging and for the
benchmark in ``benchmarks/bench_kernels.py``). Both paths execute the same
source, so results agree to rounding.
"""

import os

import numpy as np

_DISABLE = os.environ.get("NCASM_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLE:
        raise ImportError("numba disabled by NCASM_DISABLE_NUMBA")
    from numba import njit as _njit

    USING_NUMBA = True
except ImportError:
    USING_NUMBA = False


def _jit(fn):
    if USING_NUMBA:
        return _njit(cache=True)(fn)
    return fn


LOG_2PI = np.log(2.0 * np.pi)


def _is_pd_py(S):
    return np.linalg.eigvalsh(S)[0] > 0.0


def _gauss_logpdf_py(r, S):
    # S must be positive definite; caller checks.
    L = np.linalg.cholesky(S)
    z = np.linalg.solve(L, r)
    logdet = 0.0
    for i in range(L.shape[0]):
        logdet += np.log(L[i, i])
    return -0.5 * np.dot(z, z) - logdet - 0.5 * r.shape[0] * LOG_2PI


def _predict_py(x, P, A, Sig):
    xp = A @ x
    Pp = A @ P @ A.T + Sig
    return xp, 0.5 * (Pp + Pp.T)


def _innovation_cov_py(Pc, Pa, Cc, Ca, Sm):
    S = Cc @ Pc @ Cc.T + Ca @ Pa @ Ca.T + Sm
    return 0.5 * (S + S.T)


def _correct_one_py(xp, Pp, C, y, other_mean, S):
    """Correct one chain given the shared innovation covariance ``S``.

    Returns (x_post, P_post, K). ``other_mean`` is C_other @ x_other_prior.
    """
    PCt = Pp @ C.T
    # K = P C^T S^{-1}, computed as solve(S^T, (P C^T)^T)^T with S symmetric
    K = np.linalg.solve(S, PCt.T).T
    innov = y - C @ xp - other_mean
    x = xp + K @ innov
    P = (np.eye(xp.shape[0]) - K @ C) @ Pp
    return x, 0.5 * (P + P.T), K


_is_pd = _jit(_is_pd_py)
gauss_logpdf = _jit(_gauss_logpdf_py)
predict = _jit(_predict_py)
innovation_cov = _jit(_innovation_cov_py)
correct_one = _jit(_correct_one_py)


def _filter_pass_py(A, C, Sig, logpi, y, omean, ocov, omodes, ologpi, fixed, x0, P0, Sm, joint):
    """One directional pass of the coupled filter over a single chain.

    The chain is propagated in array order (callers reverse arrays for the
    anti-causal chain). At each step every candidate mode j is scored by the
    Gaussian predictive density of y(t) times pi_j; the opposite chain enters
    only through its prior contribution ``omean[t, l]`` and ``ocov[t, l]``,
    with l fixed to ``omodes[t]`` unless ``joint`` is set.

    Returns x_prior, P_prior, x_post, P_post, K, modes, other_modes,
    log_scores and the first time index with a singular innovation
    covariance (-1 when none).
    """
    T = y.shape[0]
    m = A.shape[0]
    n = A.shape[1]
    ny = y.shape[1]
    mo = omean.shape[1]

    x_prior = np.zeros((T, n))
    P_prior = np.zeros((T, n, n))
    x_post = np.zeros((T, n))
    P_post = np.zeros((T, n, n))
    K_all = np.zeros((T, n, ny))
    modes = np.zeros(T, dtype=np.int64)
    other_used = np.zeros(T, dtype=np.int64)
    log_scores = np.full((T, m), -np.inf)

    xp_c = np.zeros((m, n))
    Pp_c = np.zeros((m, n, n))

    x = x0.copy()
    P = P0.copy()
    bad = -1
    for t in range(T):
        for j in range(m):
            xp_j, Pp_j = predict(x, P, A[j], Sig[j])
            xp_c[j] = xp_j
            Pp_c[j] = Pp_j

        best = -np.inf
        jbest = -1
        lbest = omodes[t]
        for j in range(m):
            score_j = -np.inf
            l_j = omodes[t]
            l_lo = 0 if joint else omodes[t]
            l_hi = mo if joint else omodes[t] + 1
            for l in range(l_lo, l_hi):
                S = C[j] @ Pp_c[j] @ C[j].T + ocov[t, l] + Sm
                S = 0.5 * (S + S.T)
                if not _is_pd(S):
                    continue
                r = y[t] - C[j] @ xp_c[j] - omean[t, l]
                s = gauss_logpdf(r, S) + logpi[j]
                if joint:
                    s += ologpi[l]
                if s > score_j:
                    score_j = s
                    l_j = l
            log_scores[t, j] = score_j
            # strict '>' keeps the smaller index on ties
            if score_j > best:
                best = score_j
                jbest = j
                lbest = l_j

        if fixed[t] >= 0:
            jbest = fixed[t]
            if not joint:
                lbest = omodes[t]
        if jbest < 0:
            bad = t
            break

        S = C[jbest] @ Pp_c[jbest] @ C[jbest].T + ocov[t, lbest] + Sm
        S = 0.5 * (S + S.T)
        if not _is_pd(S):
            bad = t
            break
        x, P, K = correct_one(xp_c[jbest], Pp_c[jbest], C[jbest], y[t], omean[t, lbest], S)

        x_prior[t] = xp_c[jbest]
        P_prior[t] = Pp_c[jbest]
        x_post[t] = x
        P_post[t] = P
        K_all[t] = K
        modes[t] = jbest
        other_used[t] = lbest
    return x_prior, P_prior, x_post, P_post, K_all, modes, other_used, log_scores, bad


filter_pass = _jit(_filter_pass_py)


def _propagate_py(A, modes, noise, x0):
    """x(t) = A[modes[t]] x(t-1) + noise[t] in array order, x(-1) = x0."""
    T = noise.shape[0]
    n = noise.shape[1]
    out = np.zeros((T, n))
    x = x0.copy()
    for t in range(T):
        x = A[modes[t]] @ x + noise[t]
        out[t] = x
    return out


propagate = _jit(_propagate_py)
