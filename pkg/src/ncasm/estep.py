"""E-step: hard mode classification and the coupled two-chain Kalman filter.

Each sweep runs a forward pass over the causal chain, then a backward pass
over the anti-causal chain. Both passes share the innovation
``y - C_c x_c^- - C_a x_a^-``; when one chain is corrected, the other chain
enters through its prior mean and prior covariance. Gains are
``K = P^- C^T S^{-1}`` with
``S = C_c P_c^- C_c^T + C_a P_a^- C_a^T + Sigma_m``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .model import AntiCausalModeParams, CausalModeParams, ThetaBundle, Trajectory

logger = logging.getLogger(__name__)

COV_FLOOR = 1e-12


class SingularInnovationError(np.linalg.LinAlgError):
    def __init__(self, t, chain=None):
        self.t = t  # 1-based
        where = f" during the {chain} pass" if chain else ""
        super().__init__(f"innovation covariance not positive definite at t={t}{where}")


@dataclass(frozen=True)
class ModeWeights:
    """Per-time posterior mode weights, rows sum to one."""

    w_c: np.ndarray
    w_a: np.ndarray

    @property
    def s_c(self):
        return np.argmax(self.w_c, axis=1)

    @property
    def s_a(self):
        return np.argmax(self.w_a, axis=1)

    @property
    def is_hard(self):
        return bool(np.all((self.w_c == 0) | (self.w_c == 1)) and np.all((self.w_a == 0) | (self.w_a == 1)))

    @classmethod
    def one_hot(cls, s_c, s_a, m_c, m_a):
        return cls(np.eye(m_c)[np.asarray(s_c)], np.eye(m_a)[np.asarray(s_a)])


@dataclass(frozen=True)
class FilterState:
    xhat_c_prior: np.ndarray
    xhat_c_post: np.ndarray
    xhat_a_prior: np.ndarray
    xhat_a_post: np.ndarray
    P_c_prior: np.ndarray
    P_c_post: np.ndarray
    P_a_prior: np.ndarray
    P_a_post: np.ndarray
    K_c: np.ndarray
    K_a: np.ndarray

    @property
    def T(self):
        return self.xhat_c_post.shape[0]


@dataclass(frozen=True)
class EStepOptions:
    """Knobs of the E-step.

    ``diffuse`` scales the identity covariance used for the opposite chain's
    priors on the first EM iteration and for both chains' boundary states
    unless ``P_c0`` / ``P_a_end`` are given. ``x_c0`` and ``x_a_end`` are the
    boundary means (x_c(0) and x_a(T+1)); they default to zero.
    """

    sweeps: int = 2
    diffuse: float = 10.0
    soft_weights: bool = False
    joint_mode_search: bool = False
    x_c0: np.ndarray | None = None
    P_c0: np.ndarray | None = None
    x_a_end: np.ndarray | None = None
    P_a_end: np.ndarray | None = None

    def __post_init__(self):
        if self.sweeps < 1:
            raise ValueError("sweeps must be >= 1")
        if self.diffuse < 0:
            raise ValueError("diffuse must be non-negative")

    def boundaries(self, dims):
        x_c0 = np.zeros(dims.n_xc) if self.x_c0 is None else np.asarray(self.x_c0, dtype=float)
        x_a_end = np.zeros(dims.n_xa) if self.x_a_end is None else np.asarray(self.x_a_end, dtype=float)
        P_c0 = self.diffuse * np.eye(dims.n_xc) if self.P_c0 is None else np.asarray(self.P_c0, dtype=float)
        P_a_end = self.diffuse * np.eye(dims.n_xa) if self.P_a_end is None else np.asarray(self.P_a_end, dtype=float)
        return x_c0, P_c0, x_a_end, P_a_end


@dataclass(frozen=True)
class EStepResult:
    states: FilterState
    weights: ModeWeights
    s_c: np.ndarray
    s_a: np.ndarray
    q: float
    q_terms: dict
    log_scores_c: np.ndarray
    log_scores_a: np.ndarray


class Correction(NamedTuple):
    xhat_c_post: np.ndarray
    xhat_a_post: np.ndarray
    P_c_post: np.ndarray
    P_a_post: np.ndarray
    K_c: np.ndarray
    K_a: np.ndarray


def _c(a):
    return np.ascontiguousarray(a, dtype=float)


def predict_causal(xhat_prev, P_prev, mode: CausalModeParams):
    """x^- = A_c x(t-1), P^- = A_c P(t-1) A_c^T + Sigma_c."""
    return _kernels.predict(_c(xhat_prev), _c(P_prev), _c(mode.A_c), _c(mode.Sigma_c))


def predict_anticausal(xhat_next, P_next, mode: AntiCausalModeParams):
    """x^- = A_a x(t+1), P^- = A_a P(t+1) A_a^T + Sigma_a."""
    return _kernels.predict(_c(xhat_next), _c(P_next), _c(mode.A_a), _c(mode.Sigma_a))


def innovation_covariance(P_c_prior, P_a_prior, C_c, C_a, Sigma_m):
    return _kernels.innovation_cov(_c(P_c_prior), _c(P_a_prior), _c(C_c), _c(C_a), _c(np.atleast_2d(Sigma_m)))


def correct(xhat_c_prior, xhat_a_prior, P_c_prior, P_a_prior, y_t, C_c, C_a, Sigma_m, t=None) -> Correction:
    """Joint measurement update of both chains with the shared innovation."""
    xc, xa, Pc, Pa = _c(xhat_c_prior), _c(xhat_a_prior), _c(P_c_prior), _c(P_a_prior)
    Cc, Ca, y_t = _c(C_c), _c(C_a), _c(np.atleast_1d(y_t))
    S = innovation_covariance(Pc, Pa, Cc, Ca, Sigma_m)
    if np.linalg.eigvalsh(S)[0] <= 0.0:
        raise SingularInnovationError(t)
    xc_post, Pc_post, Kc = _kernels.correct_one(xc, Pc, Cc, y_t, Ca @ xa, S)
    xa_post, Pa_post, Ka = _kernels.correct_one(xa, Pa, Ca, y_t, Cc @ xc, S)
    return Correction(xc_post, xa_post, Pc_post, Pa_post, Kc, Ka)


def posterior_covariance_for_gain(K, P_own, P_other, C_own, C_other, Sigma_m):
    """Full quadratic form of the posterior error covariance for an arbitrary gain.

    (I - K C) P (I - K C)^T + K C_o P_o C_o^T K^T + K Sigma_m K^T. At the optimal
    gain this collapses to (I - K C) P.
    """
    I = np.eye(P_own.shape[0])
    G = I - K @ C_own
    return G @ P_own @ G.T + K @ C_other @ P_other @ C_other.T @ K.T + K @ np.atleast_2d(Sigma_m) @ K.T


# ------------------------------------------------------------ batched helpers


def _logpdf_rows(R, S):
    """log N(r; 0, S) for every row of R (T, n); S floored to stay PD."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    w = np.maximum(w, COV_FLOOR * max(1.0, float(w[-1])))
    Z = (R @ V) / np.sqrt(w)
    n = S.shape[0]
    return -0.5 * np.sum(Z * Z, axis=1) - 0.5 * np.sum(np.log(w)) - 0.5 * n * _kernels.LOG_2PI


def _batched_logpdf(R, S):
    """log N(R[t]; 0, S[t]) with per-row covariances; -inf where S[t] is not PD."""
    out = np.full(R.shape[0], -np.inf)
    w = np.linalg.eigvalsh(S)
    ok = w[:, 0] > 0
    if ok.any():
        L = np.linalg.cholesky(S[ok])
        z = np.linalg.solve(L, R[ok][..., None])[..., 0]
        logdet = np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        out[ok] = -0.5 * np.sum(z * z, axis=1) - logdet - 0.5 * R.shape[1] * _kernels.LOG_2PI
    return out


def _safe_log(p):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(p, dtype=float))


def _other_terms(C, x_prior, P_prior):
    mean = np.einsum("lij,tj->tli", C, x_prior)
    cov = np.einsum("lij,tjk,lmk->tlim", C, P_prior, C)
    return np.ascontiguousarray(mean), np.ascontiguousarray(0.5 * (cov + np.swapaxes(cov, -1, -2)))


def _softmax_rows(L):
    mx = np.max(L, axis=1, keepdims=True)
    mx[~np.isfinite(mx)] = 0.0
    E = np.exp(L - mx)
    s = E.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return E / s


def outputs_of(trajectory) -> np.ndarray:
    y = trajectory.y if isinstance(trajectory, Trajectory) else trajectory
    y = np.asarray(y, dtype=float)
    return y[:, None] if y.ndim == 1 else y


def classify_modes(theta: ThetaBundle, trajectory, fs: FilterState, s_c, s_a, options: EStepOptions | None = None):
    """Re-derive mode assignments from stored filter quantities.

    The causal mode at t is scored from x_c_post(t-1) propagated through each
    candidate A_c(j), with the anti-causal chain fixed at mode ``s_a[t]`` and
    its stored prior; the anti-causal chain is mirrored using ``s_c``.
    Returns (ModeWeights, s_c_hat, s_a_hat).
    """
    options = options or EStepOptions()
    y = outputs_of(trajectory)
    T = y.shape[0]
    x_c0, P_c0, x_a_end, P_a_end = options.boundaries(theta.dims)
    s_c = np.asarray(s_c)
    s_a = np.asarray(s_a)
    Sm = np.asarray(theta.Sigma_m)

    def scores(A, C, Sig, logpi, x_prev, P_prev, C_o, x_o, P_o, s_o):
        m = A.shape[0]
        Co = C_o[s_o]
        o_mean = np.einsum("tij,tj->ti", Co, x_o)
        o_cov = np.einsum("tij,tjk,tlk->til", Co, P_o, Co)
        out = np.empty((T, m))
        for j in range(m):
            xp = x_prev @ A[j].T
            Pp = np.einsum("ij,tjk,lk->til", A[j], P_prev, A[j]) + Sig[j]
            S = np.einsum("ij,tjk,lk->til", C[j], Pp, C[j]) + o_cov + Sm
            S = 0.5 * (S + np.swapaxes(S, 1, 2))
            R = y - xp @ C[j].T - o_mean
            out[:, j] = _batched_logpdf(R, S) + logpi[j]
        return out

    xc_prev = np.vstack([x_c0[None], fs.xhat_c_post[:-1]])
    Pc_prev = np.concatenate([P_c0[None], fs.P_c_post[:-1]])
    ls_c = scores(theta.A_c, theta.C_c, theta.Sigma_c, _safe_log(theta.pi_c), xc_prev, Pc_prev,
                  theta.C_a, fs.xhat_a_prior, fs.P_a_prior, s_a)
    xa_next = np.vstack([fs.xhat_a_post[1:], x_a_end[None]])
    Pa_next = np.concatenate([fs.P_a_post[1:], P_a_end[None]])
    ls_a = scores(theta.A_a, theta.C_a, theta.Sigma_a, _safe_log(theta.pi_a), xa_next, Pa_next,
                  theta.C_c, fs.xhat_c_prior, fs.P_c_prior, s_c)
    new_c = np.argmax(ls_c, axis=1)
    new_a = np.argmax(ls_a, axis=1)
    if options.soft_weights:
        weights = ModeWeights(_softmax_rows(ls_c), _softmax_rows(ls_a))
    else:
        weights = ModeWeights.one_hot(new_c, new_a, theta.dims.m_c, theta.dims.m_a)
    return weights, new_c, new_a


def surrogate_q(theta: ThetaBundle, y, x_c, x_a, weights: ModeWeights, P_c=None, P_a=None, terms=False):
    """Surrogate complete-data log-likelihood at point state estimates.

    Sums, with the given mode weights, the output term, the causal
    transition terms for t=2..T, the anti-causal ones for t=1..T-1 and the
    log mixing probabilities. These are exactly the residuals the M-step
    regresses on, so the M-step maximizes this value for fixed estimates.

    When posterior covariances ``P_c``/``P_a`` are given, the expectation
    over independent per-time Gaussian posteriors is taken instead (adds the
    usual -1/2 tr(Sigma^-1 Cov) terms; lag-one cross-covariances are
    treated as zero).
    """
    d = theta.dims
    y = outputs_of(y)
    x_c = np.asarray(x_c, dtype=float)
    x_a = np.asarray(x_a, dtype=float)
    w_c, w_a = weights.w_c, weights.w_a

    def inv_floor(S):
        w, V = np.linalg.eigh(0.5 * (S + S.T))
        w = np.maximum(w, COV_FLOOR * max(1.0, float(w[-1])))
        return (V / w) @ V.T

    def chain_term(w, x, x_reg, A, Sig, P, P_reg):
        total = 0.0
        for j in range(A.shape[0]):
            sel = w[:, j] > 0
            if not sel.any():
                continue
            R = x[sel] - x_reg[sel] @ A[j].T
            total += float(np.dot(w[sel, j], _logpdf_rows(R, Sig[j])))
            if P is not None:
                cov = P[sel] + np.einsum("ik,tkl,jl->tij", A[j], P_reg[sel], A[j])
                tr = np.einsum("ij,tji->t", inv_floor(Sig[j]), cov)
                total -= 0.5 * float(np.dot(w[sel, j], tr))
        return total

    def pi_term(w, pi):
        mass = w.sum(axis=0)
        logpi = _safe_log(pi)
        on = mass > 0
        return float(np.dot(mass[on], logpi[on]))

    P_c = None if P_c is None else np.asarray(P_c, dtype=float)
    P_a = None if P_a is None else np.asarray(P_a, dtype=float)
    q_c = chain_term(w_c[1:], x_c[1:], x_c[:-1], theta.A_c, theta.Sigma_c,
                     None if P_c is None else P_c[1:], None if P_c is None else P_c[:-1])
    q_a = chain_term(w_a[:-1], x_a[:-1], x_a[1:], theta.A_a, theta.Sigma_a,
                     None if P_a is None else P_a[:-1], None if P_a is None else P_a[1:])
    q_y = 0.0
    Sm_inv = inv_floor(np.asarray(theta.Sigma_m)) if P_c is not None else None
    for j in range(d.m_c):
        for l in range(d.m_a):
            w = w_c[:, j] * w_a[:, l]
            sel = w > 0
            if not sel.any():
                continue
            Cc, Ca = theta.C_c[j], theta.C_a[l]
            R = y[sel] - x_c[sel] @ Cc.T - x_a[sel] @ Ca.T
            q_y += float(np.dot(w[sel], _logpdf_rows(R, theta.Sigma_m)))
            if Sm_inv is not None:
                cov = np.einsum("ik,tkl,jl->tij", Cc, P_c[sel], Cc) + np.einsum("ik,tkl,jl->tij", Ca, P_a[sel], Ca)
                q_y -= 0.5 * float(np.dot(w[sel], np.einsum("ij,tji->t", Sm_inv, cov)))
    parts = {
        "output": q_y,
        "causal": q_c,
        "anticausal": q_a,
        "pi_c": pi_term(w_c, theta.pi_c),
        "pi_a": pi_term(w_a, theta.pi_a),
    }
    total = float(sum(parts.values()))
    return (total, parts) if terms else total


def run_estep(theta: ThetaBundle, trajectory, prev: EStepResult | None = None,
              options: EStepOptions | None = None, fixed_c=None, fixed_a=None) -> EStepResult:
    """One E-step: ``options.sweeps`` forward/backward sweeps, then Q.

    ``prev`` supplies the anti-causal priors and modes for the first forward
    pass; without it they are zero-mean with ``diffuse * I`` covariance and
    the most probable anti-causal mode. ``fixed_c`` / ``fixed_a`` freeze the
    mode sequences (classification is skipped where they are >= 0).
    """
    options = options or EStepOptions()
    d = theta.dims
    y = _c(outputs_of(trajectory))
    T = y.shape[0]
    if y.shape[1] != d.n_y:
        raise ValueError(f"outputs have {y.shape[1]} columns, theta expects n_y={d.n_y}")
    x_c0, P_c0, x_a_end, P_a_end = options.boundaries(d)

    if prev is None:
        xa_pr = np.zeros((T, d.n_xa))
        Pa_pr = np.broadcast_to(options.diffuse * np.eye(d.n_xa), (T, d.n_xa, d.n_xa)).copy()
        s_a = np.full(T, int(np.argmax(theta.pi_a)), dtype=np.int64)
    else:
        xa_pr = prev.states.xhat_a_prior
        Pa_pr = prev.states.P_a_prior
        s_a = np.asarray(prev.s_a, dtype=np.int64)

    fixed_c = np.full(T, -1, dtype=np.int64) if fixed_c is None else np.asarray(fixed_c, dtype=np.int64)
    fixed_a = np.full(T, -1, dtype=np.int64) if fixed_a is None else np.asarray(fixed_a, dtype=np.int64)
    if fixed_a.min() >= 0 and prev is None:
        s_a = fixed_a.copy()

    A_c, C_c, Sig_c = _c(theta.A_c), _c(theta.C_c), _c(theta.Sigma_c)
    A_a, C_a, Sig_a = _c(theta.A_a), _c(theta.C_a), _c(theta.Sigma_a)
    lp_c, lp_a = _safe_log(theta.pi_c), _safe_log(theta.pi_a)
    Sm = _c(theta.Sigma_m)
    joint = bool(options.joint_mode_search)

    for _ in range(options.sweeps):
        o_mean, o_cov = _other_terms(C_a, xa_pr, Pa_pr)
        (xc_pr, Pc_pr, xc_po, Pc_po, Kc, s_c, _, ls_c, bad) = _kernels.filter_pass(
            A_c, C_c, Sig_c, lp_c, y, o_mean, o_cov, s_a, lp_a, fixed_c, x_c0, _c(P_c0), Sm, joint
        )
        if bad >= 0:
            raise SingularInnovationError(bad + 1, "causal")

        o_mean, o_cov = _other_terms(C_c, xc_pr, Pc_pr)
        rev = _kernels.filter_pass(
            A_a, C_a, Sig_a, lp_a, y[::-1].copy(), o_mean[::-1].copy(), o_cov[::-1].copy(),
            s_c[::-1].copy(), lp_c, fixed_a[::-1].copy(), x_a_end, _c(P_a_end), Sm, joint,
        )
        if rev[-1] >= 0:
            raise SingularInnovationError(T - rev[-1], "anti-causal")
        xa_pr, Pa_pr, xa_po, Pa_po, Ka, s_a, _, ls_a = (a[::-1].copy() for a in rev[:-1])

    states = FilterState(xc_pr, xc_po, xa_pr, xa_po, Pc_pr, Pc_po, Pa_pr, Pa_po, Kc, Ka)
    if options.soft_weights:
        weights = ModeWeights(_softmax_rows(ls_c), _softmax_rows(ls_a))
    else:
        weights = ModeWeights.one_hot(s_c, s_a, d.m_c, d.m_a)
    q, parts = surrogate_q(theta, y, xc_po, xa_po, weights, terms=True)
    return EStepResult(states, weights, s_c, s_a, q, parts, ls_c, ls_a)
