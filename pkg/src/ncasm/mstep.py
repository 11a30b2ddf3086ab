"""M-step: closed-form maximizers of the surrogate Q for fixed E-step output.

Mixing weights by counting, mode matrices by weighted (switching) least
squares, covariances by weight-normalized residual outer products. The
causal regression uses t=2..T, the anti-causal one t=1..T-1, matching the
transition terms of :func:`ncasm.estep.surrogate_q`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .estep import ModeWeights, outputs_of
from .model import ThetaBundle

logger = logging.getLogger(__name__)

RIDGE_COND = 1e12
RIDGE_SCALE = 1e-8


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class RegressionAccumulator:
    """Weighted normal-equation sums for ``response ~ B @ regressor``."""

    gram: np.ndarray
    cross: np.ndarray
    count: int = 0
    mass: float = 0.0

    @classmethod
    def empty(cls, n_reg, n_resp):
        return cls(np.zeros((n_reg, n_reg)), np.zeros((n_resp, n_reg)))

    def add(self, X, Y, w=None):
        X = np.atleast_2d(X)
        Y = np.atleast_2d(Y)
        w = np.ones(X.shape[0]) if w is None else np.asarray(w, dtype=float)
        Xw = X * w[:, None]
        self.gram += Xw.T @ X
        self.cross += Y.T @ Xw
        self.count += int(np.count_nonzero(w))
        self.mass += float(w.sum())
        return self

    def solve(self, name="regression"):
        return solve_normal(self.gram, self.cross, name)


def solve_normal(gram, cross, name="regression"):
    """B minimizing the weighted RSS, i.e. B @ gram = cross.

    A ridge of 1e-8 * tr(gram)/n is added when cond(gram) > 1e12; the solve
    is a rank-revealing QR (LAPACK gelsy), never an explicit inverse.
    """
    gram = 0.5 * (gram + gram.T)
    n = gram.shape[0]
    tr = float(np.trace(gram))
    if not np.isfinite(tr):
        raise RankDeficientError(f"{name}: non-finite Gram matrix")
    if tr <= 0.0:
        raise RankDeficientError(f"{name}: Gram matrix is zero; more (or non-degenerate) data is needed")
    if np.linalg.cond(gram) > RIDGE_COND:
        gram = gram + RIDGE_SCALE * tr / n * np.eye(n)
    sol, _, rank, _ = scipy.linalg.lstsq(gram, cross.T, lapack_driver="gelsy")
    if rank < n:
        raise RankDeficientError(f"{name}: Gram matrix rank {rank} < {n} after ridge; more data is needed")
    return sol.T


def update_pi(weights: ModeWeights):
    """pi_j = total weight of mode j / total weight."""
    w_c, w_a = np.asarray(weights.w_c), np.asarray(weights.w_a)
    return w_c.sum(axis=0) / w_c.sum(), w_a.sum(axis=0) / w_a.sum()


def _zero_mass(name, prev):
    if prev is None:
        raise RankDeficientError(f"{name}: mode has zero weight and no previous value to keep")
    logger.warning("%s: mode has zero weight mass; keeping previous value", name)
    return np.array(prev, dtype=float)


def update_A_causal(j, x_c_hat, weights: ModeWeights, prev=None):
    """A_c(j) = argmin sum_{t>=2} w_c[t,j] ||x_c(t) - A x_c(t-1)||^2."""
    x = np.asarray(x_c_hat, dtype=float)
    w = np.asarray(weights.w_c)[1:, j]
    if not np.any(w > 0):
        return _zero_mass(f"A_c({j + 1})", prev)
    acc = RegressionAccumulator.empty(x.shape[1], x.shape[1]).add(x[:-1], x[1:], w)
    return acc.solve(f"A_c({j + 1})")


def update_A_anticausal(l, x_a_hat, weights: ModeWeights, prev=None):
    """A_a(l) = argmin sum_{t<=T-1} w_a[t,l] ||x_a(t) - A x_a(t+1)||^2."""
    x = np.asarray(x_a_hat, dtype=float)
    w = np.asarray(weights.w_a)[:-1, l]
    if not np.any(w > 0):
        return _zero_mass(f"A_a({l + 1})", prev)
    acc = RegressionAccumulator.empty(x.shape[1], x.shape[1]).add(x[1:], x[:-1], w)
    return acc.solve(f"A_a({l + 1})")


def update_C_joint(x_c_hat, x_a_hat, y, weights: ModeWeights, prev_C_c=None, prev_C_a=None):
    """All C_c(j), C_a(l) from one block least-squares problem.

    The regressor at time t holds x_c(t) in block s_c(t) and x_a(t) in block
    m_c + s_a(t), zeros elsewhere. With soft weights the Gram blocks are the
    weight-averaged outer products over all (j, l) pairs, so the solution
    maximizes the full output term of Q. Modes without weight keep their
    previous matrices and are dropped from the system.
    """
    x_c = np.asarray(x_c_hat, dtype=float)
    x_a = np.asarray(x_a_hat, dtype=float)
    y = outputs_of(y)
    w_c, w_a = np.asarray(weights.w_c), np.asarray(weights.w_a)
    m_c, m_a = w_c.shape[1], w_a.shape[1]
    n_c, n_a, n_y = x_c.shape[1], x_a.shape[1], y.shape[1]

    act_c = [j for j in range(m_c) if np.any(w_c[:, j] > 0)]
    act_a = [l for l in range(m_a) if np.any(w_a[:, l] > 0)]
    blocks = [("c", j) for j in act_c] + [("a", l) for l in act_a]
    offs = np.cumsum([0] + [n_c if k == "c" else n_a for k, _ in blocks])
    N = int(offs[-1])
    G = np.zeros((N, N))
    B = np.zeros((n_y, N))

    for bi, (ki, i) in enumerate(blocks):
        si = slice(offs[bi], offs[bi + 1])
        wi = (w_c if ki == "c" else w_a)[:, i]
        xi = x_c if ki == "c" else x_a
        B[:, si] = y.T @ (xi * wi[:, None])
        for bk, (kk, k) in enumerate(blocks):
            if bk < bi:
                continue
            sk = slice(offs[bk], offs[bk + 1])
            wk = (w_c if kk == "c" else w_a)[:, k]
            xk = x_c if kk == "c" else x_a
            if ki == kk:
                if i != k:
                    continue  # a chain occupies one block per time
                wt = wi
            else:
                wt = wi * wk
            G[si, sk] = (xi * wt[:, None]).T @ xk
            G[sk, si] = G[si, sk].T

    sol = solve_normal(G, B, "C (joint)")
    C_c = np.zeros((m_c, n_y, n_c)) if prev_C_c is None else np.array(prev_C_c, dtype=float)
    C_a = np.zeros((m_a, n_y, n_a)) if prev_C_a is None else np.array(prev_C_a, dtype=float)
    for j in set(range(m_c)) - set(act_c):
        C_c[j] = _zero_mass(f"C_c({j + 1})", None if prev_C_c is None else prev_C_c[j])
    for l in set(range(m_a)) - set(act_a):
        C_a[l] = _zero_mass(f"C_a({l + 1})", None if prev_C_a is None else prev_C_a[l])
    for bi, (ki, i) in enumerate(blocks):
        block = sol[:, offs[bi]:offs[bi + 1]]
        if ki == "c":
            C_c[i] = block
        else:
            C_a[i] = block
    return C_c, C_a


def _weighted_cov(R, w):
    S = (R * w[:, None]).T @ R / w.sum()
    return 0.5 * (S + S.T)


def update_covariances(x_c_hat, x_a_hat, y, weights: ModeWeights, A_c, C_c, A_a, C_a,
                       prev_Sigma_c=None, prev_Sigma_a=None):
    """Residual covariances normalized by each mode's weight mass.

    Returns (Sigma_c stack, Sigma_a stack, Sigma_m). Sigma_m averages over
    all (j, l) pairs with weight w_c[t,j] w_a[t,l], whose total is T.
    """
    x_c = np.asarray(x_c_hat, dtype=float)
    x_a = np.asarray(x_a_hat, dtype=float)
    y = outputs_of(y)
    w_c, w_a = np.asarray(weights.w_c), np.asarray(weights.w_a)
    A_c, C_c, A_a, C_a = (np.asarray(a, dtype=float) for a in (A_c, C_c, A_a, C_a))

    Sig_c = []
    for j in range(A_c.shape[0]):
        w = w_c[1:, j]
        if not np.any(w > 0):
            Sig_c.append(_zero_mass(f"Sigma_c({j + 1})", None if prev_Sigma_c is None else prev_Sigma_c[j]))
            continue
        Sig_c.append(_weighted_cov(x_c[1:] - x_c[:-1] @ A_c[j].T, w))
    Sig_a = []
    for l in range(A_a.shape[0]):
        w = w_a[:-1, l]
        if not np.any(w > 0):
            Sig_a.append(_zero_mass(f"Sigma_a({l + 1})", None if prev_Sigma_a is None else prev_Sigma_a[l]))
            continue
        Sig_a.append(_weighted_cov(x_a[:-1] - x_a[1:] @ A_a[l].T, w))

    n_y = y.shape[1]
    acc = np.zeros((n_y, n_y))
    mass = 0.0
    for j in range(C_c.shape[0]):
        for l in range(C_a.shape[0]):
            w = w_c[:, j] * w_a[:, l]
            if not np.any(w > 0):
                continue
            R = y - x_c @ C_c[j].T - x_a @ C_a[l].T
            acc += (R * w[:, None]).T @ R
            mass += float(w.sum())
    Sig_m = acc / mass
    return np.array(Sig_c), np.array(Sig_a), 0.5 * (Sig_m + Sig_m.T)


def run_mstep(theta: ThetaBundle, y, x_c_hat, x_a_hat, weights: ModeWeights) -> ThetaBundle:
    """All four updates in order: pi, A, C, then covariances at the new A, C."""
    d = theta.dims
    pi_c, pi_a = update_pi(weights)
    A_c = np.array([update_A_causal(j, x_c_hat, weights, theta.A_c[j]) for j in range(d.m_c)])
    A_a = np.array([update_A_anticausal(l, x_a_hat, weights, theta.A_a[l]) for l in range(d.m_a)])
    C_c, C_a = update_C_joint(x_c_hat, x_a_hat, y, weights, theta.C_c, theta.C_a)
    Sig_c, Sig_a, Sig_m = update_covariances(
        x_c_hat, x_a_hat, y, weights, A_c, C_c, A_a, C_a, theta.Sigma_c, theta.Sigma_a
    )
    return ThetaBundle.from_arrays(
        A_c=A_c, C_c=C_c, Sigma_c=Sig_c, A_a=A_a, C_a=C_a, Sigma_a=Sig_a,
        pi_c=pi_c, pi_a=pi_a, Sigma_m=Sig_m,
    )
