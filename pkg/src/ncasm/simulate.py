"""Trajectory generation for the switching non-causal model.

RNG: numpy's PCG64 behind ``np.random.default_rng(seed)``. Draw order is
fixed: s_c, s_a (categorical), then standard normals for v_c, v_a, v_m,
each as a (T, n) block. Noise for mode k is ``z @ F_k.T`` with ``F_k`` a
square-root factor of the mode covariance (Cholesky when positive
definite, clipped eigendecomposition when only semidefinite).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .model import EIG_TOL, ThetaBundle, Trajectory, validate_theta


class SimulationDivergenceError(RuntimeError):
    """A chain overflowed to a non-finite value."""

    def __init__(self, chain, t):
        self.chain = chain
        self.t = t  # 1-based time of first non-finite state
        super().__init__(
            f"{chain} chain diverged: state non-finite at t={t}; the parameters are not "
            "stable in the average sense over this horizon"
        )


class CovarianceFactorError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    T: int
    seed: int = 0
    x_c_init: np.ndarray | None = None  # plays the role of x_c(0)
    x_a_terminal: np.ndarray | None = None  # plays the role of x_a(T+1)

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 2:
            raise ValueError("T >= 2 required")


def noise_factor(S, name="covariance"):
    """Square-root factor F with F @ F.T == S for a symmetric PSD ``S``."""
    S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(S)
    if w[0] < -EIG_TOL:
        raise CovarianceFactorError(f"{name} is not PSD (min eigenvalue {w[0]:.6g})")
    return V * np.sqrt(np.clip(w, 0.0, None))


def draw_mode_sequences(theta: ThetaBundle, T: int, rng: np.random.Generator):
    """i.i.d. categorical draws for the causal and anti-causal chains (0-based)."""
    s_c = rng.choice(theta.dims.m_c, size=T, p=np.asarray(theta.pi_c))
    s_a = rng.choice(theta.dims.m_a, size=T, p=np.asarray(theta.pi_a))
    return s_c.astype(np.int64), s_a.astype(np.int64)


def _mode_noise(factors, modes, z):
    return np.einsum("tij,tj->ti", factors[modes], z)


def _first_bad(x):
    bad = ~np.all(np.isfinite(x), axis=1)
    return int(np.argmax(bad)) if bad.any() else -1


def simulate(theta: ThetaBundle, cfg: SimConfig) -> Trajectory:
    """Simulate t = 1..T with all ground truth populated."""
    validate_theta(theta)
    d = theta.dims
    T = int(cfg.T)
    rng = np.random.default_rng(cfg.seed)

    Fc = np.array([noise_factor(S, f"Sigma_c({j + 1})") for j, S in enumerate(theta.Sigma_c)])
    Fa = np.array([noise_factor(S, f"Sigma_a({l + 1})") for l, S in enumerate(theta.Sigma_a)])
    Fm = noise_factor(theta.Sigma_m, "Sigma_m")

    s_c, s_a = draw_mode_sequences(theta, T, rng)
    v_c = _mode_noise(Fc, s_c, rng.standard_normal((T, d.n_xc)))
    v_a = _mode_noise(Fa, s_a, rng.standard_normal((T, d.n_xa)))
    v_m = rng.standard_normal((T, d.n_y)) @ Fm.T

    xc0 = np.zeros(d.n_xc) if cfg.x_c_init is None else np.asarray(cfg.x_c_init, dtype=float)
    xaT = np.zeros(d.n_xa) if cfg.x_a_terminal is None else np.asarray(cfg.x_a_terminal, dtype=float)

    with np.errstate(over="ignore", invalid="ignore"):
        x_c = _kernels.propagate(np.ascontiguousarray(theta.A_c), s_c, v_c, xc0)
        # anti-causal chain: run the same recursion on the time-reversed arrays
        x_a = _kernels.propagate(
            np.ascontiguousarray(theta.A_a), s_a[::-1].copy(), v_a[::-1].copy(), xaT
        )[::-1].copy()

    t_bad = _first_bad(x_c)
    if t_bad >= 0:
        raise SimulationDivergenceError("causal", t_bad + 1)
    t_bad = _first_bad(x_a[::-1])
    if t_bad >= 0:
        raise SimulationDivergenceError("anti-causal", T - t_bad)

    y = (
        np.einsum("tij,tj->ti", theta.C_c[s_c], x_c)
        + np.einsum("tij,tj->ti", theta.C_a[s_a], x_a)
        + v_m
    )
    if not np.all(np.isfinite(y)):
        raise SimulationDivergenceError("output", _first_bad(y) + 1)
    return Trajectory(y=y, x_c=x_c, x_a=x_a, s_c=s_c, s_a=s_a)


def with_noise_level(theta: ThetaBundle, level: float, include_measurement: bool = False) -> ThetaBundle:
    """Copy of ``theta`` with every Sigma_c(j), Sigma_a(l) set to ``level * I``."""
    d = theta.dims
    kw = dict(
        Sigma_c=np.array([level * np.eye(d.n_xc)] * d.m_c),
        Sigma_a=np.array([level * np.eye(d.n_xa)] * d.m_a),
    )
    if include_measurement:
        kw["Sigma_m"] = level * np.eye(d.n_y)
    return theta.updated(**kw)
