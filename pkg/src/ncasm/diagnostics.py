"""Evaluation metrics and empirical checks of the consistency claims."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import ThetaBundle, Trajectory

logger = logging.getLogger(__name__)

DEGENERATE_ERR = 1e-10


def mode_match_rate(true_seq, est_seq) -> float:
    """Fraction of time steps with identical labels (sequences already aligned)."""
    a, b = np.asarray(true_seq), np.asarray(est_seq)
    if a.shape != b.shape:
        raise ValueError(f"sequence lengths differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty sequences")
    return float(np.mean(a == b))


def relative_state_error(x_true, x_hat) -> float:
    """||x - x_hat||^2 / ||x||^2 over the whole stacked sequence."""
    x_true, x_hat = np.asarray(x_true, dtype=float), np.asarray(x_hat, dtype=float)
    if x_true.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x_true.shape} vs {x_hat.shape}")
    den = float(np.sum(x_true * x_true))
    if den == 0.0:
        raise ValueError("true state sequence has zero norm")
    return float(np.sum((x_true - x_hat) ** 2)) / den


def output_reconstruction_error(y, y_hat) -> float:
    """||y - y_hat|| / ||y|| (plain norm ratio, not squared)."""
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    den = float(np.linalg.norm(y))
    if den == 0.0:
        raise ValueError("output sequence has zero norm")
    return float(np.linalg.norm(y - y_hat)) / den


def reconstruct_output(theta: ThetaBundle, x_c, x_a, s_c, s_a):
    """y_hat(t) = C_c(s_c(t)) x_c(t) + C_a(s_a(t)) x_a(t)."""
    return (np.einsum("tij,tj->ti", theta.C_c[np.asarray(s_c)], x_c)
            + np.einsum("tij,tj->ti", theta.C_a[np.asarray(s_a)], x_a))


@dataclass(frozen=True)
class GramSpectrum:
    mode: int  # 0-based
    lam_min: float
    lam_max: float
    trace: float
    count: int
    empty: bool


def gram_spectra(x_hat, mode_seq, m=None) -> list[GramSpectrum]:
    """Eigen-range of each mode-restricted Gram matrix sum_{s(t)=j} x(t) x(t)^T."""
    x = np.asarray(x_hat, dtype=float)
    s = np.asarray(mode_seq)
    m = int(s.max()) + 1 if m is None else m
    out = []
    for j in range(m):
        sel = s == j
        if not sel.any():
            out.append(GramSpectrum(j, 0.0, 0.0, 0.0, 0, True))
            continue
        W = x[sel].T @ x[sel]
        w = np.linalg.eigvalsh(0.5 * (W + W.T))
        out.append(GramSpectrum(j, float(w[0]), float(w[-1]), float(np.trace(W)), int(sel.sum()), False))
    return out


@dataclass(frozen=True)
class Boundedness:
    running_c: np.ndarray
    running_a: np.ndarray
    running_m: np.ndarray
    bounded: dict

    @property
    def all_bounded(self):
        return all(self.bounded.values())


def _running_mean(v):
    return np.cumsum(v) / np.arange(1, v.size + 1)


def residual_boundedness(trajectory: Trajectory, theta_hat: ThetaBundle, s_c, s_a) -> Boundedness:
    """Running means of squared residuals of the three equations at true states.

    eta_c(t) = x_c(t) - A_c(s_c(t)) x_c(t-1) for t >= 2, eta_a mirrored for
    t <= T-1, eta_m(t) = y(t) - C_c x_c(t) - C_a x_a(t). A curve counts as
    bounded when its final value is at most twice its value at T/2.
    """
    if not trajectory.has_states:
        raise ValueError("residual boundedness needs true states")
    s_c, s_a = np.asarray(s_c), np.asarray(s_a)
    x_c, x_a, y = trajectory.x_c, trajectory.x_a, trajectory.y
    eta_c = x_c[1:] - np.einsum("tij,tj->ti", theta_hat.A_c[s_c[1:]], x_c[:-1])
    eta_a = x_a[:-1] - np.einsum("tij,tj->ti", theta_hat.A_a[s_a[:-1]], x_a[1:])
    eta_m = y - reconstruct_output(theta_hat, x_c, x_a, s_c, s_a)
    curves = {name: _running_mean(np.sum(e * e, axis=1)) for name, e in
              (("c", eta_c), ("a", eta_a), ("m", eta_m))}
    bounded = {}
    for name, r in curves.items():
        half = r[r.size // 2 - 1] if r.size >= 2 else r[-1]
        bounded[name] = bool(np.isfinite(r[-1]) and r[-1] <= 2.0 * half + 1e-300)
    return Boundedness(curves["c"], curves["a"], curves["m"], bounded)


# ------------------------------------------------------------ rate probe


def rate_regressor(T):
    T = np.asarray(T, dtype=float)
    return np.sqrt(np.log(T) / T)


def matrix_errors(theta_hat: ThetaBundle, theta: ThetaBundle) -> dict:
    """Max absolute entry error of every per-mode A and C matrix (labels already aligned)."""
    out = {}
    for key in ("A_c", "C_c", "A_a", "C_a"):
        est, tru = getattr(theta_hat, key), getattr(theta, key)
        for j in range(tru.shape[0]):
            out[f"{key}({j + 1})"] = float(np.max(np.abs(est[j] - tru[j])))
    return out


def loglog_slope(horizons, errors):
    """Least-squares slope of log(error) against log(sqrt(log T / T))."""
    x = np.log(rate_regressor(horizons))
    y = np.log(np.asarray(errors, dtype=float))
    if x.size < 2 or not np.all(np.isfinite(y)):
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class RateProbe:
    """Per-horizon parameter errors and Gram spectra plus fitted slopes.

    ``errors[name]`` has shape (len(horizons), len(seeds)), NaN for failed
    trials. ``lam_min``/``lam_max`` hold the smallest/largest Gram
    eigenvalue over all modes of both chains, same shape.
    """

    horizons: list
    seeds: list
    errors: dict
    lam_min: np.ndarray
    lam_max: np.ndarray
    slopes: dict = field(default_factory=dict)
    median_slope: float = float("nan")
    degenerate: bool = False
    undefined: bool = False
    failures: list = field(default_factory=list)

    def __post_init__(self):
        h = list(self.horizons)
        if any(b <= a for a, b in zip(h, h[1:])):
            raise ValueError("horizons must be strictly increasing")

    def median_errors(self):
        # horizons where every fit failed give NaN
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return {k: np.nanmedian(v, axis=1) for k, v in self.errors.items()}

    def monotone_non_increasing(self):
        """Per matrix: median error never grows with T."""
        return {k: bool(np.all(np.diff(v) <= 0)) for k, v in self.median_errors().items()}

    def rows(self):
        out = []
        for name, E in self.errors.items():
            for hi, T in enumerate(self.horizons):
                for si, seed in enumerate(self.seeds):
                    out.append({"T": T, "seed": seed, "matrix": name, "error": E[hi, si],
                                "lam_min": self.lam_min[hi, si], "lam_max": self.lam_max[hi, si]})
        return out

    def summary_rows(self):
        med = self.median_errors()
        mono = self.monotone_non_increasing()
        flags = ";".join(f for f, on in (("degenerate", self.degenerate), ("undefined", self.undefined)) if on)
        return [{"matrix": k, "slope": self.slopes.get(k, float("nan")), "monotone": mono[k],
                 **{f"median_T{T}": med[k][i] for i, T in enumerate(self.horizons)}, "flags": flags}
                for k in self.errors]


def finalize_rate_probe(probe: RateProbe) -> RateProbe:
    """Fill slopes and the degenerate / undefined flags from the raw errors."""
    med = probe.median_errors()
    all_err = np.concatenate([v.ravel() for v in probe.errors.values()]) if probe.errors else np.array([])
    finite = all_err[np.isfinite(all_err)]
    probe.undefined = len(probe.horizons) < 2
    probe.degenerate = finite.size > 0 and bool(np.all(finite < DEGENERATE_ERR))
    if probe.undefined or probe.degenerate:
        probe.slopes = {k: float("nan") for k in med}
        probe.median_slope = float("nan")
        return probe
    probe.slopes = {k: loglog_slope(probe.horizons, v) for k, v in med.items()}
    vals = [s for s in probe.slopes.values() if np.isfinite(s)]
    probe.median_slope = float(np.median(vals)) if vals else float("nan")
    return probe


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, rows, fieldnames=None):
    """Write dict rows with floats at 17 significant digits."""
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fieldnames)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in fieldnames])
