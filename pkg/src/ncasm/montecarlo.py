"""Repeated simulate-and-identify trials and the rate probe.

Trial seeds come from ``np.random.SeedSequence(master_seed).spawn(n)`` in a
fixed order, trials run in a process pool bounded by ``jobs``, and results
are collected in submission order, so aggregates do not depend on ``jobs``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .diagnostics import RateProbe, finalize_rate_probe, gram_spectra, matrix_errors, mode_match_rate
from .em import EmConfig, EmError, align_modes, fit
from .model import ThetaBundle
from .simulate import SimConfig, SimulationDivergenceError, simulate, with_noise_level

logger = logging.getLogger(__name__)


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def trial_seeds(master_seed, n):
    """(simulation seed, EM seed) per trial, spawned deterministically."""
    return [tuple(int(v) for v in child.generate_state(2, dtype=np.uint64))
            for child in np.random.SeedSequence(master_seed).spawn(n)]


@dataclass(frozen=True)
class TrialResult:
    level: float
    trial: int
    status: str  # "ok" or a failure tag
    match_c: float = float("nan")
    match_a: float = float("nan")
    iterations: int = 0
    message: str = ""


def _identify(theta, T, sim_seed, em_seed, cfg):
    traj = simulate(theta, SimConfig(T=T, seed=sim_seed))
    report = fit(traj, theta.dims, replace(cfg, seed=em_seed), truth=theta)
    al = align_modes((*report.final_modes, report.final_theta), (traj.s_c, traj.s_a, theta))
    return traj, report, al


def _failure_tag(exc):
    if isinstance(exc, SimulationDivergenceError):
        return "diverged"
    if isinstance(exc, EmError):
        return exc.report.stop_reason or "error"
    return "error"


def _run_trial(task):
    theta, level, trial, T, sim_seed, em_seed, cfg = task
    try:
        traj, report, al = _identify(theta, T, sim_seed, em_seed, cfg)
    except (SimulationDivergenceError, EmError, np.linalg.LinAlgError, ValueError) as exc:
        return TrialResult(level, trial, _failure_tag(exc), message=str(exc))
    return TrialResult(level, trial, "ok", mode_match_rate(traj.s_c, al.s_c),
                       mode_match_rate(traj.s_a, al.s_a), len(report.iterates))


@dataclass(frozen=True)
class LevelSummary:
    level: float
    n_ok: int
    n_failed: int
    mean_c: float
    var_c: float
    mean_a: float
    var_a: float


def run_montecarlo(theta: ThetaBundle, levels, trials, T, master_seed=0, jobs=1,
                   cfg: EmConfig = EmConfig(init="perturb", rho=0.2), include_measurement=True):
    """Match-rate statistics per noise level.

    Every noise covariance (Sigma_m too unless ``include_measurement`` is
    off) is set to ``level * I``. Returns (per-trial results, per-level
    summaries); failed trials are counted and left out of the statistics.
    """
    seeds = trial_seeds(master_seed, len(levels) * trials)
    tasks = []
    for li, level in enumerate(levels):
        th = with_noise_level(theta, level, include_measurement)
        for k in range(trials):
            s, e = seeds[li * trials + k]
            tasks.append((th, float(level), k, T, s, e, cfg))
    results = _map(_run_trial, tasks, jobs)
    summaries = []
    for level in levels:
        rs = [r for r in results if r.level == float(level)]
        ok = [r for r in rs if r.status == "ok"]
        mc = np.array([r.match_c for r in ok])
        ma = np.array([r.match_a for r in ok])
        stat = (lambda v, f: float(f(v)) if v.size else float("nan"))
        summaries.append(LevelSummary(float(level), len(ok), len(rs) - len(ok),
                                      stat(mc, np.mean), stat(mc, np.var), stat(ma, np.mean), stat(ma, np.var)))
    return results, summaries


def _run_rate_trial(task):
    theta, hi, si, T, sim_seed, em_seed, cfg = task
    try:
        traj, report, al = _identify(theta, T, sim_seed, em_seed, cfg)
    except (SimulationDivergenceError, EmError, np.linalg.LinAlgError, ValueError) as exc:
        return hi, si, None, float("nan"), float("nan"), f"{_failure_tag(exc)}: {exc}"
    errs = matrix_errors(al.theta, theta)
    spectra = gram_spectra(traj.x_c, traj.s_c, theta.dims.m_c) + gram_spectra(traj.x_a, traj.s_a, theta.dims.m_a)
    live = [g for g in spectra if not g.empty]
    lam_min = min(g.lam_min for g in live) if live else 0.0
    lam_max = max(g.lam_max for g in live) if live else 0.0
    return hi, si, errs, lam_min, lam_max, ""


def rate_probe(theta_true: ThetaBundle, horizons, seeds, cfg: EmConfig = EmConfig(init="perturb", rho=0.2),
               jobs=1) -> RateProbe:
    """Fit at every (horizon, seed) and collect aligned parameter errors.

    Each entry of ``seeds`` is a master seed; the simulation and EM seeds for
    a cell are spawned from it and the horizon index.
    """
    horizons = [int(T) for T in horizons]
    for T in horizons:
        if not 100 <= T <= 100_000:
            raise ValueError(f"horizon {T} outside [1e2, 1e5]")
    tasks = []
    for hi, T in enumerate(horizons):
        for si, seed in enumerate(seeds):
            s, e = trial_seeds([int(seed), hi], 1)[0]
            tasks.append((theta_true, hi, si, T, s, e, cfg))
    out = _map(_run_rate_trial, tasks, jobs)

    names = list(matrix_errors(theta_true, theta_true))
    shape = (len(horizons), len(seeds))
    errors = {k: np.full(shape, np.nan) for k in names}
    lam_min, lam_max = np.full(shape, np.nan), np.full(shape, np.nan)
    failures = []
    for hi, si, errs, lo, hi_lam, msg in out:
        lam_min[hi, si], lam_max[hi, si] = lo, hi_lam
        if errs is None:
            failures.append({"T": horizons[hi], "seed": seeds[si], "reason": msg})
            continue
        for k, v in errs.items():
            errors[k][hi, si] = v
    probe = RateProbe(horizons, list(seeds), errors, lam_min, lam_max, failures=failures)
    return finalize_rate_probe(probe)
