"""Outer EM loop: initialization, E/M alternation, stopping, label alignment."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .estep import EStepOptions, EStepResult, FilterState, ModeWeights, outputs_of, run_estep, surrogate_q
from .model import Dims, ThetaBundle, Trajectory, dumps_json, theta_to_dict
from .mstep import run_mstep

logger = logging.getLogger(__name__)

INIT_STRATEGIES = ("random", "perturb", "segments", "given")
MAX_ALIGN_MODES = 5


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 100
    tol_Q: float = 1e-6
    tol_theta: float = 1e-5
    sweeps: int = 2
    init: str = "random"
    seed: int = 0
    rho: float = 0.2  # perturbation size for init="perturb"
    soft_weights: bool = False
    joint_mode_search: bool = False
    monotonicity: str = "assert"  # or "warn"
    slack: float = 1e-8
    freeze_fraction: float = 1e-3
    diffuse: float = 10.0
    # boundary means/covariances for x_c(0) and x_a(T+1); None means zero mean, diffuse * I
    x_c0: tuple | None = None
    P_c0: tuple | None = None
    x_a_end: tuple | None = None
    P_a_end: tuple | None = None

    def __post_init__(self):
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError("max_iters must be an integer >= 1")
        if self.tol_Q <= 0 or self.tol_theta <= 0:
            raise ValueError("tolerances must be positive")
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"init must be one of {INIT_STRATEGIES}, got {self.init!r}")
        if self.monotonicity not in ("assert", "warn"):
            raise ValueError("monotonicity must be 'assert' or 'warn'")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")

    def estep_options(self):
        return EStepOptions(
            sweeps=self.sweeps,
            diffuse=self.diffuse,
            soft_weights=self.soft_weights,
            joint_mode_search=self.joint_mode_search,
            x_c0=_arr(self.x_c0),
            P_c0=_arr(self.P_c0),
            x_a_end=_arr(self.x_a_end),
            P_a_end=_arr(self.P_a_end),
        )


def _arr(v):
    return None if v is None else np.asarray(v, dtype=float)


@dataclass
class IterationRecord:
    k: int
    q: float  # Q(theta^k | E-step at theta^k)
    q_after_mstep: float  # Q(theta^{k+1} | same E-step); never below q
    delta_theta: float
    label_changes: float  # fraction of labels changed vs the previous E-step
    frozen: bool
    pi_c: list
    pi_a: list
    match_c: float | None = None
    match_a: float | None = None


@dataclass
class EmReport:
    iterates: list = field(default_factory=list)
    final_theta: ThetaBundle | None = None
    final_states: FilterState | None = None
    final_modes: tuple | None = None
    final_weights: ModeWeights | None = None
    converged: bool = False
    stop_reason: str = ""
    violations: list = field(default_factory=list)

    @property
    def q_values(self):
        return np.array([r.q for r in self.iterates])

    def to_dict(self):
        doc = {
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "n_iterations": len(self.iterates),
            "monotonicity_violations": self.violations,
            "iterates": [{k: v for k, v in asdict(r).items() if v is not None} for r in self.iterates],
        }
        if self.final_theta is not None:
            doc["theta"] = theta_to_dict(self.final_theta)
        return doc

    def write_json(self, path):
        Path(path).write_text(dumps_json(self.to_dict()) + "\n")

    def write_q_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "Q", "Q_after_mstep", "delta_theta", "label_changes"])
            for r in self.iterates:
                w.writerow([r.k, format(r.q, ".17g"), format(r.q_after_mstep, ".17g"),
                            format(r.delta_theta, ".17g"), format(r.label_changes, ".17g")])


class EmError(RuntimeError):
    """An E- or M-step failure, tagged with the EM iteration and the partial report."""

    def __init__(self, k, cause, report):
        self.k = k
        self.report = report
        super().__init__(f"EM iteration {k}: {cause}")


class MonotonicityError(EmError):
    pass


# ------------------------------------------------------------ initialization


def _rms(a):
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.mean(a * a))) if a.size else 0.0


def _random_A(rng, n, radius=0.5):
    A = rng.standard_normal((n, n))
    rho = float(np.max(np.abs(np.linalg.eigvals(A))))
    return A * (radius / rho) if rho > 0 else A


def _random_C(rng, n_y, n):
    C = rng.standard_normal((n_y, n))
    return C / np.linalg.norm(C, axis=1, keepdims=True)


def perturb_theta(theta: ThetaBundle, rho: float, rng: np.random.Generator) -> ThetaBundle:
    """Additive noise of size rho * RMS on A and C; multiplicative exp(rho xi) on covariances.

    Mixing weights are kept. rho = 0 returns the parameters unchanged.
    """
    if rho == 0:
        return theta
    arr = theta.arrays()
    out = dict(arr)
    for key in ("A_c", "C_c", "A_a", "C_a"):
        M = arr[key]
        out[key] = np.array([m + rho * _rms(m) * rng.standard_normal(m.shape) for m in M])
    for key in ("Sigma_c", "Sigma_a"):
        out[key] = np.array([_scale_cov(S, rho, rng) for S in arr[key]])
    out["Sigma_m"] = _scale_cov(arr["Sigma_m"], rho, rng)
    return ThetaBundle.from_arrays(**out)


def _scale_cov(S, rho, rng):
    D = np.diag(np.exp(0.5 * rho * rng.standard_normal(S.shape[0])))
    return D @ S @ D


def _ar1(v):
    den = float(np.dot(v[:-1], v[:-1]))
    a = float(np.dot(v[1:], v[:-1])) / den if den > 0 else 0.0
    return float(np.clip(a, -0.95, 0.95))


def initialize(trajectory, dims: Dims, strategy: str, rng: np.random.Generator,
               truth: ThetaBundle | None = None, rho: float = 0.2) -> ThetaBundle:
    """Starting parameters for EM, deterministic given ``rng``'s state."""
    y = outputs_of(trajectory)
    if y.shape[1] != dims.n_y:
        raise ValueError(f"outputs have {y.shape[1]} columns, dims say n_y={dims.n_y}")
    d = dims
    if strategy == "perturb":
        if truth is None:
            raise ValueError("init 'perturb' needs reference parameters")
        return perturb_theta(truth, rho, rng)
    if strategy == "random":
        A_c = [_random_A(rng, d.n_xc) for _ in range(d.m_c)]
        A_a = [_random_A(rng, d.n_xa) for _ in range(d.m_a)]
    elif strategy == "segments":
        y0 = y[:, 0]
        A_c = [_ar1(seg) * np.eye(d.n_xc) for seg in np.array_split(y0, d.m_c)]
        A_a = [_ar1(seg[::-1]) * np.eye(d.n_xa) for seg in np.array_split(y0, d.m_a)]
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")
    C_c = [_random_C(rng, d.n_y, d.n_xc) for _ in range(d.m_c)]
    C_a = [_random_C(rng, d.n_y, d.n_xa) for _ in range(d.m_a)]
    return ThetaBundle.from_arrays(
        A_c=A_c, C_c=C_c, Sigma_c=[np.eye(d.n_xc)] * d.m_c,
        A_a=A_a, C_a=C_a, Sigma_a=[np.eye(d.n_xa)] * d.m_a,
        pi_c=np.full(d.m_c, 1.0 / d.m_c), pi_a=np.full(d.m_a, 1.0 / d.m_a),
        Sigma_m=np.eye(d.n_y),
    )


# ------------------------------------------------------------ alignment


@dataclass(frozen=True)
class Alignment:
    perm_c: tuple  # perm_c[estimated label] = true label
    perm_a: tuple
    s_c: np.ndarray | None
    s_a: np.ndarray | None
    theta: ThetaBundle | None


def _best_perm(est, true, m):
    if m > MAX_ALIGN_MODES:
        raise ValueError(f"exhaustive alignment supports at most {MAX_ALIGN_MODES} modes; "
                         "use an assignment-based matcher for larger m")
    counts = np.zeros((m, m), dtype=np.int64)
    np.add.at(counts, (np.asarray(est), np.asarray(true)), 1)
    best, best_score = tuple(range(m)), -1
    for p in itertools.permutations(range(m)):
        score = int(sum(counts[i, p[i]] for i in range(m)))
        if score > best_score:
            best, best_score = p, score
    return best


def permute_theta(theta: ThetaBundle, perm_c, perm_a) -> ThetaBundle:
    """Relabel modes: estimated mode j becomes mode perm[j]."""
    inv_c = np.argsort(perm_c)
    inv_a = np.argsort(perm_a)
    arr = theta.arrays()
    for key in ("A_c", "C_c", "Sigma_c", "pi_c"):
        arr[key] = arr[key][inv_c]
    for key in ("A_a", "C_a", "Sigma_a", "pi_a"):
        arr[key] = arr[key][inv_a]
    return ThetaBundle.from_arrays(**arr)


def align_modes(estimated, truth) -> Alignment:
    """Permutations maximizing the match count, applied to sequences and parameters.

    ``estimated`` is (s_c_hat, s_a_hat, theta_hat) and ``truth`` is
    (s_c, s_a, theta); theta entries may be None.
    """
    s_c_hat, s_a_hat, theta_hat = estimated
    s_c, s_a = truth[0], truth[1]
    m_c = theta_hat.dims.m_c if theta_hat is not None else int(max(np.max(s_c_hat), np.max(s_c))) + 1
    m_a = theta_hat.dims.m_a if theta_hat is not None else int(max(np.max(s_a_hat), np.max(s_a))) + 1
    perm_c = _best_perm(s_c_hat, s_c, m_c)
    perm_a = _best_perm(s_a_hat, s_a, m_a)
    pc, pa = np.array(perm_c), np.array(perm_a)
    return Alignment(
        perm_c, perm_a,
        pc[np.asarray(s_c_hat)], pa[np.asarray(s_a_hat)],
        None if theta_hat is None else permute_theta(theta_hat, perm_c, perm_a),
    )


def _aligned_rate(est, true, m):
    p = np.array(_best_perm(est, true, m))
    return float(np.mean(p[est] == true))


# ------------------------------------------------------------ main loop


def fit(trajectory, dims: Dims, cfg: EmConfig = EmConfig(), theta0: ThetaBundle | None = None,
        truth: ThetaBundle | None = None) -> EmReport:
    """Run EM on the outputs of ``trajectory``.

    ``theta0`` is used directly when ``cfg.init == "given"``; ``truth`` is the
    reference for ``init="perturb"``. When the trajectory carries true mode
    sequences, per-iteration aligned match rates are recorded.
    """
    traj = trajectory if isinstance(trajectory, Trajectory) else Trajectory(y=trajectory)
    y = outputs_of(traj)
    T = y.shape[0]
    need = 10 * max(dims.n_xc, dims.n_xa)
    if T < need:
        raise ValueError(f"T={T} too short: at least 10*max(n_xc, n_xa) = {need} samples needed")

    rng = np.random.default_rng(cfg.seed)
    if cfg.init == "given":
        if theta0 is None:
            raise ValueError("init 'given' needs theta0")
        theta = theta0
    else:
        theta = initialize(traj, dims, cfg.init, rng, truth=truth, rho=cfg.rho)
    if theta.dims != dims:
        raise ValueError(f"initial parameters have dims {theta.dims}, expected {dims}")

    opts = cfg.estep_options()
    report = EmReport()
    prev: EStepResult | None = None
    fixed_c = fixed_a = None
    frozen = False
    est = None

    for k in range(1, cfg.max_iters + 1):
        try:
            est = run_estep(theta, y, prev, opts, fixed_c, fixed_a)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            report.stop_reason = "error"
            raise EmError(k, exc, report) from exc
        q = est.q

        if report.iterates and q < report.iterates[-1].q - cfg.slack:
            drop = report.iterates[-1].q - q
            msg = f"surrogate Q decreased by {drop:.6g} at iteration {k} ({report.iterates[-1].q:.10g} -> {q:.10g})"
            report.violations.append({"k": k, "decrease": drop})
            if cfg.monotonicity == "assert":
                report.stop_reason = "monotonicity_violation"
                report.final_theta = theta
                report.final_states = est.states
                report.final_modes = (est.s_c, est.s_a)
                report.final_weights = est.weights
                raise MonotonicityError(k, msg, report)
            logger.warning(msg)

        try:
            new_theta = run_mstep(theta, y, est.states.xhat_c_post, est.states.xhat_a_post, est.weights)
        except (np.linalg.LinAlgError, ValueError) as exc:
            report.stop_reason = "error"
            raise EmError(k, exc, report) from exc
        if not all(np.all(np.isfinite(a)) for a in new_theta.arrays().values()):
            report.stop_reason = "error"
            raise EmError(k, "M-step produced non-finite parameters", report)

        q_m = surrogate_q(new_theta, y, est.states.xhat_c_post, est.states.xhat_a_post, est.weights)
        dtheta = new_theta.max_abs_diff(theta)
        if prev is None:
            changes = 1.0
        else:
            changes = float(np.mean(np.concatenate([est.s_c != prev.s_c, est.s_a != prev.s_a])))
        if not frozen and prev is not None and changes < cfg.freeze_fraction:
            frozen = True
            fixed_c, fixed_a = est.s_c.copy(), est.s_a.copy()
            logger.info("iteration %d: %.4g%% labels changed; freezing classification", k, 100 * changes)

        rec = IterationRecord(
            k=k, q=q, q_after_mstep=q_m, delta_theta=dtheta, label_changes=changes, frozen=frozen,
            pi_c=new_theta.pi_c.tolist(), pi_a=new_theta.pi_a.tolist(),
        )
        if traj.has_modes:
            rec.match_c = _aligned_rate(est.s_c, traj.s_c, dims.m_c)
            rec.match_a = _aligned_rate(est.s_a, traj.s_a, dims.m_a)
        report.iterates.append(rec)
        logger.info("iter %d  Q=%.10g  max|dtheta|=%.3g  label changes=%.4g", k, q, dtheta, changes)

        q_prev = report.iterates[-2].q if len(report.iterates) > 1 else None
        theta, prev = new_theta, est
        if dtheta < cfg.tol_theta:
            report.converged, report.stop_reason = True, "tol_theta"
            break
        if q_prev is not None and abs(q - q_prev) / max(abs(q_prev), 1.0) < cfg.tol_Q:
            report.converged, report.stop_reason = True, "tol_Q"
            break
    else:
        report.stop_reason = "max_iters"

    report.final_theta = theta
    report.final_states = est.states
    report.final_modes = (est.s_c, est.s_a)
    report.final_weights = est.weights
    return report
