"""Command line entry point: ``ncasm simulate|identify|evaluate|montecarlo|rates``.

Settings come from an optional JSON file (``--config``) whose keys match
the long flag names with dashes turned into underscores; flags given on the
command line win. Exit codes: 0 success, 1 usage or configuration error,
2 runtime or numerical error. ``NCASM_LOG`` (error|warn|info|debug) sets the
log level on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import diagnostics, io
from .em import EmConfig, EmError, MonotonicityError, align_modes, fit
from .model import Dims, ThetaValidationError, dumps_json, example1_theta, load_theta, save_theta
from .montecarlo import rate_probe, run_montecarlo
from .simulate import CovarianceFactorError, SimConfig, SimulationDivergenceError, simulate

logger = logging.getLogger("ncasm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# defaults applied after merging config file and flags
DEFAULTS = {
    "seed": 0, "jobs": 1, "out": ".", "T": 10000,
    "init": "random", "rho": 0.2, "max_iters": 100, "tol_q": 1e-6, "tol_theta": 1e-5, "sweeps": 2,
    "soft_weights": False, "joint_mode_search": False, "monotonicity": "assert",
    "m_c": None, "m_a": None, "n_xc": None, "n_xa": None,
    "levels": [0.01, 0.1, 0.5, 1.0], "trials": 100, "measurement_noise": True,
    "horizons": [100, 1000, 10000], "seeds": 10,
}


def _common(p):
    p.add_argument("--config", help="JSON file with settings; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--example1", action="store_true", default=None,
                   help="use the bundled two-mode example parameters")
    p.add_argument("--theta", help="parameter JSON")


def _em_flags(p):
    p.add_argument("--init", choices=["random", "perturb", "segments", "given"])
    p.add_argument("--rho", type=float, help="perturbation size for --init perturb")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol-q", type=float)
    p.add_argument("--tol-theta", type=float)
    p.add_argument("--sweeps", type=int)
    p.add_argument("--soft-weights", action="store_true", default=None)
    p.add_argument("--joint-mode-search", action="store_true", default=None)
    p.add_argument("--monotonicity", choices=["assert", "warn"])


def _floats(s):
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s):
    return [int(v) for v in s.split(",") if v.strip()]


def build_parser():
    p = _Parser(prog="ncasm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a trajectory")
    _common(s)
    s.add_argument("--T", type=int)

    i = sub.add_parser("identify", help="run EM on a trajectory CSV")
    _common(i)
    _em_flags(i)
    i.add_argument("--data", help="trajectory CSV")
    i.add_argument("--truth", help="reference parameters for --init perturb (or use --example1)")
    for name in ("m-c", "m-a", "n-xc", "n-xa"):
        i.add_argument(f"--{name}", type=int)

    e = sub.add_parser("evaluate", help="metrics of an identify run")
    _common(e)
    e.add_argument("--data", help="trajectory CSV (ground truth columns optional)")
    e.add_argument("--estimate", help="directory written by identify")
    e.add_argument("--truth", help="true parameter JSON for parameter errors")

    m = sub.add_parser("montecarlo", help="match-rate statistics across noise levels")
    _common(m)
    _em_flags(m)
    m.add_argument("--T", type=int)
    m.add_argument("--levels", type=_floats, help="comma-separated noise levels")
    m.add_argument("--trials", type=int)
    m.add_argument("--no-measurement-noise", dest="measurement_noise", action="store_false", default=None,
                   help="keep Sigma_m fixed instead of scaling it with the level")

    r = sub.add_parser("rates", help="parameter error versus horizon")
    _common(r)
    _em_flags(r)
    r.add_argument("--horizons", type=_ints, help="comma-separated horizons")
    r.add_argument("--seeds", type=int, help="number of seeds per horizon")
    return p


def _settings(args):
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
    out = dict(DEFAULTS)
    out.update(cfg)
    for k, v in vars(args).items():
        if v is not None and k != "config":
            out[k] = v
    return out


def _theta(st, required=True):
    if st.get("theta"):
        return _load(st["theta"])
    if st.get("example1"):
        return example1_theta()
    if required:
        raise UsageError("parameters required: pass --theta FILE or --example1")
    return None


def _load(path):
    try:
        return load_theta(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load parameters from {path}: {exc}") from None


def _em_config(st):
    names = {f.name for f in fields(EmConfig)}
    kw = {k: st[k] for k in ("init", "rho", "max_iters", "tol_theta", "sweeps", "soft_weights",
                             "joint_mode_search", "monotonicity", "seed") if k in names}
    kw["tol_Q"] = st["tol_q"]
    try:
        return EmConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_simulate(st):
    theta = _theta(st)
    try:
        cfg = SimConfig(T=st["T"], seed=st["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    traj = simulate(theta, cfg)
    out = io.ensure_dir(st["out"])
    io.write_trajectory(traj, out / "trajectory.csv")
    save_theta(theta, out / "theta.json")
    print(f"wrote {traj.T} rows to {out / 'trajectory.csv'}")


def _dims(st, n_y, truth):
    vals = {k: st.get(k) for k in ("n_xc", "n_xa", "m_c", "m_a")}
    if truth is not None:
        d = truth.dims
        for k in vals:
            vals[k] = vals[k] if vals[k] is not None else getattr(d, k)
    missing = [k for k, v in vals.items() if v is None]
    if missing:
        raise UsageError("dimensions required: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return Dims(n_y=n_y, **vals)


def cmd_identify(st):
    if not st.get("data"):
        raise UsageError("--data is required")
    traj = io.read_trajectory(st["data"])
    cfg = _em_config(st)
    ref = _load(st["truth"]) if st.get("truth") else _theta(st, required=False)
    dims = _dims(st, traj.y.shape[1], ref)
    if cfg.init == "perturb" and ref is None:
        raise UsageError("--init perturb needs --truth FILE or --example1")
    out = io.ensure_dir(st["out"])
    try:
        report = fit(traj, dims, cfg, theta0=ref, truth=ref)
    except EmError as exc:
        exc.report.write_json(out / "report.json")
        if exc.report.final_theta is not None:
            save_theta(exc.report.final_theta, out / "theta.json")
        for r in exc.report.iterates:
            print(f"iter {r.k:4d}  Q={r.q:.10g}  max|dtheta|={r.delta_theta:.3g}")
        kind = "monotonicity violation" if isinstance(exc, MonotonicityError) else "failure"
        print(f"EM aborted ({kind}): {exc}; partial report in {out / 'report.json'}", file=sys.stderr)
        return EXIT_RUNTIME
    for r in report.iterates:
        print(f"iter {r.k:4d}  Q={r.q:.10g}  max|dtheta|={r.delta_theta:.3g}")
    report.write_json(out / "report.json")
    report.write_q_trace(out / "q_trace.csv")
    save_theta(report.final_theta, out / "theta.json")
    io.write_states(report.final_states, *report.final_modes, out / "states.csv")
    print(f"stop reason: {report.stop_reason}; {len(report.iterates)} iterations")
    return EXIT_OK


def cmd_evaluate(st):
    if not st.get("data") or not st.get("estimate"):
        raise UsageError("--data and --estimate are required")
    traj = io.read_trajectory(st["data"])
    est_dir = Path(st["estimate"])
    theta_hat = load_theta(est_dir / "theta.json")
    x_c, x_a, s_c, s_a = io.read_states(est_dir / "states.csv")
    if x_c.shape[0] != traj.T:
        raise UsageError(f"states file has {x_c.shape[0]} rows, data has {traj.T}")

    metrics = {}
    y_hat = diagnostics.reconstruct_output(theta_hat, x_c, x_a, s_c, s_a)
    metrics["delta_output"] = diagnostics.output_reconstruction_error(traj.y, y_hat)
    if traj.has_modes:
        metrics["match_c_raw"] = diagnostics.mode_match_rate(traj.s_c, s_c)
        metrics["match_a_raw"] = diagnostics.mode_match_rate(traj.s_a, s_a)
        al = align_modes((s_c, s_a, theta_hat), (traj.s_c, traj.s_a, None))
        metrics["match_c"] = diagnostics.mode_match_rate(traj.s_c, al.s_c)
        metrics["match_a"] = diagnostics.mode_match_rate(traj.s_a, al.s_a)
        theta_hat = al.theta
    else:
        logger.warning("no mode columns in data; match rates skipped")
    if traj.has_states:
        metrics["delta_c"] = diagnostics.relative_state_error(traj.x_c, x_c)
        metrics["delta_a"] = diagnostics.relative_state_error(traj.x_a, x_a)
    else:
        logger.warning("no state columns in data; state errors skipped")
    truth = _load(st["truth"]) if st.get("truth") else _theta(st, required=False)
    if truth is not None:
        if not traj.has_modes:
            logger.warning("parameter errors without mode alignment")
        metrics.update({f"err_{k}": v for k, v in diagnostics.matrix_errors(theta_hat, truth).items()})
    out = io.ensure_dir(st["out"])
    diagnostics.write_csv(out / "metrics.csv", [{"metric": k, "value": v} for k, v in metrics.items()],
                          ["metric", "value"])
    for k, v in metrics.items():
        print(f"{k:>16s}  {v:.6g}")
    return EXIT_OK


def cmd_montecarlo(st):
    theta = _theta(st)
    cfg = _em_config(st)
    if st["trials"] < 1:
        raise UsageError("--trials must be >= 1")
    results, summary = run_montecarlo(theta, list(st["levels"]), int(st["trials"]), int(st["T"]),
                                      master_seed=st["seed"], jobs=int(st["jobs"]), cfg=cfg,
                                      include_measurement=bool(st["measurement_noise"]))
    out = io.ensure_dir(st["out"])
    diagnostics.write_csv(out / "montecarlo.csv", [vars(s) for s in summary],
                          ["level", "n_ok", "n_failed", "mean_c", "var_c", "mean_a", "var_a"])
    diagnostics.write_csv(out / "montecarlo_trials.csv", [vars(r) for r in results],
                          ["level", "trial", "status", "match_c", "match_a", "iterations", "message"])
    for s in summary:
        print(f"level {s.level:g}: ok={s.n_ok} failed={s.n_failed} "
              f"match_c={s.mean_c:.4f} (var {s.var_c:.3g}) match_a={s.mean_a:.4f} (var {s.var_a:.3g})")
    return EXIT_OK


def cmd_rates(st):
    theta = _theta(st)
    cfg = _em_config(st)
    try:
        probe = rate_probe(theta, list(st["horizons"]), list(range(int(st["seeds"]))), cfg, jobs=int(st["jobs"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = io.ensure_dir(st["out"])
    diagnostics.write_csv(out / "rates.csv", probe.rows(), ["T", "seed", "matrix", "error", "lam_min", "lam_max"])
    summ = probe.summary_rows()
    diagnostics.write_csv(out / "rates_summary.csv", summ)
    (out / "rates_meta.json").write_text(dumps_json({
        "median_slope": probe.median_slope if np.isfinite(probe.median_slope) else None,
        "degenerate": probe.degenerate, "undefined": probe.undefined,
        "acceptance_band": [0.6, 1.4], "failures": probe.failures,
    }) + "\n")
    flags = [f for f, on in (("degenerate", probe.degenerate), ("undefined", probe.undefined)) if on]
    print(f"median slope {probe.median_slope:.4g}" + (f" [{', '.join(flags)}]" if flags else "")
          + f"; {len(probe.failures)} failed fits")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "identify": cmd_identify, "evaluate": cmd_evaluate,
            "montecarlo": cmd_montecarlo, "rates": cmd_rates}


def _setup_logging():
    name = os.environ.get("NCASM_LOG", "warn").strip().lower()
    level = LOG_LEVELS.get(name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        st = _settings(args)
        rc = COMMANDS[args.command](st)
        return EXIT_OK if rc is None else rc
    except UsageError as exc:
        print(f"ncasm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.CsvFormatError, ThetaValidationError, CovarianceFactorError, FileNotFoundError) as exc:
        print(f"ncasm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimulationDivergenceError, EmError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        print(f"ncasm {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
