"""Parameter objects and trajectories for the switching non-causal model.

The model has a causal chain driven forward in time and an anti-causal
chain driven backward in time, sharing one output equation::

    x_c(t) = A_c(s_c(t)) x_c(t-1) + v_c(t)
    x_a(t) = A_a(s_a(t)) x_a(t+1) + v_a(t)
    y(t)   = C_c(s_c(t)) x_c(t) + C_a(s_a(t)) x_a(t) + v_m(t)

Mode labels are 0-based everywhere inside the package; file formats and
the CLI use 1-based labels and convert at the boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

SYM_TOL = 1e-10
EIG_TOL = 1e-10
PROB_TOL = 1e-12


class ThetaValidationError(ValueError):
    """Raised by :func:`validate_theta`; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _frozen(a, ndim=None):
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dims:
    n_xc: int
    n_xa: int
    n_y: int
    m_c: int = 1
    m_a: int = 1

    def __post_init__(self):
        for name in ("n_xc", "n_xa", "n_y", "m_c", "m_a"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"Dims.{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))


@dataclass(frozen=True)
class CausalModeParams:
    A_c: np.ndarray
    C_c: np.ndarray
    Sigma_c: np.ndarray

    def __post_init__(self):
        for name in ("A_c", "C_c", "Sigma_c"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2))


@dataclass(frozen=True)
class AntiCausalModeParams:
    A_a: np.ndarray
    C_a: np.ndarray
    Sigma_a: np.ndarray

    def __post_init__(self):
        for name in ("A_a", "C_a", "Sigma_a"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2))


@dataclass(frozen=True)
class ThetaBundle:
    """Complete parameter set: per-mode subsystems, mixing weights, output noise."""

    dims: Dims
    causal: tuple
    anticausal: tuple
    pi_c: np.ndarray
    pi_a: np.ndarray
    Sigma_m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "causal", tuple(self.causal))
        object.__setattr__(self, "anticausal", tuple(self.anticausal))
        object.__setattr__(self, "pi_c", _frozen(self.pi_c, 1))
        object.__setattr__(self, "pi_a", _frozen(self.pi_a, 1))
        object.__setattr__(self, "Sigma_m", _frozen(self.Sigma_m, 2))

    @classmethod
    def from_arrays(cls, A_c, C_c, Sigma_c, A_a, C_a, Sigma_a, pi_c, pi_a, Sigma_m):
        """Build from mode-stacked arrays, e.g. ``A_c`` of shape (m_c, n_xc, n_xc)."""
        A_c, C_c, Sigma_c = (np.asarray(a, dtype=float) for a in (A_c, C_c, Sigma_c))
        A_a, C_a, Sigma_a = (np.asarray(a, dtype=float) for a in (A_a, C_a, Sigma_a))
        Sigma_m = np.atleast_2d(np.asarray(Sigma_m, dtype=float))
        dims = Dims(
            n_xc=A_c.shape[1],
            n_xa=A_a.shape[1],
            n_y=Sigma_m.shape[0],
            m_c=A_c.shape[0],
            m_a=A_a.shape[0],
        )
        causal = [CausalModeParams(A_c[j], C_c[j], Sigma_c[j]) for j in range(dims.m_c)]
        anti = [AntiCausalModeParams(A_a[l], C_a[l], Sigma_a[l]) for l in range(dims.m_a)]
        return cls(dims, causal, anti, pi_c, pi_a, Sigma_m)

    # mode-stacked views, shape (m, rows, cols); handy for the kernels
    @cached_property
    def A_c(self):
        return _frozen([p.A_c for p in self.causal])

    @cached_property
    def C_c(self):
        return _frozen([p.C_c for p in self.causal])

    @cached_property
    def Sigma_c(self):
        return _frozen([p.Sigma_c for p in self.causal])

    @cached_property
    def A_a(self):
        return _frozen([p.A_a for p in self.anticausal])

    @cached_property
    def C_a(self):
        return _frozen([p.C_a for p in self.anticausal])

    @cached_property
    def Sigma_a(self):
        return _frozen([p.Sigma_a for p in self.anticausal])

    def arrays(self):
        """Return the nine mode-stacked arrays accepted by :meth:`from_arrays`."""
        return dict(
            A_c=np.array(self.A_c),
            C_c=np.array(self.C_c),
            Sigma_c=np.array(self.Sigma_c),
            A_a=np.array(self.A_a),
            C_a=np.array(self.C_a),
            Sigma_a=np.array(self.Sigma_a),
            pi_c=np.array(self.pi_c),
            pi_a=np.array(self.pi_a),
            Sigma_m=np.array(self.Sigma_m),
        )

    def updated(self, **arrays):
        """Copy with some stacked arrays replaced (keys as in :meth:`arrays`)."""
        current = self.arrays()
        unknown = set(arrays) - set(current)
        if unknown:
            raise KeyError(f"unknown parameter arrays: {sorted(unknown)}")
        current.update(arrays)
        return ThetaBundle.from_arrays(**current)

    def max_abs_diff(self, other: "ThetaBundle") -> float:
        a, b = self.arrays(), other.arrays()
        return max(float(np.max(np.abs(a[k] - b[k]))) for k in a)


@dataclass(frozen=True)
class Trajectory:
    """Outputs over t = 1..T plus optional ground truth (simulation only)."""

    y: np.ndarray
    x_c: np.ndarray | None = None
    x_a: np.ndarray | None = None
    s_c: np.ndarray | None = None
    s_a: np.ndarray | None = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        object.__setattr__(self, "y", _frozen(y, 2))
        T = y.shape[0]
        if T < 2:
            raise ValueError("T >= 2 required")
        for name in ("x_c", "x_a"):
            value = getattr(self, name)
            if value is not None:
                arr = np.array(value, dtype=float)
                if arr.ndim == 1:
                    arr = arr[:, None]
                if arr.shape[0] != T:
                    raise ValueError(f"{name} has length {arr.shape[0]}, expected T={T}")
                object.__setattr__(self, name, _frozen(arr, 2))
        for name in ("s_c", "s_a"):
            value = getattr(self, name)
            if value is not None:
                arr = np.array(value, dtype=np.int64)
                if arr.shape != (T,):
                    raise ValueError(f"{name} has shape {arr.shape}, expected ({T},)")
                if arr.size and arr.min() < 0:
                    raise ValueError(f"{name} contains negative labels")
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def has_states(self) -> bool:
        return self.x_c is not None and self.x_a is not None

    @property
    def has_modes(self) -> bool:
        return self.s_c is not None and self.s_a is not None


def _psd_problem(M, name, strict=False):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return f"{name} must be square, got shape {M.shape}"
    if not np.all(np.isfinite(M)):
        return f"{name} has non-finite entries"
    if np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL:
        return f"{name} not symmetric"
    eig = np.linalg.eigvalsh(0.5 * (M + M.T))
    if eig[0] < -EIG_TOL:
        return f"{name} not PSD (min eigenvalue {eig[0]:.6g})"
    if strict and eig[0] <= 0.0:
        return f"{name} not positive definite (min eigenvalue {eig[0]:.6g})"
    return None


def _prob_problem(p, m, name):
    p = np.asarray(p, dtype=float)
    if p.shape != (m,):
        return [f"{name} has length {p.size}, expected {m}"]
    out = []
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        out.append(f"{name} has negative or non-finite entries")
    total = float(p.sum())
    if abs(total - 1.0) > PROB_TOL:
        out.append(f"probability vector {name} sums to {total:.12g}")
    return out


def theta_violations(theta: ThetaBundle) -> list[str]:
    """All invariant violations of ``theta`` as human-readable strings."""
    d = theta.dims
    out = []
    if len(theta.causal) != d.m_c:
        out.append(f"causal has {len(theta.causal)} modes, dims.m_c={d.m_c}")
    if len(theta.anticausal) != d.m_a:
        out.append(f"anticausal has {len(theta.anticausal)} modes, dims.m_a={d.m_a}")
    for j, p in enumerate(theta.causal):
        tag = f"causal[{j + 1}]"
        if p.A_c.shape != (d.n_xc, d.n_xc):
            out.append(f"{tag}.A_c has shape {p.A_c.shape}, expected {(d.n_xc, d.n_xc)}")
        if p.C_c.shape != (d.n_y, d.n_xc):
            out.append(f"{tag}.C_c has shape {p.C_c.shape}, expected {(d.n_y, d.n_xc)}")
        if p.Sigma_c.shape != (d.n_xc, d.n_xc):
            out.append(f"{tag}.Sigma_c has shape {p.Sigma_c.shape}, expected {(d.n_xc, d.n_xc)}")
        else:
            msg = _psd_problem(p.Sigma_c, f"{tag}.Sigma_c")
            if msg:
                out.append(msg)
    for l, p in enumerate(theta.anticausal):
        tag = f"anticausal[{l + 1}]"
        if p.A_a.shape != (d.n_xa, d.n_xa):
            out.append(f"{tag}.A_a has shape {p.A_a.shape}, expected {(d.n_xa, d.n_xa)}")
        if p.C_a.shape != (d.n_y, d.n_xa):
            out.append(f"{tag}.C_a has shape {p.C_a.shape}, expected {(d.n_y, d.n_xa)}")
        if p.Sigma_a.shape != (d.n_xa, d.n_xa):
            out.append(f"{tag}.Sigma_a has shape {p.Sigma_a.shape}, expected {(d.n_xa, d.n_xa)}")
        else:
            msg = _psd_problem(p.Sigma_a, f"{tag}.Sigma_a")
            if msg:
                out.append(msg)
    out += _prob_problem(theta.pi_c, d.m_c, "pi_c")
    out += _prob_problem(theta.pi_a, d.m_a, "pi_a")
    if theta.Sigma_m.shape != (d.n_y, d.n_y):
        out.append(f"Sigma_m has shape {theta.Sigma_m.shape}, expected {(d.n_y, d.n_y)}")
    else:
        msg = _psd_problem(theta.Sigma_m, "Sigma_m", strict=True)
        if msg:
            out.append(msg)
    return out


def validate_theta(theta: ThetaBundle) -> ThetaBundle:
    """Return ``theta`` unchanged, or raise :class:`ThetaValidationError`."""
    problems = theta_violations(theta)
    if problems:
        raise ThetaValidationError(problems)
    return theta


@dataclass(frozen=True)
class SpectralRadius:
    matrix: str
    mode: int  # 0-based
    radius: float
    flagged: bool


def spectral_radius_report(theta: ThetaBundle) -> list[SpectralRadius]:
    """Spectral radius of every A_c(j) and A_a(l).

    Radii at or above one are flagged. This is a warning only: stability in
    the average sense can hold with individually unstable modes.
    """
    report = []
    for name, stack in (("A_c", theta.A_c), ("A_a", theta.A_a)):
        for j, A in enumerate(stack):
            rho = float(np.max(np.abs(np.linalg.eigvals(A))))
            report.append(SpectralRadius(name, j, rho, rho >= 1.0 - 1e-12))
    return report


def example1_theta() -> ThetaBundle:
    """True parameters of the two-mode academic example (n_y=1, n_xc=n_xa=2)."""
    I2 = np.eye(2)
    return ThetaBundle.from_arrays(
        A_c=[[[1.0, 0.2], [0.3, 0.8]], [[0.8, 0.2], [0.3, 0.5]]],
        C_c=[[[0.3, 0.7]], [[0.7, 0.2]]],
        Sigma_c=[I2, I2],
        A_a=[[[1.0, 0.0], [0.0, 1.0]], [[0.6, 0.2], [0.3, 0.8]]],
        C_a=[[[0.2, 0.6]], [[0.3, 0.76]]],
        Sigma_a=[I2, I2],
        pi_c=[0.7, 0.3],
        pi_a=[0.5, 0.5],
        Sigma_m=[[1.0]],
    )


# ---------------------------------------------------------------- JSON I/O


def _fmt_number(x):
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x!r}")
    return format(x, ".17g")


def dumps_json(obj, indent=2, _level=0):
    """JSON text with every float printed to 17 significant digits.

    The standard encoder prints the shortest round-trip repr; the theta
    format pins 17 digits so files from different writers compare equal.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(
                str(int(v)) if isinstance(v, (int, np.integer)) else _fmt_number(v) for v in obj
            ) + "]"
        items = [pad + dumps_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_number(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def theta_to_dict(theta: ThetaBundle) -> dict:
    d = theta.dims
    return {
        "dims": {"n_xc": d.n_xc, "n_xa": d.n_xa, "n_y": d.n_y, "m_c": d.m_c, "m_a": d.m_a},
        "causal": [
            {"A_c": p.A_c.tolist(), "C_c": p.C_c.tolist(), "Sigma_c": p.Sigma_c.tolist()}
            for p in theta.causal
        ],
        "anticausal": [
            {"A_a": p.A_a.tolist(), "C_a": p.C_a.tolist(), "Sigma_a": p.Sigma_a.tolist()}
            for p in theta.anticausal
        ],
        "pi_c": theta.pi_c.tolist(),
        "pi_a": theta.pi_a.tolist(),
        "Sigma_m": theta.Sigma_m.tolist(),
    }


def theta_from_dict(doc: dict) -> ThetaBundle:
    try:
        dims = Dims(**doc["dims"])
        causal = [CausalModeParams(p["A_c"], p["C_c"], p["Sigma_c"]) for p in doc["causal"]]
        anti = [AntiCausalModeParams(p["A_a"], p["C_a"], p["Sigma_a"]) for p in doc["anticausal"]]
        return ThetaBundle(dims, causal, anti, doc["pi_c"], doc["pi_a"], doc["Sigma_m"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed theta document: {exc}") from exc


def save_theta(theta: ThetaBundle, path) -> None:
    Path(path).write_text(dumps_json(theta_to_dict(theta)) + "\n")


def load_theta(path) -> ThetaBundle:
    with open(path) as fh:
        return theta_from_dict(json.load(fh))


def check_modes(labels: Sequence[int], m: int, name: str = "modes") -> np.ndarray:
    """0-based int64 copy of ``labels`` after checking they lie in range(m)."""
    arr = np.asarray(labels, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= m):
        raise ValueError(f"{name} has labels outside 1..{m}")
    return arr
