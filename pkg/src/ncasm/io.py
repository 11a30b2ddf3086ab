"""CSV reading and writing for trajectories and filter output.

Trajectory CSV: one row per t with columns
``t, y_1..y_ny[, xc_1..xc_nxc, xa_1..xa_nxa, s_c, s_a]``. The header is
mandatory; the state and mode groups are optional but all-or-nothing per
group. Mode labels are 1-based on disk and 0-based in memory. Floats are
written with 17 significant digits.
"""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from .estep import FilterState
from .model import Trajectory


class CsvFormatError(ValueError):
    def __init__(self, path, line, msg):
        self.line = line
        super().__init__(f"{path}:{line}: {msg}")


def _f(x):
    return format(float(x), ".17g")


def _numbered(header, prefix):
    cols = [(i, h) for i, h in enumerate(header) if re.fullmatch(rf"{prefix}_(\d+)", h)]
    idx = [int(h.split("_")[-1]) for _, h in cols]
    if idx != list(range(1, len(idx) + 1)):
        return None
    return [i for i, _ in cols]


def trajectory_header(n_y, n_xc=0, n_xa=0, modes=False):
    h = ["t"] + [f"y_{i}" for i in range(1, n_y + 1)]
    h += [f"xc_{i}" for i in range(1, n_xc + 1)] + [f"xa_{i}" for i in range(1, n_xa + 1)]
    if modes:
        h += ["s_c", "s_a"]
    return h


def write_trajectory(traj: Trajectory, path) -> None:
    n_xc = traj.x_c.shape[1] if traj.x_c is not None else 0
    n_xa = traj.x_a.shape[1] if traj.x_a is not None else 0
    header = trajectory_header(traj.y.shape[1], n_xc, n_xa, traj.has_modes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(traj.T):
            row = [str(t + 1)] + [_f(v) for v in traj.y[t]]
            if n_xc:
                row += [_f(v) for v in traj.x_c[t]]
            if n_xa:
                row += [_f(v) for v in traj.x_a[t]]
            if traj.has_modes:
                row += [str(int(traj.s_c[t]) + 1), str(int(traj.s_a[t]) + 1)]
            w.writerow(row)


def read_trajectory(path) -> Trajectory:
    """Parse a trajectory CSV; every error names the offending line."""
    path = str(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(path, 1, "empty file; a header row is required")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t" or "y_1" not in header:
        raise CsvFormatError(path, 1, "missing header; expected columns 't,y_1,...'")
    y_cols = _numbered(header, "y")
    xc_cols = _numbered(header, "xc")
    xa_cols = _numbered(header, "xa")
    if y_cols is None or xc_cols is None or xa_cols is None:
        raise CsvFormatError(path, 1, "numbered columns must run 1..n without gaps")
    has_modes = "s_c" in header and "s_a" in header
    if ("s_c" in header) != ("s_a" in header):
        raise CsvFormatError(path, 1, "mode columns s_c and s_a must appear together")
    if bool(xc_cols) != bool(xa_cols):
        raise CsvFormatError(path, 1, "state columns xc_* and xa_* must appear together")
    known = 1 + len(y_cols) + len(xc_cols) + len(xa_cols) + 2 * has_modes
    if known != len(header):
        raise CsvFormatError(path, 1, f"unrecognised columns in header {header}")

    data = []
    modes = []
    for ln, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise CsvFormatError(path, ln, f"expected {len(header)} fields, found {len(row)}")
        try:
            t = int(row[0])
            vals = [float(row[i]) for i in y_cols + xc_cols + xa_cols]
            m = [int(row[header.index("s_c")]), int(row[header.index("s_a")])] if has_modes else None
        except ValueError as exc:
            raise CsvFormatError(path, ln, f"cannot parse field: {exc}") from None
        if t != len(data) + 1:
            raise CsvFormatError(path, ln, f"time index {t} out of sequence (expected {len(data) + 1})")
        if not np.all(np.isfinite(vals)):
            raise CsvFormatError(path, ln, "non-finite value")
        if m is not None and min(m) < 1:
            raise CsvFormatError(path, ln, "mode labels are 1-based")
        data.append(vals)
        if m is not None:
            modes.append(m)
    if len(data) < 2:
        raise CsvFormatError(path, len(rows), "T >= 2 required")
    arr = np.array(data)
    ny, nc = len(y_cols), len(xc_cols)
    kw = {"y": arr[:, :ny]}
    if nc:
        kw["x_c"] = arr[:, ny:ny + nc]
        kw["x_a"] = arr[:, ny + nc:]
    if has_modes:
        mm = np.array(modes, dtype=np.int64) - 1
        kw["s_c"], kw["s_a"] = mm[:, 0], mm[:, 1]
    return Trajectory(**kw)


def write_states(fs: FilterState, s_c, s_a, path) -> None:
    """Per-t posterior means, posterior covariance diagonals and 1-based modes."""
    n_c, n_a = fs.xhat_c_post.shape[1], fs.xhat_a_post.shape[1]
    header = (["t"] + [f"xc_hat_{i}" for i in range(1, n_c + 1)] + [f"xa_hat_{i}" for i in range(1, n_a + 1)]
              + [f"Pc_{i}{i}" for i in range(1, n_c + 1)] + [f"Pa_{i}{i}" for i in range(1, n_a + 1)]
              + ["s_c_hat", "s_a_hat"])
    dc = np.diagonal(fs.P_c_post, axis1=1, axis2=2)
    da = np.diagonal(fs.P_a_post, axis1=1, axis2=2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(fs.T):
            w.writerow([str(t + 1)] + [_f(v) for v in fs.xhat_c_post[t]] + [_f(v) for v in fs.xhat_a_post[t]]
                       + [_f(v) for v in dc[t]] + [_f(v) for v in da[t]]
                       + [str(int(s_c[t]) + 1), str(int(s_a[t]) + 1)])


def read_states(path):
    """Inverse of :func:`write_states`: (x_c_hat, x_a_hat, s_c_hat, s_a_hat), modes 0-based."""
    path = str(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["t"]:
        raise CsvFormatError(path, 1, "missing header; expected a states file written by 'identify'")
    header = rows[0]
    ic = [i for i, h in enumerate(header) if h.startswith("xc_hat_")]
    ia = [i for i, h in enumerate(header) if h.startswith("xa_hat_")]
    body = []
    for ln, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != len(header):
            raise CsvFormatError(path, ln, f"expected {len(header)} fields, found {len(r)}")
        try:
            body.append([float(v) for v in r])
        except ValueError as exc:
            raise CsvFormatError(path, ln, f"cannot parse field: {exc}") from None
    if not body:
        raise CsvFormatError(path, 2, "no data rows")
    arr = np.array(body)
    return (arr[:, ic], arr[:, ia], arr[:, header.index("s_c_hat")].astype(np.int64) - 1,
            arr[:, header.index("s_a_hat")].astype(np.int64) - 1)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
