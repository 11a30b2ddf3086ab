"""Time the E-step and the simulator with and without numba.

Each variant runs in a fresh interpreter so NCASM_DISABLE_NUMBA is read at
import time. The compiled run is timed after one warm-up call (compilation
is cached on disk after the first ever run).

    python benchmarks/bench_kernels.py [--T 5000] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
import ncasm
from ncasm import _kernels

T, repeat = int(sys.argv[1]), int(sys.argv[2])
theta = ncasm.example1_theta()
theta = theta.updated(A_c=0.9 * np.array(theta.A_c))  # stable variant
traj = ncasm.simulate(theta, ncasm.SimConfig(T=T, seed=0))
ncasm.run_estep(theta, traj)  # warm-up / compile

def best(fn):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out)

res = {
    "numba": _kernels.USING_NUMBA,
    "estep": best(lambda: ncasm.run_estep(theta, traj)),
    "simulate": best(lambda: ncasm.simulate(theta, ncasm.SimConfig(T=T, seed=1))),
    "q": ncasm.run_estep(theta, traj).q,
}
print(json.dumps(res))
"""


def run(T, repeat, disable):
    env = dict(os.environ)
    env["NCASM_DISABLE_NUMBA"] = "1" if disable else "0"
    out = subprocess.run([sys.executable, "-c", CHILD, str(T), str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--T", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    jit = run(args.T, args.repeat, disable=False)
    py = run(args.T, args.repeat, disable=True)
    print(f"T = {args.T}, best of {args.repeat}")
    print(f"{'':10s}{'numba':>12s}{'numpy':>12s}{'speedup':>10s}")
    for key in ("estep", "simulate"):
        print(f"{key:10s}{jit[key]:12.4f}{py[key]:12.4f}{py[key] / jit[key]:10.1f}x")
    print(f"Q agreement: |dQ| = {abs(jit['q'] - py['q']):.3g}")
    if not jit["numba"]:
        print("warning: numba was not importable; both columns are the numpy path")


if __name__ == "__main__":
    main()
