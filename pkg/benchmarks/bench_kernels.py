"""Compare the compiled kernels with the numpy fallback.

Each backend runs in its own interpreter (the backend is fixed at import)
and times three workloads: raw kernel calls, deterministic propagation and
a trajectory ensemble. Usage::

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
import qfeedsim
from qfeedsim.backend import kernels
from qfeedsim.models import model_qubit_gaussian_feedback
from qfeedsim.resolved import init_resolved, propagate
from qfeedsim.trajectories import ensemble_estimate

repeat = int(sys.argv[1])

def best(fn):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)

rng = np.random.default_rng(0)
kraus = rng.normal(size=(5, 2, 2)) + 1j * rng.normal(size=(5, 2, 2))
states = rng.normal(size=(20000, 2, 2)) + 1j * rng.normal(size=(20000, 2, 2))
slots = rng.integers(0, 5000, size=100000)
raw = rng.uniform(-50, 50, size=(100000, 2))
flat = np.ascontiguousarray(kernels.sandwich_all(kraus, states).reshape(-1, 2, 2))
det_spec = model_qubit_gaussian_feedback(n_steps=300, leak=0.05, rule="momentum")
traj_spec = model_qubit_gaussian_feedback(n_steps=50, leak=0.1)

out = {
    "backend": qfeedsim.BACKEND,
    "sandwich_all 20000x5": best(lambda: kernels.sandwich_all(kraus, states)),
    "scatter_add 100000->5000": best(lambda: kernels.scatter_add(flat, slots, 5000)),
    "project 100000x2": best(lambda: kernels.project(raw, np.array([-40.0, -40.0]), np.array([0.1, 0.1]),
                                                      np.array([801, 801]), 1e-9)),
    "det_step x300 (momentum)": best(lambda: propagate(init_resolved(det_spec.rho0, det_spec.y0,
                                                                     det_spec.lattice),
                                                       det_spec.instrument, 300)),
    "ensemble 20000 traj x50": best(lambda: ensemble_estimate(traj_spec, 20000, 50, base_seed=1)),
}
print(json.dumps(out))
"""


def run(pure, repeat):
    env = {**os.environ, "QFEEDSIM_PURE_PYTHON": "1" if pure else "0"}
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True, text=True,
                          check=True)
    return json.loads(proc.stdout)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    fast = run(False, args.repeat)
    slow = run(True, args.repeat)
    if fast["backend"] != "compiled":
        print("compiled kernels are not built; only the fallback was timed", file=sys.stderr)
    width = max(len(k) for k in fast) + 2
    print(f"{'workload':<{width}}{fast['backend']:>12}{slow['backend']:>12}{'speedup':>10}")
    for key in fast:
        if key == "backend":
            continue
        print(f"{key:<{width}}{fast[key]:>11.4f}s{slow[key]:>11.4f}s{slow[key] / fast[key]:>9.2f}x")


if __name__ == "__main__":
    main()
