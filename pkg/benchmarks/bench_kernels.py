"""Time the compiled detector kernel against the pure-Python fallback.

    python benchmarks/bench_kernels.py --reps 4000 --repeat 3
"""
import argparse
import time

import numpy as np

from srpssm import kernels
from srpssm.detectors import BatchEngine, DetectorConfig
from srpssm.lr_engine import PriorGrid
from srpssm.ssm_core import ChangeScenario, ModelSpec

CASES = {
    "iid m=33": (ModelSpec.iid_gaussian(), PriorGrid.gauss_legendre(0.5, 1.5, m=33)),
    "process_mean m=17": (ModelSpec.process_mean(0.5), PriorGrid.gauss_legendre(0.5, 1.5, m=17)),
}


def _time(engine, reps, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        engine.run(reps, 1)
        best = min(best, time.perf_counter() - t0)
    return best


def run(reps=2000, repeat=3, b=4.0):
    rows = []
    for name, (model, grid) in CASES.items():
        cfg = DetectorConfig(b=b, grid=grid)
        scen = ChangeScenario(0.0, 1.0, 5)
        py = _time(BatchEngine(model, scen, cfg, kernel=kernels.run_block_py), reps, repeat)
        row = {"case": name, "python_s": py, "compiled_s": None, "speedup": None}
        if kernels.run_block_compiled is not None:
            cy = _time(BatchEngine(model, scen, cfg, kernel=kernels.run_block_compiled), reps, repeat)
            row.update(compiled_s=cy, speedup=py / cy)
        rows.append(row)
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--b", type=float, default=4.0)
    args = p.parse_args(argv)
    print(f"{'case':<20} {'python [s]':>11} {'compiled [s]':>13} {'speedup':>8}")
    for r in run(args.reps, args.repeat, args.b):
        cy = "n/a" if r["compiled_s"] is None else f"{r['compiled_s']:.3f}"
        sp = "n/a" if r["speedup"] is None else f"{r['speedup']:.1f}x"
        print(f"{r['case']:<20} {r['python_s']:>11.3f} {cy:>13} {sp:>8}")


if __name__ == "__main__":
    main()
