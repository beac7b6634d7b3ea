"""Wall time of the hot kernels with numba on and off.

    python benchmarks/bench_kernels.py [--repeat 3]

Each configuration runs in a fresh interpreter because the numba flag is
read at import time. Compile time is excluded by a warm-up call.
"""
import argparse
import json
import os
import subprocess
import sys

CASES = r"""
import json, sys, time
import numpy as np
from afmrl import _jit
from afmrl.kernels import ncut_batch
from afmrl.network import build_grid
from afmrl.partition import PartitionSpace
from afmrl.sim import ArrivalProcess, MaxPressure, Scenario, run_episode

repeat = int(sys.argv[1])
net = build_grid(4, 4)
rng = np.random.default_rng(0)
F = np.where(net.adjacency, rng.random((16, 16)), 0.0)
labels = rng.integers(0, 4, size=(17705, 16))
sc = Scenario(net, ArrivalProcess(rate=300), horizon=720)


def best(fn):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


res = {
    "numba": _jit.USE_NUMBA,
    "sim_episode_720": best(lambda: run_episode(MaxPressure(), sc, seed=1)),
    "ncut_17705_partitions": best(lambda: ncut_batch(F, labels, 4)),
    "enumerate_4x4": best(lambda: PartitionSpace(net, 4, 2).enumerate()),
}
print(json.dumps(res))
"""


def run(disable: bool, repeat: int) -> dict:
    env = dict(os.environ, AFMRL_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", CASES, str(repeat)], env=env, capture_output=True, text=True,
                         check=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    fast, slow = run(False, args.repeat), run(True, args.repeat)
    print(f"{'kernel':<24}{'numba s':>10}{'fallback s':>12}{'speed-up':>10}")
    for key in fast:
        if key == "numba":
            continue
        print(f"{key:<24}{fast[key]:>10.4f}{slow[key]:>12.4f}{slow[key] / fast[key]:>9.1f}x")


if __name__ == "__main__":
    main()
