"""Wall-clock comparison of the compiled and pure-Python count kernels.

Both backends consume the same random streams, so each row also checks that
the per-replicate results agree bitwise.

    python benchmarks/bench_kernel.py --replicates 200
"""

import argparse
import time

import numpy as np

from superbranch import kernel
from superbranch.mechanisms import build_particle_laws, simple_spec
from superbranch.particles import SimConfig, run_replicates
from superbranch.zoo import make_rebirth

SWAP = [[0.0, 1.0], [1.0, 0.0]]
RING = np.array([[-2.0, 1.0, 0.0, 1.0], [1.0, -2.0, 1.0, 0.0], [0.0, 1.0, -2.0, 1.0], [1.0, 0.0, 1.0, -2.0]])

SCENARIOS = {
    "binary critical, 1 site": (simple_spec([[0.0]], c=0.5), [1.0]),
    "rebirth swap, 2 sites": (make_rebirth(np.zeros((2, 2)), 1.0, SWAP), [1.0, 0.0]),
    "ring with atoms, 4 sites": (
        simple_spec(RING, b=0.2, c=0.3, atoms=[(0.5, 0.4)], beta=0.5, pis=np.full((4, 4), 0.25), d=0.5,
                    count_atoms=[(1.0, 0.3)]),
        [1.0, 1.0, 0.0, 0.0],
    ),
}


def timed(laws, spec, mu, k, replicates, backend):
    start = time.perf_counter()
    res = run_replicates(laws, spec, mu, k, SimConfig(1.0), replicates, 1, threads=1, backend=backend)
    return time.perf_counter() - start, res


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--k", type=int, default=100)
    args = p.parse_args()
    if "compiled" not in kernel.BACKENDS:
        raise SystemExit("compiled extension is not built; run `pip install --no-build-isolation -e .`")
    print(f"{'scenario':28s} {'events':>10s} {'python s':>10s} {'compiled s':>11s} {'speedup':>8s}  identical")
    for name, (spec, mu) in SCENARIOS.items():
        laws = build_particle_laws(spec, args.k)
        t_py, r_py = timed(laws, spec, mu, args.k, args.replicates, "python")
        t_c, r_c = timed(laws, spec, mu, args.k, args.replicates, "compiled")
        same = np.array_equal(r_py.values, r_c.values) and np.array_equal(r_py.events, r_c.events)
        print(f"{name:28s} {int(r_c.events.sum()):10d} {t_py:10.3f} {t_c:11.3f} {t_py / t_c:7.1f}x  {same}")


if __name__ == "__main__":
    main()
