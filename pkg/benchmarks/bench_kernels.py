"""Compare the numba and numpy density kernels.

Times one (J, P) log-density evaluation for the plug-in and grid-averaged
kernels on a DC3000-sized problem and checks that both backends agree.

    python benchmarks/bench_kernels.py --genes 5000 --Q 1000 --threads 1
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from lnmix import _kernels
from lnmix.density import GeneStats
from lnmix.simulate import generate, dc3000_spec
from lnmix.variance_prior import VariancePrior, quantile_grid


def best_of(fn, repeat):
    fn()  # warm-up (numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--genes", type=int, default=5000)
    ap.add_argument("--Q", type=int, default=1000)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    spec = dc3000_spec("LN3MV", J=args.genes, seed=1)
    data, truth = generate(spec)
    st = GeneStats.from_values(data.values, data.design)
    p = spec.patterns
    base = (st.csum, st.wss, st.reps, p.condition_group_matrix, p.group_sizes, p.n_groups, 0.0)
    grid = quantile_grid(VariancePrior(spec.nu, spec.phi), args.Q)
    kernels = {
        "plug-in, common variance": lambda b: _kernels.loglik(*base, 0.0116, 0.151, 0.813, threads=args.threads, backend=b),
        "plug-in, per-gene variance": lambda b: _kernels.loglik(*base, truth.sigma2, 0.151, 0.813, threads=args.threads, backend=b),
        f"grid average, Q={args.Q}": lambda b: _kernels.loglik_gv(*base, grid, 0.101, 0.832, threads=args.threads, backend=b),
    }
    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    print(f"J={args.genes}, P={p.P}, I={spec.design.I}, threads={args.threads}, best of {args.repeat}")
    print(f"{'kernel':<30}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}{'max diff':>12}")
    for label, fn in kernels.items():
        res = {b: best_of(lambda: fn(b), args.repeat) for b in backends}
        line = f"{label:<30}" + "".join(f"{res[b][0] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) == 2:
            speed = res["numpy"][0] / res["numba"][0]
            diff = float(np.max(np.abs(res["numpy"][1] - res["numba"][1])))
            line += f"{speed:>9.1f}x{diff:>12.1e}"
        print(line)


if __name__ == "__main__":
    main()
