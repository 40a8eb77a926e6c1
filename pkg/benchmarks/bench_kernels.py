"""Time the compiled and numpy kernel backends on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from skippy import kernels
from skippy.instances import random_tabular
from skippy.mdp import Policy, StagedMdp, _sampling_tables


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def sampler_case(mdp: StagedMdp, n: int):
    sizes, pi_cdf, p_cdf, rmean = _sampling_tables(mdp, Policy.uniform(mdp))
    return lambda impl: kernels.sample_batch(0, 0, n, sizes, pi_cdf, p_cdf, rmean, False, impl=impl)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=16384)
    args = ap.parse_args(argv)
    try:
        kernels.backend("cython")
    except ImportError:
        print("compiled extension not built; only the python backend is available")
        return 1

    rng = np.random.default_rng(0)
    mdp = random_tabular([1, 3, 3, 3, 3, 1], 3, rng)
    sizes, r, P = mdp.padded
    cases = {
        f"sample_batch n={args.n}": sampler_case(mdp, args.n),
        "stage_q_tables h=0": lambda impl: kernels.stage_q_tables(0, sizes, r, P, impl=impl),
        "max_action_gaps h=0": lambda impl: kernels.max_action_gaps(0, sizes, r, P, impl=impl),
    }
    print(f"{'kernel':<26}{'python s':>12}{'cython s':>12}{'speedup':>10}  match")
    for name, fn in cases.items():
        tp, out_p = _best(lambda: fn("python"), args.repeat)
        tc, out_c = _best(lambda: fn("cython"), args.repeat)
        flat_p = out_p if isinstance(out_p, tuple) else (out_p,)
        flat_c = out_c if isinstance(out_c, tuple) else (out_c,)
        match = all(np.allclose(a, b, atol=1e-12) for a, b in zip(flat_p, flat_c))
        print(f"{name:<26}{tp:>12.4f}{tc:>12.4f}{tp / tc:>10.1f}  {match}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
