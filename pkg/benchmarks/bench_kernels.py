"""Time the compiled and numpy kernels on the same inputs.

Usage::

    python benchmarks/bench_kernels.py [--N 4000] [--repeat 20]

Prints one line per kernel with the median wall time of each backend and
the speed-up, after confirming the two backends agree.
"""
import argparse
import statistics
import time

import numpy as np

from meanscore import kernels
from meanscore import simulation as sim


def median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--N", type=int, default=4000)
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels are not built; only the numpy backend is available")

    cfg = sim.ScenarioConfig(N=args.N)
    theta = cfg.theta()
    rng = np.random.default_rng(0)
    cohort = sim.generate_cohort(cfg, theta, rng)
    w = rng.uniform(1, 5, cohort.size)
    times, events = sim.piecewise_exponential_times(rng, cohort.covariates, theta.alpha, theta.beta,
                                                    np.arange(1.0, 7.0))
    y, ev, X = cohort.time_index, cohort.event, cohort.covariates

    cases = {
        "accumulate (order 2)": lambda b: kernels.accumulate(y, ev, X, w, theta.alpha, theta.beta,
                                                             theta.link.code, 2, backend=b),
        "subject_scores": lambda b: kernels.subject_scores(y, ev, X, theta.alpha, theta.beta,
                                                           theta.link.code, backend=b),
        "cox_accumulate": lambda b: kernels.cox_accumulate(times, events, X, w, theta.beta, backend=b),
    }
    print(f"N = {cohort.size}, J = {cohort.n_times}, d = {X.shape[1]}, repeat = {args.repeat}")
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + f"{'speed-up':>10}")
    for name, fn in cases.items():
        ref = fn("python")
        for b in backends[1:]:
            out = fn(b)
            for a, c in zip(ref, out):
                np.testing.assert_allclose(c, a, rtol=1e-9, atol=1e-9)
        secs = {b: median_time(lambda b=b: fn(b), args.repeat) for b in backends}
        speed = secs["python"] / secs["cython"] if "cython" in secs else float("nan")
        print(f"{name:<22}" + "".join(f"{secs[b] * 1e3:>10.3f}ms" for b in backends) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
