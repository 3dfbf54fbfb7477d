"""Time the compiled likelihood kernel against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``.  Reports the per-call time
of one value-and-gradient evaluation on a scenario-1 dataset and on a
two-beam dataset, then the wall time of a complete fit with each kernel.
"""

import argparse
import timeit

import numpy as np

from fluxcal import _backend, _kernels_py
from fluxcal.estimator import Objective, fit_mle
from fluxcal.model import Hyperparams
from fluxcal.simulator import ConjoinerSpec, ScenarioSpec, simulate_conjoiner, simulate_dataset

try:
    from fluxcal import _kernels
except ImportError:
    _kernels = None


def kernel_args(obj, params):
    h = obj.hyper
    return (obj.n, obj.X, obj.V, np.asarray(params.phi), np.asarray(params.psi),
            np.ascontiguousarray(params.alpha), params.sigma, params.gamma,
            h.phi_max, h.tau, h.lambda_rate, obj.piecewise, h.kappa0)


def per_call(fn, args, repeat):
    best = min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=5))
    return best / repeat


def fit_time(obs, design, hyper, fn):
    saved = _backend.loglik_grad
    _backend.loglik_grad = fn
    try:
        t = timeit.default_timer()
        fit_mle(obs, design, hyper)
        return timeit.default_timer() - t
    finally:
        _backend.loglik_grad = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernel not built; only the fallback is available")

    obs1, design1, _ = simulate_dataset(ScenarioSpec.table(1, seed=0))
    obsc, designc, _, hyperc = simulate_conjoiner(ConjoinerSpec(seed=0))
    cases = [("sphere, 330 runs", obs1, design1, Hyperparams()),
             ("two-beam", obsc, designc, hyperc)]

    print(f"{'case':<20}{'kernel':<10}{'per call':>14}{'full fit':>12}")
    for label, obs, design, hyper in cases:
        obj = Objective(obs, design, hyper)
        a = kernel_args(obj, obj.initial())
        kernels = [("python", _kernels_py.loglik_grad)]
        if _kernels is not None:
            kernels.append(("cython", _kernels.loglik_grad))
        times = {}
        for name, fn in kernels:
            times[name] = per_call(fn, a, args.repeat)
            fit_s = fit_time(obs, design, hyper, fn)
            print(f"{label:<20}{name:<10}{times[name] * 1e6:>11.1f} us{fit_s:>10.2f} s")
        if len(times) == 2:
            print(f"{'':<20}speedup {times['python'] / times['cython']:.1f}x per call")


if __name__ == "__main__":
    main()
