"""Compare the numba and pure-numpy time-stepping kernels.

    python benchmarks/bench_kernels.py [--steps N] [--repeats R]

Both backends are imported directly, so the ``EDNMR_DISABLE_NUMBA`` switch
does not matter here. The numba kernels are compiled (or loaded from cache)
before timing. Results are checked for agreement before any time is reported.
"""

import argparse
import statistics
import time

import numpy as np

from ednmr._kernels import _numba, _numpy


def workload(dim=8, pairs=6, seed=0):
    """Random Hermitian term set on an 8-level (I = 3/2 donor) space."""
    rng = np.random.default_rng(seed)
    ii, jj, amp, det = [], [], [], []
    for i, j in rng.permutation([(i, j) for i in range(dim) for j in range(i + 1, dim)])[:pairs]:
        a = complex(rng.normal(), rng.normal()) * 3e4
        d = float(rng.normal()) * 2e5
        ii += [i, j]
        jj += [j, i]
        amp += [a, np.conj(a)]
        det += [d, -d]
    rho0 = np.diag(rng.dirichlet(np.ones(dim))).astype(complex)
    return (rho0, np.array(ii, np.int64), np.array(jj, np.int64), np.array(amp, complex),
            np.array(det, float))


def timed(fn, args, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--repeats", type=int, default=5)
    a = p.parse_args(argv)

    rho0, ii, jj, amp, det = workload()
    record = np.linspace(0, a.steps, 101).astype(np.int64)
    pw_args = (rho0, ii, jj, amp, det, 5e-8, a.steps, record)

    H0 = np.diag(np.linspace(-3e7, 3e7, 4)).astype(complex)
    V = np.zeros((2, 4, 4), complex)
    V[0, 0, 1] = V[0, 1, 0] = V[1, 2, 3] = V[1, 3, 2] = 1e5
    rk_steps = a.steps // 4
    rk_args = (H0, V, np.array([6e7, 2e7]), np.zeros(2), 2e-10, rk_steps,
               np.array([0, rk_steps], np.int64))

    # compile outside the timed region
    _numba.piecewise_propagate(*pw_args[:6], 2, np.array([2], np.int64))
    _numba.rk4_unitary(*rk_args[:5], 2, np.array([2], np.int64))

    print(f"{'kernel':<22}{'steps':>8}{'numpy [s]':>12}{'numba [s]':>12}{'speed-up':>10}")
    for name, npf, nbf, args, steps in [
        ("piecewise_propagate", _numpy.piecewise_propagate, _numba.piecewise_propagate, pw_args, a.steps),
        ("rk4_unitary", _numpy.rk4_unitary, _numba.rk4_unitary, rk_args, rk_steps),
    ]:
        t_np, out_np = timed(npf, args, a.repeats)
        t_nb, out_nb = timed(nbf, args, a.repeats)
        err = float(np.abs(out_np - out_nb).max())
        if err > 1e-9:
            raise SystemExit(f"{name}: backends disagree by {err:.2e}")
        print(f"{name:<22}{steps:>8}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
