"""Compiled versus pure-Python kernels on workloads of realistic size.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``. Each kernel is
timed on both backends (best of N) and the outputs are compared.
"""
from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from ulmtrack import kernels
from ulmtrack.acoustics import ChannelParams
from ulmtrack.scene import ArraySpec


def best_of(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workloads(rng):
    """name -> (kernel name, argument tuple)."""
    # online crop: ~2000 speckle scatterers splatted on a 31^3 grid at 0.4 mm
    pts = np.ascontiguousarray(rng.uniform([-6, -6, 14], [6, 6, 26], (2000, 3)))
    amps = rng.uniform(0.1, 1.0, 2000)
    sigma = np.array([0.4, 0.4, 0.25]) / 2.3548200450309493
    splat = (pts, amps, np.array([-6.0, -6.0, 14.0]), np.full(3, 0.4), (31, 31, 31), sigma)

    # one SSD/gradient evaluation on a 70^3 B-mode volume
    from scipy.ndimage import gaussian_filter

    ref = np.ascontiguousarray(gaussian_filter(rng.normal(size=(70, 70, 70)), 1.5))
    mov = np.ascontiguousarray(np.roll(ref, 3, axis=0))
    ssd = (ref, mov, np.array([2.6, 0.3, -0.4]), np.full(3, 0.1))

    # channel data for 20 scatterers on the full 32 x 32 array
    array = ArraySpec()
    params = ChannelParams()
    el = np.ascontiguousarray(array.element_positions())
    spts = np.ascontiguousarray(rng.uniform([-3, -3, 15], [3, 3, 25], (20, 3)))
    samps = rng.uniform(0.2, 1.0, 20)
    rf_args = (spts, samps, el, array.sound_speed, params.sample_rate, params.t0, params.n_samples(array),
               array.center_freq, params.pulse_exponent(array.center_freq),
               params.half_window(array.center_freq), False)
    rf = np.ascontiguousarray(kernels.python_backend.simulate_rf(*rf_args))

    # delay-and-sum of that data on 4000 voxels
    q = np.ascontiguousarray(rng.uniform([-3, -3, 15], [3, 3, 25], (4000, 3)))
    das = (rf, el, q, array.sound_speed, params.sample_rate, params.t0,
           params.sample_rate / (4.0 * array.center_freq))
    return {"splat_gaussians": splat, "trilinear_ssd": ssd, "simulate_rf": rf_args, "das_iq": das}


def max_difference(a, b) -> float:
    if isinstance(a, tuple):
        return max(max_difference(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    compiled = kernels.compiled_backend
    if compiled is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'python s':>10} {'compiled s':>11} {'speedup':>8} {'max |diff|':>11}")
    for name, fargs in workloads(rng).items():
        py_fn = getattr(kernels.python_backend, name)
        c_fn = getattr(compiled, name)
        t_py = best_of(lambda: py_fn(*fargs), args.repeat)
        t_c = best_of(lambda: c_fn(*fargs), args.repeat)
        diff = max_difference(py_fn(*fargs), c_fn(*fargs))
        print(f"{name:<16} {t_py:>10.4f} {t_c:>11.4f} {t_py / t_c:>7.1f}x {diff:>11.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
