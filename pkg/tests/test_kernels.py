import numpy as np
import pytest

from ulmtrack import kernels
from ulmtrack.kernels import python_backend

compiled = kernels.compiled_backend
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def _scatterers(rng, n=6):
    pts = rng.uniform([-1.5, -1.5, 5.0], [1.5, 1.5, 8.0], (n, 3))
    return np.ascontiguousarray(pts), rng.uniform(0.2, 1.0, n)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


@needs_compiled
def test_splat_parity(rng):
    pts, amps = _scatterers(rng)
    args = (pts, amps, np.array([-2.0, -2.0, 4.0]), np.array([0.2, 0.2, 0.1]), (21, 21, 41),
            np.array([0.17, 0.17, 0.106]))
    np.testing.assert_allclose(compiled.splat_gaussians(*args), python_backend.splat_gaussians(*args),
                               rtol=0, atol=1e-12)


@needs_compiled
def test_trilinear_ssd_parity(rng):
    ref = rng.random((12, 11, 10))
    mov = rng.random((12, 11, 10))
    for off in ([0.0, 0.0, 0.0], [0.3, -1.7, 2.25], [-3.5, 0.5, 0.0]):
        off = np.array(off)
        c = compiled.trilinear_ssd(ref, mov, off, np.array([0.1, 0.1, 0.1]))
        p = python_backend.trilinear_ssd(ref, mov, off, np.array([0.1, 0.1, 0.1]))
        assert c[0] == p[0]
        np.testing.assert_allclose(c[1], p[1], rtol=1e-12)
        np.testing.assert_allclose(c[2], p[2], rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(c[3], p[3], rtol=1e-10, atol=1e-10)


@needs_compiled
def test_rf_and_das_parity(rng):
    pts, amps = _scatterers(rng, 3)
    el = np.ascontiguousarray(np.array([[x, y, 0.0] for x in (-0.6, 0.0, 0.6) for y in (-0.6, 0.6)]))
    a = 2.0e2
    for directivity in (False, True):
        args = (pts, amps, el, 1.54, 31.2, 0.0, 400, 7.8, a, 0.3, directivity)
        np.testing.assert_allclose(compiled.simulate_rf(*args), python_backend.simulate_rf(*args),
                                   atol=1e-12)
    rf = np.ascontiguousarray(python_backend.simulate_rf(pts, amps, el, 1.54, 31.2, 0.0, 400, 7.8, a, 0.3))
    q = np.ascontiguousarray(rng.uniform([-1, -1, 5], [1, 1, 8], (50, 3)))
    ci, cq = compiled.das_iq(rf, el, q, 1.54, 31.2, 0.0, 1.0)
    pi, pq = python_backend.das_iq(rf, el, q, 1.54, 31.2, 0.0, 1.0)
    np.testing.assert_allclose(ci, pi, atol=1e-12)
    np.testing.assert_allclose(cq, pq, atol=1e-12)


def test_splat_peak_equals_amplitude_on_voxel():
    out = python_backend.splat_gaussians(np.array([[0.4, 0.4, 0.4]]), np.array([2.5]), np.zeros(3),
                                         np.full(3, 0.1), (9, 9, 9), np.full(3, 0.1))
    assert out[4, 4, 4] == pytest.approx(2.5)
    assert out.max() == out[4, 4, 4]


def test_ssd_zero_for_identical_volumes(rng):
    v = rng.random((8, 8, 8))
    count, sse, rg, gg = kernels.trilinear_ssd(v, v, np.zeros(3), np.full(3, 0.1))
    assert count == v.size
    assert sse == 0.0


def test_fallback_selected_by_environment():
    import os
    import subprocess
    import sys

    env = dict(os.environ, ULMTRACK_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from ulmtrack import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_benchmark_runs(capsys):
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    assert bench.main(["--repeat", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5
