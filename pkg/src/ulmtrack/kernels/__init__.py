"""Hot loops, compiled when available.

The Cython extension ``_ckernels`` is used when it has been built; otherwise
the numpy versions in ``_pykernels`` are used. Set ``ULMTRACK_PURE_PYTHON=1``
to force the fallback.
"""
import os

from . import _pykernels as python_backend

BACKEND = "python"
compiled_backend = None

if os.environ.get("ULMTRACK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
if compiled_backend is not None:
    BACKEND = "cython"

splat_gaussians = _impl.splat_gaussians
trilinear_ssd = _impl.trilinear_ssd
simulate_rf = _impl.simulate_rf
das_iq = _impl.das_iq

__all__ = [
    "BACKEND",
    "python_backend",
    "compiled_backend",
    "splat_gaussians",
    "trilinear_ssd",
    "simulate_rf",
    "das_iq",
]
