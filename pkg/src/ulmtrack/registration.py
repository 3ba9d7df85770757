"""Translation-only registration of volumes.

Convention: the estimated ``t`` satisfies ``moving(x + t) ~ reference(x)``,
so ``t`` is the displacement of the image content from reference to moving.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .io import write_csv
from .volume import Grid, Volume


class RegistrationError(RuntimeError):
    pass


class DegenerateInputError(RegistrationError):
    """Normal equations are singular, e.g. a featureless volume."""


@dataclass(frozen=True)
class Translation3:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.dx, self.dy, self.dz])):
            raise ValueError("translation must be finite")

    @classmethod
    def of(cls, v) -> "Translation3":
        v = np.asarray(v, dtype=np.float64).reshape(3)
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def __neg__(self):
        return Translation3(-self.dx, -self.dy, -self.dz)


@dataclass
class RegResult:
    t: Translation3
    final_cost: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)  # (level, iteration, cost, dx, dy, dz)
    overlap: float = 1.0
    message: str = ""

    @property
    def levels(self) -> list:
        return sorted({row[0] for row in self.trace}, reverse=True)


def _check_pair(ref: Volume, mov: Volume):
    if not np.allclose(ref.spacing, mov.spacing):
        raise ValueError("reference and moving volumes must share a voxel spacing")


def _offset(ref: Volume, mov: Volume, t) -> np.ndarray:
    return (ref.origin + np.asarray(t, dtype=np.float64) - mov.origin) / ref.spacing


def _terms(ref: Volume, mov: Volume, t):
    return kernels.trilinear_ssd(ref.data, mov.data, _offset(ref, mov, t), ref.spacing)


def _hessian(gg) -> np.ndarray:
    xx, xy, xz, yy, yz, zz = gg
    return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])


def ssd_cost(reference: Volume, moving: Volume, t, min_overlap: float = 0.5, return_overlap=False):
    """Overlap-normalised SSD and its analytic gradient with respect to ``t``.

    cost = sum((ref(v) - mov(v + t))^2) / N over the N reference voxels whose
    shifted position falls inside the moving volume.
    """
    _check_pair(reference, moving)
    t = t.as_array() if isinstance(t, Translation3) else np.asarray(t, dtype=np.float64)
    count, sse, rg, _ = _terms(reference, moving, t)
    if count == 0:
        raise RegistrationError("no overlap between reference and shifted moving volume: diverged")
    overlap = count / reference.data.size
    cost = sse / count
    grad = -2.0 * rg / count
    if return_overlap:
        return cost, grad, overlap
    return cost, grad


def _prepare(vol: Volume) -> Volume:
    return Volume(np.ascontiguousarray(vol.data), vol.grid, vol.frame_id, vol.timestamp)


def downsample(vol: Volume, factor: int = 2) -> Volume:
    """Mean-pool by ``factor`` along every axis (trailing voxels dropped)."""
    n = [s // factor for s in vol.shape]
    if min(n) < 2:
        raise ValueError("volume too small to downsample further")
    d = vol.data[:n[0] * factor, :n[1] * factor, :n[2] * factor]
    d = d.reshape(n[0], factor, n[1], factor, n[2], factor).mean(axis=(1, 3, 5))
    return Volume(np.ascontiguousarray(d), vol.grid.downsampled(factor), vol.frame_id, vol.timestamp)


def prefilter(vol: Volume, sigma_voxels: float) -> Volume:
    """Gaussian low-pass; keeps trilinear interpolation from modulating noise power."""
    if sigma_voxels <= 0:
        return vol
    return vol.with_data(gaussian_filter(vol.data, sigma_voxels, mode="nearest", truncate=3.0))


def pyramid(vol: Volume, levels: int, sigma_voxels: float = 0.0):
    """[finest, ..., coarsest]; stops early if the volume gets too small.

    Each level is the mean-pooled previous level, smoothed again by
    ``sigma_voxels`` of its own spacing, so blur grows with the level.
    """
    out = [_prepare(prefilter(vol, sigma_voxels))]
    for _ in range(levels - 1):
        if min(s // 2 for s in out[-1].shape) < 4:
            break
        out.append(_prepare(prefilter(downsample(out[-1]), sigma_voxels)))
    return out


def _better(cost, t, best_cost, best_t, tol):
    if cost < best_cost - tol:
        return True
    return abs(cost - best_cost) <= tol and np.linalg.norm(t) < np.linalg.norm(best_t)


@dataclass
class GDOptions:
    levels: int = 3
    initial_step: float | None = None  # mm at the finest level; None = one voxel
    min_step: float = 0.01  # mm at the finest level; both steps double per coarser level
    relaxation: float = 0.5
    max_iters: int = 100  # per level
    search_bound: float = 10.0
    min_overlap: float = 0.5
    prefilter: float = 1.0  # Gaussian sigma in voxels, 0 disables


def register_gd(reference: Volume, moving: Volume, opts: GDOptions | None = None, init=None) -> RegResult:
    """Regular-step gradient descent over a mean-pooled pyramid.

    Each step moves ``step`` mm against the normalised gradient; the step is
    multiplied by ``relaxation`` whenever the gradient turns by more than 90
    degrees or a step would leave too little overlap. A level ends when the
    step drops below its minimum or after ``max_iters`` steps. The best point
    seen at the finest level is returned.
    """
    opts = opts or GDOptions()
    _check_pair(reference, moving)
    refs = pyramid(reference, opts.levels, opts.prefilter)
    movs = pyramid(moving, opts.levels, opts.prefilter)
    n_levels = min(len(refs), len(movs))
    t = np.zeros(3) if init is None else np.asarray(
        init.as_array() if isinstance(init, Translation3) else init, dtype=np.float64).copy()
    first_step = opts.initial_step if opts.initial_step is not None else float(reference.spacing.min())
    trace, total, converged, overlap = [], 0, True, 1.0
    best_t, best_cost = t.copy(), np.inf
    for level in range(n_levels - 1, -1, -1):
        ref, mov = refs[level], movs[level]
        scale = 2.0 ** level
        step, min_step = first_step * scale, opts.min_step * scale
        count, sse, rg, _ = _terms(ref, mov, t)
        if count == 0:
            raise RegistrationError("registration diverged: no overlap at the starting point")
        g_prev = None
        best_t, best_cost = t.copy(), np.inf
        level_done = False
        it = 0
        while True:
            cost = sse / count
            overlap = count / ref.data.size
            trace.append((level, it, cost, *t))
            if _better(cost, t, best_cost, best_t, 1e-12 * max(cost, 1e-300)):
                best_t, best_cost = t.copy(), cost
            if it == opts.max_iters:
                break
            g = -2.0 * rg / count
            gn = np.linalg.norm(g)
            if gn == 0.0:
                level_done = True
                break
            if g_prev is not None and g @ g_prev < 0:
                step *= opts.relaxation
            while step >= min_step:
                t_new = t - step * g / gn
                if np.linalg.norm(t_new) > opts.search_bound:
                    t_new *= opts.search_bound / np.linalg.norm(t_new)
                c_new, s_new, rg_new, _ = _terms(ref, mov, t_new)
                if c_new >= opts.min_overlap * ref.data.size:
                    break
                step *= opts.relaxation
            if step < min_step:
                level_done = True
                break
            t, count, sse, rg = t_new, c_new, s_new, rg_new
            g_prev = g
            it += 1
            total += 1
        t = best_t.copy()
        if level == 0:
            converged = level_done
    msg = "" if converged else "max iterations reached at finest level"
    return RegResult(Translation3.of(best_t), float(best_cost), total, converged, trace, overlap, msg)


@dataclass
class LMOptions:
    max_iters: int = 50
    tol: float = 1e-3  # mm
    damping: float = 1e-3
    levels: int = 1
    max_rejections: int = 20
    search_bound: float = 10.0
    prefilter: float = 1.0


def _lm_level(ref: Volume, mov: Volume, t, opts: LMOptions, level: int, trace):
    count, sse, rg, gg = _terms(ref, mov, t)
    if count == 0:
        raise RegistrationError("registration diverged: no overlap")
    cost = sse / count
    trace.append((level, 0, cost, *t))
    lam = opts.damping
    iters = 0
    converged = False
    while iters < opts.max_iters:
        H = _hessian(gg)
        scale = np.trace(H)
        if not np.isfinite(scale) or scale <= 0 or np.linalg.eigvalsh(H)[0] <= 1e-10 * scale:
            raise DegenerateInputError("normal equations are singular: image has no usable gradient")
        rejected = 0
        while True:
            A = H + lam * np.diag(np.diag(H))
            delta = np.linalg.solve(A, rg)
            if np.linalg.norm(delta) < opts.tol:
                converged = True
                break
            t_new = t + delta
            c_new, s_new, rg_new, gg_new = _terms(ref, mov, t_new)
            cost_new = s_new / c_new if c_new else np.inf
            if cost_new < cost and np.linalg.norm(t_new) <= opts.search_bound:
                t, cost, rg, gg = t_new, cost_new, rg_new, gg_new
                lam /= 10.0
                break
            lam *= 10.0
            rejected += 1
            if rejected >= opts.max_rejections:
                converged = True  # no descent direction left at this damping
                break
        if converged:
            break
        iters += 1
        trace.append((level, iters, cost, *t))
    return t, cost, iters, converged, count / ref.data.size


def register_lm(reference: Volume, moving: Volume, opts: LMOptions | None = None, init=None) -> RegResult:
    """Levenberg-Marquardt on the residuals r(v) = ref(v) - mov(v + t).

    Damping is multiplied by 10 after a rejected step and divided by 10 after
    an accepted one; iterations stop when the update is shorter than ``tol``.
    Cost is non-increasing across accepted steps.
    """
    opts = opts or LMOptions()
    _check_pair(reference, moving)
    t = np.zeros(3) if init is None else np.asarray(
        init.as_array() if isinstance(init, Translation3) else init, dtype=np.float64).copy()
    refs = pyramid(reference, opts.levels, opts.prefilter)
    movs = pyramid(moving, opts.levels, opts.prefilter)
    n_levels = min(len(refs), len(movs))
    trace, total = [], 0
    for level in range(n_levels - 1, -1, -1):
        t, cost, iters, converged, overlap = _lm_level(refs[level], movs[level], t, opts, level, trace)
        total += iters
    msg = "" if converged else "max iterations reached"
    return RegResult(Translation3.of(t), float(cost), total, converged, trace, overlap, msg)


def _shift_axis(data, axis: int, u: float):
    """Linear resample along one axis: out[i] = data(i + u), zero outside [0, n-1]."""
    n = data.shape[axis]
    a = int(np.floor(u))
    f = u - a
    out = np.zeros_like(data)
    idx = np.arange(n)
    if f == 0.0:
        src = idx + a
        ok = (src >= 0) & (src <= n - 1)
        sl_out = [slice(None)] * 3
        sl_in = [slice(None)] * 3
        sl_out[axis] = idx[ok]
        sl_in[axis] = src[ok]
        out[tuple(sl_out)] = data[tuple(sl_in)]
        return out
    src = idx + a
    ok = (src >= 0) & (src + 1 <= n - 1)
    sl_out = [slice(None)] * 3
    s0 = [slice(None)] * 3
    s1 = [slice(None)] * 3
    sl_out[axis] = idx[ok]
    s0[axis] = src[ok]
    s1[axis] = src[ok] + 1
    out[tuple(sl_out)] = (1.0 - f) * data[tuple(s0)] + f * data[tuple(s1)]
    return out


def resample_translate(volume: Volume, t) -> Volume:
    """Trilinear samples of ``volume`` at ``x + t`` on its own grid; zero outside."""
    t = t.as_array() if isinstance(t, Translation3) else np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("translation must be finite")
    u = t / volume.spacing
    data = volume.data
    for ax in range(3):
        if u[ax] != 0.0:
            data = _shift_axis(data, ax, float(u[ax]))
    return volume.with_data(data.copy() if data is volume.data else data)


def write_trace_csv(path, result: RegResult, config_hash: str = ""):
    return write_csv(path, ["level", "iteration", "cost", "dx", "dy", "dz"], result.trace, config_hash)
