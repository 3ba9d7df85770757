"""Delay-and-sum volume reconstruction, cropping and log-compressed MIPs."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import kernels
from .acoustics import ChannelFrame
from .scene import ArraySpec
from .volume import Grid, Volume

WORKERS_ENV = "ULMTRACK_MAX_WORKERS"


class TargetLostError(RuntimeError):
    """Requested crop centre lies outside the reconstructed field of view."""


def max_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


def das_iq(frame: ChannelFrame, points, array: ArraySpec, demod_freq: float | None = None,
           workers: int | None = None):
    """Pre-envelope in-phase and quadrature sums at arbitrary points (probe frame).

    The quadrature sum samples every channel a quarter period later, which
    for a narrowband echo is the 90 degree shifted copy of the in-phase sum.
    """
    f0 = demod_freq or array.center_freq
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    elements = np.ascontiguousarray(array.element_positions())
    if elements.shape[0] != frame.n_elements:
        raise ValueError(f"frame has {frame.n_elements} channels, array has {elements.shape[0]}")
    quarter = frame.sample_rate / (4.0 * f0)
    args = (frame.samples, elements)
    tail = (array.sound_speed, frame.sample_rate, frame.t0, quarter)
    workers = workers or max_workers()
    if workers == 1 or len(pts) < 4096:
        return kernels.das_iq(*args, pts, *tail)
    chunks = np.array_split(np.arange(len(pts)), workers)
    with ThreadPoolExecutor(workers) as ex:
        parts = list(ex.map(lambda idx: kernels.das_iq(*args, np.ascontiguousarray(pts[idx]), *tail), chunks))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def axial_subsamples(grid: Grid, array: ArraySpec, demod_freq: float | None = None) -> int:
    """Envelope samples per voxel along depth, about half a wavelength apart."""
    half_wave = array.sound_speed / (demod_freq or array.center_freq) / 2.0
    return max(1, int(round(float(grid.spacing[2]) / half_wave)))


def das_beamform(frame: ChannelFrame, grid: Grid, array: ArraySpec, demod_freq: float | None = None,
                 workers: int | None = None, frame_id: int = 0, timestamp: float = 0.0) -> Volume:
    """Envelope volume on ``grid`` (rectangular apodisation).

    The echo envelope is shorter in depth than a coarse voxel, so each voxel
    holds the RMS envelope of ``axial_subsamples`` points spread evenly over
    its depth extent; with one sub-sample this is sqrt(I^2 + Q^2) at the
    voxel centre.
    """
    n = axial_subsamples(grid, array, demod_freq)
    pts = grid.points()
    if n == 1:
        i, q = das_iq(frame, pts, array, demod_freq, workers)
        env = np.sqrt(i * i + q * q)
    else:
        offsets = ((np.arange(n) + 0.5) / n - 0.5) * float(grid.spacing[2])
        sub = pts[:, None, :] + np.outer(offsets, [0.0, 0.0, 1.0])[None]
        i, q = das_iq(frame, sub.reshape(-1, 3), array, demod_freq, workers)
        env = np.sqrt(np.mean((i * i + q * q).reshape(-1, n), axis=1))
    return Volume(env.reshape(grid.shape), grid, frame_id, timestamp)


def online_grid(center, extent=12.5, spacing=0.4) -> Grid:
    return Grid.centered(center, extent, spacing)


def crop_online_volume(volume: Volume, center, extent=12.5) -> Volume:
    """Sub-volume of ``round(extent / spacing)`` voxels per axis around ``center``.

    The centre snaps to the nearest source voxel so values are copied, not
    interpolated. Parts of the crop outside the source volume are zero and
    counted in ``meta['padded_voxels']``.
    """
    src = volume.grid
    if not bool(src.contains(center)):
        raise TargetLostError(f"crop centre {np.round(center, 3)} is outside the field of view")
    c_idx = np.rint(src.index_of(center)).astype(int)
    n = np.maximum(1, np.rint(np.broadcast_to(extent, (3,)) / src.spacing).astype(int))
    lo = c_idx - (n - 1) // 2
    out = np.zeros(tuple(n))
    s_lo = np.maximum(lo, 0)
    s_hi = np.minimum(lo + n, np.asarray(src.shape))
    if np.all(s_hi > s_lo):
        d_lo = s_lo - lo
        d_hi = d_lo + (s_hi - s_lo)
        out[d_lo[0]:d_hi[0], d_lo[1]:d_hi[1], d_lo[2]:d_hi[2]] = \
            volume.data[s_lo[0]:s_hi[0], s_lo[1]:s_hi[1], s_lo[2]:s_hi[2]]
    inside = int(np.prod(np.clip(s_hi - s_lo, 0, None)))
    grid = Grid(src.position(lo), src.spacing, tuple(n))
    meta = dict(volume.meta)
    meta["padded_voxels"] = int(out.size - inside)
    return Volume(out, grid, volume.frame_id, volume.timestamp, meta)


def log_compress(data, dynamic_range_db: float = 20.0, vmax: float | None = None) -> np.ndarray:
    """Map 20 log10(v / vmax), clamped to [-DR, 0] dB, linearly onto [0, 255]."""
    if dynamic_range_db <= 0:
        raise ValueError("dynamic range must be positive")
    data = np.abs(np.asarray(data, dtype=np.float64))
    vmax = float(data.max()) if vmax is None else float(vmax)
    if vmax <= 0:
        return np.zeros(data.shape)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(data / vmax)
    db = np.clip(db, -dynamic_range_db, 0.0)
    return (db + dynamic_range_db) / dynamic_range_db * 255.0


def log_mip(volume, dynamic_range_db: float = 20.0, axis: int = 1, vmax: float | None = None) -> np.ndarray:
    """Maximum intensity projection along ``axis`` of the log-compressed volume.

    Rows of the returned image run along the first remaining axis, so
    ``axis=1`` gives an x-z view with x down the rows.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    return log_compress(data, dynamic_range_db, vmax).max(axis=axis)
