"""Evaluation: landmark centroiding, residual displacement statistics,
regression against speed, ridge contrast and Fourier shell correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import io
from .volume import Grid, Volume


# -- landmark centroid --------------------------------------------------------

def weighted_centroid(volume: Volume, window: int = 11, center_index=None) -> np.ndarray:
    """Intensity-weighted mean position over a window around the global maximum.

    The window is clipped at the volume border.
    """
    data = np.asarray(volume.data, dtype=np.float64)
    c = np.unravel_index(int(np.argmax(data)), data.shape) if center_index is None else center_index
    h = window // 2
    lo = np.maximum(np.asarray(c) - h, 0)
    hi = np.minimum(np.asarray(c) + h + 1, data.shape)
    w = data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    total = w.sum()
    if not total > 0:
        raise ValueError("centroid window has no positive intensity")
    axes = volume.grid.axes()
    x, y, z = (a[l:u] for a, l, u in zip(axes, lo, hi))
    return np.array([
        np.einsum("ijk,i->", w, x) / total,
        np.einsum("ijk,j->", w, y) / total,
        np.einsum("ijk,k->", w, z) / total,
    ])


# -- residual motion ----------------------------------------------------------

@dataclass
class ResidualSeries:
    times: np.ndarray
    estimates: np.ndarray  # (K, 3) centroid per frame, probe frame
    displacement: np.ndarray  # (K, 2) lateral, elevational relative to frame 0
    onset: int  # first frame over the threshold, -1 if never
    moving: np.ndarray  # (K,) stage in motion
    speed_level: np.ndarray  # (K,) nominal stage speed, 0 when still
    direction: str = ""

    @property
    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.displacement, axis=1)

    def analysed(self) -> np.ndarray:
        """Frames during stage motion from the onset on."""
        keep = self.moving.copy()
        if self.onset < 0:
            return np.zeros_like(keep)
        keep[:self.onset] = False
        return keep


def detect_onset(displacement, threshold: float = 0.1) -> int:
    mag = np.linalg.norm(np.asarray(displacement).reshape(len(displacement), -1), axis=1)
    over = np.flatnonzero(mag > threshold)
    return int(over[0]) if len(over) else -1


def residual_series(record, roi_extent: float = 3.0, spacing: float = 0.1, window: int = 11,
                    threshold: float = 0.1, snr_db=None, frames=None) -> ResidualSeries:
    """Track the landmark in every frame by centroiding a fine local render.

    Each frame is rendered on a ``spacing`` grid centred on the previous
    estimate; the first grid is centred on the landmark's frame-0 image peak.
    """
    frames = np.arange(record.n_frames) if frames is None else np.asarray(frames)
    center = record.landmark_probe[frames[0]]
    center = np.rint(center / spacing) * spacing
    est = np.zeros((len(frames), 3))
    for i, k in enumerate(frames):
        grid = Grid.centered(center, roi_extent, spacing)
        vol = record.render(int(k), grid, snr_db=snr_db, stream=40) if snr_db is not None \
            else record.render(int(k), grid)
        est[i] = weighted_centroid(vol, window)
        center = np.rint(est[i] / spacing) * spacing
    disp = est[:, :2] - est[0, :2]
    t = record.times[frames]
    profile = record.world.profile
    return ResidualSeries(t, est, disp, detect_onset(disp, threshold), profile.moving(t),
                          profile.speed_level(t), str(record.config.scene.profile.direction))


@dataclass(frozen=True)
class ResidualStat:
    speed: float
    direction: str
    mean: float
    std: float
    n: int


def residual_statistics(series, levels=None) -> list:
    """Mean and std of the residual magnitude per speed level (and direction).

    ``series`` is one ResidualSeries or a list of them; series with the same
    direction are pooled.
    """
    if isinstance(series, ResidualSeries):
        series = [series]
    pooled: dict = {}
    for s in series:
        keep = s.analysed()
        mag = s.magnitude
        lv = s.speed_level
        for v in (np.unique(lv[keep]) if levels is None else levels):
            sel = keep & (lv == v)
            pooled.setdefault((float(v), s.direction), []).append(mag[sel])
    out = []
    for (v, d), parts in sorted(pooled.items()):
        x = np.concatenate(parts)
        out.append(ResidualStat(v, d, float(x.mean()) if len(x) else 0.0,
                                float(x.std()) if len(x) else 0.0, len(x)))
    return out


def statistics_from_values(values) -> tuple:
    x = np.asarray(values, dtype=np.float64)
    if len(x) == 0:
        return 0.0, 0.0
    return float(x.mean()), float(x.std())


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float


def linear_fit(x, y) -> LinearFit:
    """Ordinary least squares line."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError("x and y differ in length")
    if len(np.unique(x)) < 2:
        raise ValueError("a line needs at least two distinct x values")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(float(slope), float(intercept), r2)


def count_inversions(values, tolerance: float = 0.0):
    """(number of decreases, number larger than ``tolerance``) along a sequence."""
    d = -np.diff(np.asarray(values, dtype=np.float64))
    return int(np.sum(d > 0)), int(np.sum(d > tolerance))


def retention(record) -> float:
    return record.retention()


# -- ridges -------------------------------------------------------------------

def cross_profile(volume, axis_keep: int = 1) -> np.ndarray:
    """Sum of a volume over every axis except ``axis_keep``."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    axes = tuple(a for a in range(data.ndim) if a != axis_keep)
    return data.sum(axis=axes)


def ridge_dip(profile, min_height: float = 0.5) -> tuple:
    """Relative dip between the two strongest ridges of a 1D profile.

    Ridges are local maxima reaching ``min_height`` of the profile maximum
    (negative values are clipped to zero first). Returns (dip, (i, j)) with
    dip = 1 - min(between) / min(peak_i, peak_j), or (0, ()) when fewer than
    two ridges exist.
    """
    p = np.clip(np.asarray(profile, dtype=np.float64), 0.0, None)
    if p.max() <= 0:
        return 0.0, ()
    inner = np.flatnonzero((p[1:-1] > p[:-2]) & (p[1:-1] >= p[2:])) + 1
    inner = inner[p[inner] >= min_height * p.max()]
    if len(inner) < 2:
        return 0.0, ()
    top = inner[np.argsort(-p[inner], kind="stable")[:2]]
    i, j = sorted(int(v) for v in top)
    low = float(p[i:j + 1].min())
    peak = float(min(p[i], p[j]))
    return 1.0 - low / peak, (i, j)


# -- Fourier shell correlation ------------------------------------------------

@dataclass
class FSCResult:
    frequency: np.ndarray  # cycles per mm at each shell
    correlation: np.ndarray
    threshold: np.ndarray
    n_voxels: np.ndarray
    resolution: float  # mm; the Nyquist limit when the curve never crosses
    crossed: bool

    @property
    def resolution_um(self) -> float:
        return self.resolution * 1000.0


def half_bit_threshold(n) -> np.ndarray:
    r = 1.0 / np.sqrt(np.asarray(n, dtype=np.float64))
    return (0.2071 + 1.9102 * r) / (1.2071 + 0.9102 * r)


def _pad_cube(data, size):
    out = np.zeros((size,) * 3)
    out[:data.shape[0], :data.shape[1], :data.shape[2]] = data
    return out


def fsc(a, b, spacing=None, pad_cube: bool = True) -> FSCResult:
    """Shell-wise correlation of two volumes on identical grids.

    Shells are one DFT bin wide; both volumes are zero padded to a cube so
    that shells are isotropic. Only the half spectrum is transformed; the
    conjugate-symmetric half is accounted for by weights.
    """
    if isinstance(a, Volume) and isinstance(b, Volume):
        if a.shape != b.shape or not np.allclose(a.spacing, b.spacing) or not np.allclose(a.origin, b.origin):
            raise ValueError("FSC needs volumes on identical grids")
        spacing = float(a.spacing[0]) if spacing is None else spacing
        da, db = a.data, b.data
    else:
        da, db = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if da.shape != db.shape:
            raise ValueError("FSC needs volumes on identical grids")
        spacing = 1.0 if spacing is None else float(spacing)
    if not np.any(da) or not np.any(db):
        raise ValueError("FSC of an empty map is undefined")
    if pad_cube:
        n = max(da.shape)
        da, db = _pad_cube(da, n), _pad_cube(db, n)
        dims = (n, n, n)
    else:
        dims = da.shape
    fa = np.fft.rfftn(da)
    fb = np.fft.rfftn(db)
    kx = np.fft.fftfreq(dims[0]) * dims[0]
    ky = np.fft.fftfreq(dims[1]) * dims[1]
    kz = np.fft.rfftfreq(dims[2]) * dims[2]
    # frequency in units of the smallest axis' bin
    ref = min(dims)
    r = np.sqrt((kx[:, None, None] * ref / dims[0]) ** 2 + (ky[None, :, None] * ref / dims[1]) ** 2
                + (kz[None, None, :] * ref / dims[2]) ** 2)
    shell = np.rint(r).astype(np.int64)
    w = np.full(len(kz), 2.0)
    w[0] = 1.0
    if dims[2] % 2 == 0:
        w[-1] = 1.0
    w = np.broadcast_to(w[None, None, :], shell.shape)
    n_shells = ref // 2 + 1
    sel = shell < n_shells
    sh = shell[sel]
    ww = w[sel]
    cross = fa.real * fb.real + fa.imag * fb.imag
    num = np.bincount(sh, weights=(ww * cross[sel]), minlength=n_shells)
    pa = np.bincount(sh, weights=(ww * np.abs(fa[sel]) ** 2), minlength=n_shells)
    pb = np.bincount(sh, weights=(ww * np.abs(fb[sel]) ** 2), minlength=n_shells)
    cnt = np.bincount(sh, weights=ww, minlength=n_shells)
    den = np.sqrt(pa * pb)
    corr = np.divide(num, den, out=np.zeros(n_shells), where=den > 0)
    thr = half_bit_threshold(np.maximum(cnt, 1.0))
    freq = np.arange(n_shells) / (ref * spacing)
    res, crossed = 2.0 * spacing, False
    for k in range(1, n_shells):
        if corr[k] < thr[k]:
            d0, d1 = corr[k - 1] - thr[k - 1], corr[k] - thr[k]
            frac = d0 / (d0 - d1) if d0 > d1 else 0.0
            f = freq[k - 1] + frac * (freq[k] - freq[k - 1])
            res, crossed = (1.0 / f if f > 0 else math.inf), True
            break
    return FSCResult(freq, corr, thr, cnt, float(res), crossed)


def split_tracks_odd_even(tracks, grid: Grid):
    """Density/speed maps from tracks with even and odd indices."""
    from .ulm import accumulate_maps

    odd = [t for i, t in enumerate(tracks) if i % 2 == 1]
    even = [t for i, t in enumerate(tracks) if i % 2 == 0]
    return accumulate_maps(odd, grid), accumulate_maps(even, grid)


def write_fsc_csv(path, result: FSCResult, config_hash: str = ""):
    rows = zip(result.frequency, result.correlation, result.threshold, result.n_voxels)
    return io.write_csv(path, ["frequency_per_mm", "fsc", "half_bit", "n_voxels"], rows, config_hash)
