"""Offline super-resolution pipeline: motion correction, Lagrangian contrast
reconstruction, bubble detection, tracking and map accumulation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, maximum_filter, uniform_filter
from scipy.optimize import linear_sum_assignment
from scipy.signal import fftconvolve

from . import acoustics, beamform, io
from .registration import LMOptions, RegistrationError, Translation3, prefilter, register_lm
from .scene import BUBBLE, FWHM_TO_SIGMA
from .volume import Grid, Volume


class InsufficientDataError(RuntimeError):
    pass


@dataclass(frozen=True)
class Localization:
    position: tuple
    ncc_peak: float
    frame_id: int
    timestamp: float


@dataclass
class Track:
    localizations: list = field(default_factory=list)
    velocities: np.ndarray | None = None  # (n, 3) smoothed per-localization velocity

    def __len__(self):
        return len(self.localizations)

    @property
    def positions(self) -> np.ndarray:
        return np.array([loc.position for loc in self.localizations], dtype=np.float64).reshape(-1, 3)

    @property
    def times(self) -> np.ndarray:
        return np.array([loc.timestamp for loc in self.localizations], dtype=np.float64)

    @property
    def frames(self) -> np.ndarray:
        return np.array([loc.frame_id for loc in self.localizations], dtype=np.int64)

    def link_speeds(self) -> np.ndarray:
        """Speed of each link between consecutive localizations (mm/s)."""
        if len(self) < 2:
            return np.zeros(0)
        v = self.velocities if self.velocities is not None else estimate_velocities(self.positions, self.times)
        return np.linalg.norm(0.5 * (v[1:] + v[:-1]), axis=1)

    @property
    def mean_speed(self) -> float:
        s = self.link_speeds()
        return float(s.mean()) if len(s) else 0.0


@dataclass
class SRMaps:
    density: np.ndarray
    speed: np.ndarray
    grid: Grid

    @classmethod
    def zeros(cls, grid: Grid) -> "SRMaps":
        return cls(np.zeros(grid.shape), np.zeros(grid.shape), grid)


# -- motion correction and Lagrangian reconstruction --------------------------

def correct_residual_motion(frames, opts: LMOptions | None = None, warm_start: bool = True,
                            cold_levels: int = 4):
    """Translation of every frame relative to the first one.

    With ``warm_start`` each frame starts from the previous estimate at the
    finest level; otherwise every frame is solved from zero over the full
    pyramid. Returns (translations, results); a failed frame reuses the
    previous translation and has ``None`` as its result.
    """
    opts = opts or LMOptions()
    cold = LMOptions(**{**opts.__dict__, "levels": cold_levels})
    # single-level warm starts reuse one smoothed reference
    warm = LMOptions(**{**opts.__dict__, "prefilter": 0.0}) if opts.levels == 1 else opts
    out, results = [], []
    ref = ref_f = None
    prev = np.zeros(3)
    for k, vol in enumerate(frames):
        if ref is None:
            ref = vol
            ref_f = prefilter(vol, opts.prefilter) if opts.levels == 1 else vol
            out.append(Translation3())
            results.append(None)
            continue
        try:
            if warm_start and k > 1:
                mov = prefilter(vol, opts.prefilter) if opts.levels == 1 else vol
                res = register_lm(ref_f, mov, warm, init=prev)
            else:
                res = register_lm(ref, vol, cold)
            prev = res.t.as_array()
        except RegistrationError:
            res = None
        out.append(Translation3.of(prev))
        results.append(res)
    return out, results


def reconstruct_lagrangian(render, translations, grid: Grid, fov=None):
    """Contrast frames evaluated at ``v + t_k`` and stored at reference voxel ``v``.

    ``render(k, grid)`` produces frame ``k`` on an arbitrary grid (fast-path
    splatting or beamforming of AM channel data). Voxels whose shifted
    position leaves ``fov`` are zeroed and flagged in ``meta['invalid']``.
    Yields one Volume per translation.
    """
    for k, t in enumerate(translations):
        t = t.as_array() if isinstance(t, Translation3) else np.asarray(t, dtype=np.float64)
        shifted = grid.shifted(t)
        vol = render(k, shifted)
        data = np.array(vol.data, dtype=np.float64)
        if fov is not None:
            valid = acoustics.fov_mask(shifted, *fov)
        else:
            valid = np.ones(grid.shape, bool)
        data[~valid] = 0.0
        meta = dict(vol.meta)
        meta["invalid"] = ~valid
        meta["invalid_count"] = int((~valid).sum())
        meta["translation"] = tuple(t)
        yield Volume(data, grid, vol.frame_id, vol.timestamp, meta)


# -- detection ----------------------------------------------------------------

def estimate_noise_std(data) -> float:
    """Median absolute deviation scaled to a Gaussian standard deviation."""
    d = np.asarray(data, dtype=np.float64)
    return float(np.median(np.abs(d - np.median(d))) / 0.6744897501960817)


def denoise(volume: Volume, window: int = 9, fwhm: float = 0.3, floor: float | None = None,
            noise_factor: float = 3.0) -> Volume:
    """Zero voxels at or below max(Gaussian-weighted local mean, noise floor)."""
    data = np.asarray(volume.data, dtype=np.float64)
    if not np.any(data):
        return volume.with_data(data.copy())
    sigma = fwhm * FWHM_TO_SIGMA / np.asarray(volume.spacing)
    radius = (window - 1) // 2
    local = gaussian_filter(data, sigma, mode="nearest", radius=radius)
    if floor is None:
        floor = noise_factor * estimate_noise_std(data)
    thresh = np.maximum(local, floor)
    tol = 1e-12 * float(np.abs(data).max())
    out = np.where(data > thresh + tol, data, 0.0)
    return volume.with_data(out)


def find_peaks(data, threshold: float, size: int = 3):
    """Voxel indices of local maxima strictly above ``threshold``, brightest first."""
    data = np.asarray(data)
    mx = maximum_filter(data, size=size, mode="constant", cval=-np.inf)
    idx = np.argwhere((data == mx) & (data > threshold))
    if len(idx) == 0:
        return idx
    order = np.argsort(-data[tuple(idx.T)], kind="stable")
    return idx[order]


def estimate_psf(volumes, window: int = 13, isolation: float = 1.5, count: int = 5,
                 rel_threshold: float = 0.3) -> Volume:
    """Average of ``count`` isolated, self-normalised bubble images.

    Candidates are local maxima above ``rel_threshold`` of their frame's
    maximum; a candidate is isolated when no other candidate in the same
    frame lies within ``isolation`` mm and its window fits in the volume.
    """
    half = window // 2
    patches = []
    spacing = None
    for vol in volumes:
        data = np.asarray(vol.data, dtype=np.float64)
        spacing = vol.spacing
        if data.max() <= 0:
            continue
        peaks = find_peaks(data, rel_threshold * data.max())
        pos = peaks * vol.spacing
        for i, p in enumerate(peaks):
            if np.any(p < half) or np.any(p + half >= np.asarray(data.shape)):
                continue
            d = np.linalg.norm(pos - pos[i], axis=1)
            d[i] = np.inf
            if len(d) > 1 and d.min() < isolation:
                continue
            patch = data[p[0] - half:p[0] + half + 1, p[1] - half:p[1] + half + 1, p[2] - half:p[2] + half + 1]
            patches.append(patch / patch.max())
            if len(patches) >= count:
                break
        if len(patches) >= count:
            break
    if len(patches) < count:
        raise InsufficientDataError(
            f"found {len(patches)} isolated bubbles, need {count}: acquire longer or lower the bubble concentration")
    psf = np.mean(patches, axis=0)
    psf /= psf.max()
    grid = Grid(-half * np.asarray(spacing), spacing, psf.shape)
    return Volume(psf, grid)


def normalized_cross_correlation(data, template) -> np.ndarray:
    """Zero-mean NCC of ``template`` slid over ``data`` (same-size output, centred)."""
    data = np.asarray(data, dtype=np.float64)
    t = np.asarray(template, dtype=np.float64)
    t = t - t.mean()
    tn = math.sqrt(float(np.sum(t * t)))
    if tn == 0:
        raise ValueError("template is constant")
    n = t.size
    num = fftconvolve(data, t[::-1, ::-1, ::-1], mode="same")
    s1 = uniform_filter(data, t.shape, mode="constant") * n
    s2 = uniform_filter(data * data, t.shape, mode="constant") * n
    var = np.maximum(s2 - s1 * s1 / n, 0.0)
    scale = float(np.max(data * data)) * n if data.size else 0.0
    ok = var > 1e-10 * max(scale, 1e-300)
    out = np.zeros(data.shape)
    out[ok] = num[ok] / (np.sqrt(var[ok]) * tn)
    return np.clip(out, -1.0, 1.0)


def localize(volume: Volume, psf: Volume, threshold: float = 0.5, upsample: int = 5, neighborhood: int = 5,
             intensity: Volume | None = None, valid=None, margin: int = 3) -> list:
    """Bubble positions from NCC peaks refined by cubic upsampling.

    ``volume`` is searched (usually the denoised frame); ``intensity``
    (default ``volume``) supplies the values that are upsampled around each
    peak. Peaks within ``margin`` voxels of the border are dropped since
    bubbles cut by the border localize onto it. Positions are in the
    volume's physical frame.
    """
    ncc = normalized_cross_correlation(volume.data, psf.data)
    if valid is not None:
        ncc = np.where(valid, ncc, 0.0)
    if margin > 0:
        inner = np.zeros(ncc.shape, bool)
        inner[margin:-margin, margin:-margin, margin:-margin] = True
        ncc = np.where(inner, ncc, 0.0)
    src = np.asarray((intensity or volume).data, dtype=np.float64)
    h = (neighborhood - 1) / 2.0
    offs = np.linspace(-h, h, int(round(2 * h * upsample)) + 1)
    ox, oy, oz = np.meshgrid(offs, offs, offs, indexing="ij")
    pad = int(math.ceil(h)) + 3
    out = []
    for p in find_peaks(ncc, threshold):
        lo = np.maximum(p - pad, 0)
        hi = np.minimum(p + pad + 1, np.asarray(src.shape))
        patch = src[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        c = p - lo
        coords = np.stack([ox + c[0], oy + c[1], oz + c[2]])
        vals = map_coordinates(patch, coords.reshape(3, -1), order=3, mode="nearest")
        j = int(np.argmax(vals))
        sub = p + np.array([ox.ravel()[j], oy.ravel()[j], oz.ravel()[j]])
        out.append(Localization(tuple(volume.grid.position(sub)), float(ncc[tuple(p)]),
                                volume.frame_id, volume.timestamp))
    return out


# -- tracking -----------------------------------------------------------------

def estimate_velocities(positions, times, window: int = 9) -> np.ndarray:
    """Least-squares velocity over a centred sliding window at each sample."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    times = np.asarray(times, dtype=np.float64)
    n = len(times)
    v = np.zeros((n, 3))
    if n < 2:
        return v
    half = max(1, window // 2)
    for i in range(n):
        a, b = max(0, i - half), min(n, i + half + 1)
        if b - a < 2:
            a, b = max(0, b - 2), min(n, a + 2)
        t = times[a:b] - times[a:b].mean()
        v[i] = (t @ (positions[a:b] - positions[a:b].mean(axis=0))) / (t @ t)
    return v


@dataclass
class _Active:
    track: Track
    missed: int = 0

    def predict(self, t: float) -> np.ndarray:
        locs = self.track.localizations
        p = np.asarray(locs[-1].position)
        if len(locs) < 2:
            return p
        dt = locs[-1].timestamp - locs[-2].timestamp
        vel = (p - np.asarray(locs[-2].position)) / dt if dt > 0 else 0.0
        return p + vel * (t - locs[-1].timestamp)


def track(frames, gate_speed: float = 10.0, frame_interval: float = 1.0 / 85.0, max_gap: int = 2,
          velocity_window: int = 9) -> list:
    """Link per-frame localizations into tracks.

    Each active track predicts its position with constant velocity; detections
    are assigned one-to-one by minimum total distance (Hungarian), and pairs
    farther than ``gate_speed * frame_interval`` per elapsed frame are not
    linked. Unmatched detections start tracks; a track missing more than
    ``max_gap`` consecutive frames is closed.
    """
    active: list[_Active] = []
    done: list[Track] = []
    for locs in frames:
        if not locs:
            still = []
            for a in active:
                a.missed += 1
                (done.append(a.track) if a.missed > max_gap else still.append(a))
            active = still
            continue
        t = locs[0].timestamp
        obs = np.array([loc.position for loc in locs])
        matched_obs = set()
        matched_tracks = set()
        if active:
            pred = np.array([a.predict(t) for a in active])
            cost = np.linalg.norm(pred[:, None, :] - obs[None, :, :], axis=2)
            gate = np.array([gate_speed * frame_interval * (a.missed + 1) for a in active])
            big = 1e6
            masked = np.where(cost <= gate[:, None], cost, big)
            rows, cols = linear_sum_assignment(masked)
            for r, c in zip(rows, cols):
                if masked[r, c] < big:
                    active[r].track.localizations.append(locs[c])
                    active[r].missed = 0
                    matched_obs.add(int(c))
                    matched_tracks.add(int(r))
        still = []
        for i, a in enumerate(active):
            if i not in matched_tracks:
                a.missed += 1
                if a.missed > max_gap:
                    done.append(a.track)
                    continue
            still.append(a)
        for j, loc in enumerate(locs):
            if j not in matched_obs:
                still.append(_Active(Track([loc])))
        active = still
    done.extend(a.track for a in active)
    done.sort(key=lambda tr: (tr.localizations[0].frame_id, tr.localizations[0].position))
    for tr in done:
        tr.velocities = estimate_velocities(tr.positions, tr.times, velocity_window)
    return done


def persistence_filter(tracks, min_frames: int = 4) -> list:
    return [tr for tr in tracks if len(tr) >= min_frames]


# -- maps ---------------------------------------------------------------------

def _rasterize(track: Track, grid: Grid):
    """Flat voxel indices crossed by the track polyline, with link speeds."""
    pos = track.positions
    speeds = track.link_speeds()
    if len(pos) == 1:
        pts = pos
        sp = np.zeros(1)
    else:
        pts_l, sp_l = [], []
        step = 0.25 * float(np.min(grid.spacing))
        for i in range(len(pos) - 1):
            seg = pos[i + 1] - pos[i]
            n = max(1, int(math.ceil(np.linalg.norm(seg) / step)))
            u = np.arange(n + (i == len(pos) - 2)) / n
            pts_l.append(pos[i] + np.multiply.outer(u, seg))
            sp_l.append(np.full(len(u), speeds[i]))
        pts, sp = np.concatenate(pts_l), np.concatenate(sp_l)
    idx = np.rint(grid.index_of(pts)).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.shape)), axis=1)
    flat = np.ravel_multi_index(idx[inside].T, grid.shape) if np.any(inside) else np.zeros(0, np.int64)
    return flat, sp[inside]


def accumulate_maps(tracks, grid: Grid) -> SRMaps:
    """Trajectory-count density and mean link speed per voxel.

    A track adds 1 to every voxel it crosses (once per voxel); its speed in a
    voxel is the mean of its links crossing it, and the speed map averages
    that over tracks.
    """
    n = int(np.prod(grid.shape))
    density = np.zeros(n)
    speed_sum = np.zeros(n)
    for tr in tracks:
        flat, sp = _rasterize(tr, grid)
        if len(flat) == 0:
            continue
        u, inv = np.unique(flat, return_inverse=True)
        mean_sp = np.bincount(inv, weights=sp) / np.bincount(inv)
        density[u] += 1.0
        speed_sum[u] += mean_sp
    speed = np.divide(speed_sum, density, out=np.zeros(n), where=density > 0)
    return SRMaps(density.reshape(grid.shape), speed.reshape(grid.shape), grid)


def ball_footprint(diameter: float, spacing) -> np.ndarray:
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    r = diameter / 2.0
    h = np.floor(r / spacing + 1e-9).astype(int)
    ax = [np.arange(-k, k + 1) * s for k, s in zip(h, spacing)]
    x, y, z = np.meshgrid(*ax, indexing="ij")
    return (x * x + y * y + z * z) <= r * r + 1e-12


def smooth_maps(maps: SRMaps, density_fwhm: float = 0.04, speed_ball: float = 0.06) -> SRMaps:
    """Gaussian-smoothed density (mass preserving) and ball-mean speed over voxels with density."""
    sigma = density_fwhm * FWHM_TO_SIGMA / np.asarray(maps.grid.spacing)
    density = gaussian_filter(maps.density, sigma, mode="constant", truncate=4.0)
    has = maps.density > 0
    fp = ball_footprint(speed_ball, maps.grid.spacing).astype(np.float64)
    num = fftconvolve(np.where(has, maps.speed, 0.0), fp, mode="same")
    cnt = fftconvolve(has.astype(np.float64), fp, mode="same")
    cnt = np.rint(cnt)
    speed = np.where(has & (cnt > 0), num / np.maximum(cnt, 1.0), 0.0)
    return SRMaps(density, speed, maps.grid)


# -- whole pipeline -----------------------------------------------------------

@dataclass
class UlmResult:
    translations: list
    registration: list
    localizations: list  # per frame
    tracks: list
    maps: SRMaps
    smoothed: SRMaps
    psf: Volume
    mean_contrast: Volume  # diffraction-limited accumulation on the reference grid
    invalid_voxels: int
    reference_grid: Grid
    bmode_grid: Grid

    @property
    def n_localizations(self) -> int:
        return sum(len(f) for f in self.localizations)


def roi_grid(record, spacing: float | None = None) -> Grid:
    u = record.config.ulm
    spacing = spacing or u.bmode_spacing
    if u.roi_center:
        center = np.asarray(u.roi_center, dtype=np.float64)
    else:
        # centre of the channel structure as seen from the frame-0 pose
        chans = record.world.phantom.channels.channels
        mid = np.mean([0.5 * (np.asarray(c.start) + np.asarray(c.end)) for c in chans], axis=0)
        center = record.pose(0).to_probe(mid + record.stage[0])
    return Grid.centered(center, u.roi_extent, spacing)


def bmode_grid(record) -> Grid:
    u = record.config.ulm
    center = np.rint(record.landmark_probe[0] / u.bmode_spacing) * u.bmode_spacing
    return Grid.centered(center, u.bmode_extent, u.bmode_spacing)


def render_bmode(record, k: int, grid: Grid, noise_ref: float | None) -> Volume:
    acq = record.config.acquisition
    if acq.fidelity == "channel":
        frame = record.channel_triplet(k).full
        vol = beamform.das_beamform(frame, grid, record.world.array, frame_id=k,
                                    timestamp=float(record.times[k]))
        return vol
    return record.render(k, grid, snr_db=acq.snr_db, noise_ref=noise_ref, stream=20)


def render_contrast(record, k: int, grid: Grid) -> Volume:
    u, w = record.config.ulm, record.world
    residual = 1.0 - w.nonlinearity
    if record.config.acquisition.fidelity == "channel":
        frame = acoustics.am_subtract(record.channel_triplet(k))
        return beamform.das_beamform(frame, grid, w.array, frame_id=k, timestamp=float(record.times[k]))
    ref = w.bubble_amplitude * residual
    snr = u.contrast_snr_db
    return record.render(k, grid, kinds=[BUBBLE], snr_db=snr, noise_ref=ref if snr is not None else None,
                         stream=30, amplitude_scale={BUBBLE: residual})


def run_ulm(record, frames=None, progress=None) -> UlmResult:
    """Full offline pipeline on an acquisition record."""
    cfg = record.config
    u = cfg.ulm
    frames = range(record.n_frames) if frames is None else frames
    frames = list(frames)
    bgrid = bmode_grid(record)
    clean0 = record.render(frames[0], bgrid) if cfg.acquisition.fidelity == "fast" else None
    noise_ref = acoustics.signal_rms(clean0.data) if clean0 is not None else None
    opts = LMOptions(max_iters=u.lm_max_iters, tol=u.lm_tol, levels=1)
    bmodes = (render_bmode(record, k, bgrid, noise_ref) for k in frames)
    translations, results = correct_residual_motion(bmodes, opts, u.warm_start, u.bmode_levels)

    grid = roi_grid(record)
    fov = (record.world.fov_lo, record.world.fov_hi)
    dt = 1.0 / cfg.acquisition.rate_hz
    psf = None
    pending = []
    per_frame = []
    acc = np.zeros(grid.shape)
    invalid = 0

    def detect(raw: Volume):
        den = denoise(raw, u.denoise_window, u.denoise_fwhm, noise_factor=u.noise_factor)
        return den

    lag = reconstruct_lagrangian(lambda i, g: render_contrast(record, frames[i], g), translations, grid, fov)
    for i, raw in enumerate(lag):
        acc += raw.data
        invalid += raw.meta["invalid_count"]
        den = detect(raw)
        if psf is None:
            pending.append((raw, den))
            try:
                psf = estimate_psf([d for _, d in pending], u.psf_window, u.psf_isolation, u.psf_count)
            except InsufficientDataError:
                if i == len(frames) - 1:
                    raise
                continue
            for r, d in pending:
                per_frame.append(localize(d, psf, u.ncc_threshold, u.upsample, intensity=r,
                                          valid=~r.meta["invalid"]))
            pending = []
        else:
            per_frame.append(localize(den, psf, u.ncc_threshold, u.upsample, intensity=raw,
                                      valid=~raw.meta["invalid"]))
        if progress:
            progress(i, len(frames))

    tracks = persistence_filter(track(per_frame, u.gate_speed, dt, u.max_gap, u.velocity_window),
                                u.min_track_length)
    mgrid = Grid.centered(grid.center, u.roi_extent, u.map_spacing)
    maps = accumulate_maps(tracks, mgrid)
    smoothed = smooth_maps(maps, u.density_fwhm, u.speed_ball_diameter)
    mean_contrast = Volume(acc / max(len(frames), 1), grid)
    return UlmResult(translations, results, per_frame, tracks, maps, smoothed, psf, mean_contrast,
                     invalid, grid, bgrid)


def write_localizations_csv(path, per_frame, config_hash: str = ""):
    rows = ((loc.frame_id, loc.timestamp, *loc.position, loc.ncc_peak) for f in per_frame for loc in f)
    return io.write_csv(path, ["frame", "time", "x", "y", "z", "ncc"], rows, config_hash)


def write_tracks_csv(path, tracks, config_hash: str = ""):
    rows = []
    for i, tr in enumerate(tracks):
        sp = np.concatenate([[np.nan], tr.link_speeds()]) if len(tr) > 1 else np.array([np.nan])
        for loc, s in zip(tr.localizations, sp):
            rows.append((i, loc.frame_id, loc.timestamp, *loc.position, s))
    return io.write_csv(path, ["track", "frame", "time", "x", "y", "z", "link_speed"], rows, config_hash)
