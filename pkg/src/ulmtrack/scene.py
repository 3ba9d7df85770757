"""World model: phantom, stage motion, microbubble flow and probe pose.

Units throughout: mm, s, MHz, mm/us for sound speed. World frame is the
phantom frame at rest; the probe frame has its origin at the array centre
with z pointing into the medium.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels
from .volume import Grid

TISSUE, LANDMARK, BUBBLE = 0, 1, 2
KIND_NAMES = {TISSUE: "tissue", LANDMARK: "landmark", BUBBLE: "bubble"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}

FWHM_TO_SIGMA = 1.0 / math.sqrt(8.0 * math.log(2.0))


@dataclass(frozen=True)
class ArraySpec:
    rows: int = 32
    cols: int = 32
    aperture_x: float = 9.6
    aperture_y: float = 10.6
    center_freq: float = 7.8
    nominal_freq: float = 8.0
    sound_speed: float = 1.54

    def __post_init__(self):
        if self.aperture_x <= 0 or self.aperture_y <= 0:
            raise ValueError("aperture dimensions must be positive")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array needs at least one row and column")
        if self.rows * self.pitch_y > self.aperture_y + self.pitch_y + 1e-12:
            raise ValueError("rows * pitch_y exceeds the aperture")

    @property
    def pitch_x(self) -> float:
        return self.aperture_x / self.cols

    @property
    def pitch_y(self) -> float:
        return self.aperture_y / self.rows

    @property
    def wavelength(self) -> float:
        return self.sound_speed / self.center_freq

    def element_positions(self) -> np.ndarray:
        """(rows * cols, 3) element centres, row-major over (row=y, col=x)."""
        x = (np.arange(self.cols) - (self.cols - 1) / 2.0) * self.pitch_x
        y = (np.arange(self.rows) - (self.rows - 1) / 2.0) * self.pitch_y
        yy, xx = np.meshgrid(y, x, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)

    def half_aperture_masks(self):
        """Interleaved (checkerboard) halves used for the half-amplitude pulses."""
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        a = ((r + c) % 2 == 0).ravel()
        return a, ~a


# -- kinematics ---------------------------------------------------------------

def trapezoid_duration(distance: float, speed: float, accel: float) -> float:
    """Time for a rest-to-rest move with bounded speed and acceleration."""
    if distance <= 0:
        return 0.0
    if distance < speed * speed / accel:
        return 2.0 * math.sqrt(distance / accel)
    return speed / accel + distance / speed


def trapezoid_distance(t, distance: float, speed: float, accel: float):
    """Distance covered ``t`` seconds into the move (scalar or array ``t``)."""
    t = np.asarray(t, dtype=np.float64)
    total = trapezoid_duration(distance, speed, accel)
    if total == 0.0:
        return np.zeros_like(t) if t.ndim else 0.0
    if distance < speed * speed / accel:
        t_acc = total / 2.0
        peak = accel * t_acc
    else:
        t_acc = speed / accel
        peak = speed
    d_acc = 0.5 * accel * t_acc * t_acc
    tc = np.clip(t, 0.0, total)
    out = np.where(
        tc < t_acc,
        0.5 * accel * tc * tc,
        np.where(tc <= total - t_acc,
                 d_acc + peak * (tc - t_acc),
                 distance - 0.5 * accel * (total - tc) ** 2),
    )
    out = np.where(t >= total, distance, out)
    return out if out.ndim else float(out)


def trapezoid_speed(t, distance: float, speed: float, accel: float):
    t = np.asarray(t, dtype=np.float64)
    total = trapezoid_duration(distance, speed, accel)
    if total == 0.0:
        return np.zeros_like(t) if t.ndim else 0.0
    peak = math.sqrt(accel * distance) if distance < speed * speed / accel else speed
    v = np.minimum(np.minimum(accel * t, accel * (total - t)), peak)
    v = np.where((t <= 0) | (t >= total), 0.0, v)
    return v if v.ndim else float(v)


# -- stage motion -------------------------------------------------------------

@dataclass(frozen=True)
class MotionSegment:
    direction: tuple
    distance: float
    speed: float
    accel: float = 3.0
    dwell: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("segment direction must be non-zero")
        object.__setattr__(self, "direction", tuple(d / n))
        if self.distance <= 0 or self.accel <= 0 or self.speed <= 0:
            raise ValueError("distance, speed and accel must be positive")
        if self.dwell < 0:
            raise ValueError("dwell must be non-negative")

    @property
    def duration(self) -> float:
        return trapezoid_duration(self.distance, self.speed, self.accel)


@dataclass(frozen=True)
class MotionProfile:
    segments: tuple = ()
    start_delay: float = 0.0
    mode: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        starts, t = [], self.start_delay
        for seg in self.segments:
            starts.append(t)
            t += seg.duration + seg.dwell
        object.__setattr__(self, "_starts", np.asarray(starts, dtype=np.float64))
        object.__setattr__(self, "_end", t)

    @property
    def duration(self) -> float:
        return float(self._end)

    @property
    def motion_end(self) -> float:
        if not self.segments:
            return self.start_delay
        return float(self._starts[-1] + self.segments[-1].duration)

    @classmethod
    def static(cls, duration: float = 0.0) -> "MotionProfile":
        return cls((), start_delay=duration, mode="static")

    @classmethod
    def round_trips(cls, speeds: Sequence[float], distance=20.0, accel=3.0,
                    direction=(1.0, 0.0, 0.0), dwell=1.0, start_delay=1.0,
                    mode="custom") -> "MotionProfile":
        """One out-and-back trip per entry of ``speeds``; entries may be (out, back) pairs."""
        d = np.asarray(direction, dtype=np.float64)
        segs = []
        for sp in speeds:
            out_speed, back_speed = (sp, sp) if np.isscalar(sp) else sp
            segs.append(MotionSegment(tuple(d), distance, out_speed, accel, dwell))
            segs.append(MotionSegment(tuple(-d), distance, back_speed, accel, dwell))
        return cls(tuple(segs), start_delay, mode)

    @classmethod
    def mixed(cls, trips=1, fast=4.0, slow=2.0, **kw) -> "MotionProfile":
        """Varying-speed demo: out at ``fast``, back at ``slow`` in every round trip."""
        return cls.round_trips([(fast, slow)] * trips, mode="mixed", **kw)

    @classmethod
    def stepped(cls, speeds=(1.0, 2.0, 3.0, 4.0, 5.0), **kw) -> "MotionProfile":
        return cls.round_trips(list(speeds), mode="stepped", **kw)

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        flat = np.atleast_1d(t)
        out = np.zeros((flat.size, 3))
        for i, seg in enumerate(self.segments):
            tau = flat - self._starts[i]
            if not np.any(tau > 0):
                continue
            d = trapezoid_distance(np.maximum(tau, 0.0), seg.distance, seg.speed, seg.accel)
            out += np.outer(d, seg.direction)
        return out[0] if t.ndim == 0 else out

    def velocity(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        flat = np.atleast_1d(t)
        out = np.zeros((flat.size, 3))
        for i, seg in enumerate(self.segments):
            tau = flat - self._starts[i]
            v = trapezoid_speed(tau, seg.distance, seg.speed, seg.accel)
            out += np.outer(v, seg.direction)
        return out[0] if t.ndim == 0 else out

    def moving(self, t) -> np.ndarray:
        """True while a segment is in its move phase (dwells excluded)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        out = np.zeros(t.size, dtype=bool)
        for i, seg in enumerate(self.segments):
            out |= (t > self._starts[i]) & (t < self._starts[i] + seg.duration)
        return out

    def speed_level(self, t) -> np.ndarray:
        """Cruise speed of the segment being executed, 0 outside moves."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        out = np.zeros(t.size)
        for i, seg in enumerate(self.segments):
            on = (t > self._starts[i]) & (t < self._starts[i] + seg.duration)
            out[on] = seg.speed
        return out


def stage_position(profile: MotionProfile, t) -> np.ndarray:
    """World-frame phantom displacement at time ``t`` (final position after the end)."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("time must be non-negative")
    return profile.position(t)


# -- probe pose ---------------------------------------------------------------

def yaw_matrix(yaw_deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class ProbePose:
    translation: tuple = (0.0, 0.0, 0.0)
    yaw_deg: float = 0.0

    @property
    def rotation(self) -> np.ndarray:
        return yaw_matrix(self.yaw_deg)

    def to_probe(self, world_points) -> np.ndarray:
        p = np.asarray(world_points, dtype=np.float64)
        return (p - np.asarray(self.translation)) @ self.rotation

    def to_world(self, probe_points) -> np.ndarray:
        p = np.asarray(probe_points, dtype=np.float64)
        return p @ self.rotation.T + np.asarray(self.translation)

    def vector_to_world(self, v) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.rotation.T

    def moved_to(self, translation) -> "ProbePose":
        return replace(self, translation=tuple(float(x) for x in translation))


# -- scatterers ---------------------------------------------------------------

@dataclass(frozen=True)
class Scatterer:
    position: tuple
    amplitude: float
    kind: str = "tissue"
    velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown scatterer kind {self.kind!r}")


@dataclass
class ScattererSet:
    """Column-oriented scatterer collection; the bulk form of :class:`Scatterer`."""

    positions: np.ndarray
    amplitudes: np.ndarray
    kinds: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64).reshape(-1)
        self.kinds = np.asarray(self.kinds, dtype=np.int8).reshape(-1)
        if not (len(self.positions) == len(self.amplitudes) == len(self.kinds)):
            raise ValueError("positions, amplitudes and kinds must have equal length")
        if np.any(self.amplitudes < 0):
            raise ValueError("amplitudes must be non-negative")

    def __len__(self):
        return len(self.amplitudes)

    @classmethod
    def empty(cls) -> "ScattererSet":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int8))

    @classmethod
    def from_list(cls, items: Sequence[Scatterer]) -> "ScattererSet":
        if not items:
            return cls.empty()
        return cls([s.position for s in items], [s.amplitude for s in items],
                   [KIND_CODES[s.kind] for s in items])

    @classmethod
    def concat(cls, sets) -> "ScattererSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(np.concatenate([s.positions for s in sets]),
                   np.concatenate([s.amplitudes for s in sets]),
                   np.concatenate([s.kinds for s in sets]))

    def select(self, *kinds) -> "ScattererSet":
        codes = [KIND_CODES[k] if isinstance(k, str) else k for k in kinds]
        keep = np.isin(self.kinds, codes)
        return ScattererSet(self.positions[keep], self.amplitudes[keep], self.kinds[keep])

    def scaled(self, factors: dict) -> "ScattererSet":
        """Per-kind amplitude scaling, e.g. ``{BUBBLE: 0.15}``."""
        amps = self.amplitudes.copy()
        for k, f in factors.items():
            amps[self.kinds == k] *= f
        return ScattererSet(self.positions, amps, self.kinds)

    def translated(self, t) -> "ScattererSet":
        return ScattererSet(self.positions + np.asarray(t), self.amplitudes, self.kinds)

    def items(self):
        for p, a, k in zip(self.positions, self.amplitudes, self.kinds):
            yield Scatterer(tuple(p), float(a), KIND_NAMES[int(k)])


# -- channels and bubbles -----------------------------------------------------

@dataclass(frozen=True)
class Channel:
    start: tuple
    end: tuple
    radius: float = 0.09

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("channel radius must be positive")
        if self.length <= 0:
            raise ValueError("channel endpoints must differ")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start)))

    @property
    def axis(self) -> np.ndarray:
        return np.subtract(self.end, self.start) / self.length

    def transverse_basis(self):
        a = self.axis
        helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(a, helper)
        e1 /= np.linalg.norm(e1)
        return e1, np.cross(a, e1)

    def length_inside(self, lo, hi) -> float:
        """Length of the segment inside the box [lo, hi] (slab clipping)."""
        p0 = np.asarray(self.start, dtype=np.float64)
        d = np.subtract(self.end, self.start)
        t0, t1 = 0.0, 1.0
        for ax in range(3):
            if abs(d[ax]) < 1e-15:
                if p0[ax] < lo[ax] or p0[ax] > hi[ax]:
                    return 0.0
                continue
            a, b = (lo[ax] - p0[ax]) / d[ax], (hi[ax] - p0[ax]) / d[ax]
            t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
        return max(0.0, t1 - t0) * self.length


@dataclass(frozen=True)
class ChannelGeometry:
    channels: tuple

    @classmethod
    def crossed(cls, crossing=(0.5, 0.5, 22.5), angle_deg=60.0, half_length=14.0,
                radius=0.09, heading_deg=-20.0) -> "ChannelGeometry":
        c = np.asarray(crossing, dtype=np.float64)
        chans = []
        for h in (heading_deg, heading_deg + angle_deg):
            d = np.array([math.cos(math.radians(h)), math.sin(math.radians(h)), 0.0])
            chans.append(Channel(tuple(c - half_length * d), tuple(c + half_length * d), radius))
        return cls(tuple(chans))

    @classmethod
    def parallel(cls, center=(0.0, 0.5, 22.5), gap=0.15, half_length=14.0,
                 radius=0.09, axis=(1.0, 0.0, 0.0), offset_axis=(0.0, 1.0, 0.0)) -> "ChannelGeometry":
        """Two parallel channels ``gap`` mm apart wall to wall."""
        c = np.asarray(center, dtype=np.float64)
        d = np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis)
        o = np.asarray(offset_axis, dtype=np.float64) / np.linalg.norm(offset_axis)
        sep = 2 * radius + gap
        chans = [Channel(tuple(c + s * o - half_length * d), tuple(c + s * o + half_length * d), radius)
                 for s in (-sep / 2, sep / 2)]
        return cls(tuple(chans))

    def intersect_within(self, lo, hi) -> bool:
        """True if every pair of channel axes passes within a radius inside [lo, hi]."""
        for i in range(len(self.channels)):
            for j in range(i + 1, len(self.channels)):
                a, b = self.channels[i], self.channels[j]
                p, q = closest_points(a, b)
                if np.linalg.norm(p - q) > a.radius + b.radius:
                    return False
                m = (p + q) / 2
                if np.any(m < lo) or np.any(m > hi):
                    return False
        return True


def closest_points(a: Channel, b: Channel):
    p0, q0 = np.asarray(a.start, float), np.asarray(b.start, float)
    u, v = a.axis, b.axis
    w = p0 - q0
    bb = u @ v
    d, e = u @ w, v @ w
    den = 1.0 - bb * bb
    if den < 1e-12:
        s, t = 0.0, e
    else:
        s, t = (bb * e - d) / den, (e - bb * d) / den
    s = float(np.clip(s, 0, a.length))
    t = float(np.clip(t, 0, b.length))
    return p0 + s * u, q0 + t * v


def flow_speed(flow_ul_per_min: float, radius_mm: float) -> float:
    """Mean speed (mm/s) from volumetric flow; 1 uL = 1 mm^3."""
    return (flow_ul_per_min / 60.0) / (math.pi * radius_mm ** 2)


@dataclass
class BubbleState:
    ids: np.ndarray
    channel: np.ndarray
    s: np.ndarray
    offset: np.ndarray
    next_id: int = 0
    time: float = 0.0

    @classmethod
    def empty(cls) -> "BubbleState":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 3)))

    def __len__(self):
        return len(self.ids)

    def copy(self) -> "BubbleState":
        return BubbleState(self.ids.copy(), self.channel.copy(), self.s.copy(),
                           self.offset.copy(), self.next_id, self.time)

    def positions(self, geometry: ChannelGeometry) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 3))
        starts = np.array([c.start for c in geometry.channels])[self.channel]
        axes = np.array([c.axis for c in geometry.channels])[self.channel]
        return starts + self.s[:, None] * axes + self.offset


def _disc_offsets(channel: Channel, n: int, rng) -> np.ndarray:
    e1, e2 = channel.transverse_basis()
    r = channel.radius * np.sqrt(rng.random(n))
    th = 2 * math.pi * rng.random(n)
    return (r * np.cos(th))[:, None] * e1 + (r * np.sin(th))[:, None] * e2


def seed_bubbles(geometry: ChannelGeometry, density_per_mm: float, rng) -> BubbleState:
    """Steady-state population: Poisson count per channel, uniform along its length."""
    state = BubbleState.empty()
    for ci, ch in enumerate(geometry.channels):
        n = rng.poisson(density_per_mm * ch.length)
        state = _append(state, ci, rng.random(n) * ch.length, _disc_offsets(ch, n, rng))
    return state


def _append(state, ci, s, offsets):
    n = len(s)
    return BubbleState(
        np.concatenate([state.ids, state.next_id + np.arange(n)]),
        np.concatenate([state.channel, np.full(n, ci, dtype=np.int64)]),
        np.concatenate([state.s, s]),
        np.concatenate([state.offset, offsets.reshape(-1, 3)]),
        state.next_id + n,
        state.time,
    )


def advect_bubbles(state: BubbleState, dt: float, rng, geometry: ChannelGeometry,
                   speed: float, rate_per_channel: float) -> BubbleState:
    """Plug-flow advection with Poisson injection at each inlet."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return state.copy()
    lengths = np.array([c.length for c in geometry.channels])
    s = state.s + speed * dt
    keep = s <= lengths[state.channel] if len(state) else np.zeros(0, bool)
    out = BubbleState(state.ids[keep], state.channel[keep], s[keep], state.offset[keep],
                      state.next_id, state.time + dt)
    for ci, ch in enumerate(geometry.channels):
        n = rng.poisson(rate_per_channel * dt)
        if n:
            # injection times are uniform within the step
            out = _append(out, ci, speed * dt * rng.random(n), _disc_offsets(ch, n, rng))
    return out


@dataclass
class BubbleHistory:
    """Per-frame bubble snapshots in the phantom frame, stored flat."""

    frame_start: np.ndarray
    ids: np.ndarray
    channel: np.ndarray
    positions: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.frame_start) - 1

    def at(self, k: int):
        a, b = self.frame_start[k], self.frame_start[k + 1]
        return self.ids[a:b], self.positions[a:b]

    def frame_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_frames), np.diff(self.frame_start))


def simulate_bubbles(geometry: ChannelGeometry, times, speed: float,
                     density_per_mm: float, rng) -> BubbleHistory:
    times = np.asarray(times, dtype=np.float64)
    rate = density_per_mm * speed
    state = seed_bubbles(geometry, density_per_mm, rng)
    starts, ids, chans, pos = [0], [], [], []
    prev = times[0] if len(times) else 0.0
    for t in times:
        state = advect_bubbles(state, t - prev, rng, geometry, speed, rate)
        prev = t
        ids.append(state.ids)
        chans.append(state.channel)
        pos.append(state.positions(geometry))
        starts.append(starts[-1] + len(state))
    cat = (lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape))
    return BubbleHistory(np.asarray(starts, dtype=np.int64),
                         cat(ids, 0).astype(np.int64), cat(chans, 0).astype(np.int64),
                         cat(pos, (0, 3)).reshape(-1, 3))


# -- phantom ------------------------------------------------------------------

def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _peak_normalized(points, target_peak, psf_sigma, spacing=0.05, weights=None):
    """Scale factor for ``weights`` so the rendered peak equals ``target_peak``."""
    lo = points.min(axis=0) - 4 * psf_sigma
    hi = points.max(axis=0) + 4 * psf_sigma
    grid = Grid.from_bounds(lo, hi, spacing)
    w = np.ones(len(points)) if weights is None else np.asarray(weights, dtype=np.float64)
    vol = kernels.splat_gaussians(np.ascontiguousarray(points), w, grid.origin, grid.spacing,
                                  grid.shape, psf_sigma)
    return target_peak / vol.max()


@dataclass
class Phantom:
    tissue: ScattererSet
    landmark: ScattererSet
    landmark_center: np.ndarray
    channels: ChannelGeometry
    block_lo: np.ndarray
    block_hi: np.ndarray

    @classmethod
    def build(cls, rng, *, landmark_center=(0.0, 0.0, 20.0), landmark_radius=0.5,
              landmark_points=600, landmark_gain=10.0, support_gain=0.3,
              speckle_count=2000, block_size=(30.0, 20.0, 20.0), block_center=(0.0, 0.0, 20.0),
              channels: ChannelGeometry | None = None, psf_fwhm=(0.4, 0.4, 0.25)) -> "Phantom":
        block_center = np.asarray(block_center, dtype=np.float64)
        half = np.asarray(block_size, dtype=np.float64) / 2
        lo, hi = block_center - half, block_center + half
        speckle_pos = rng.uniform(lo, hi, size=(speckle_count, 3))
        speckle_amp = rng.uniform(0.5, 1.0, size=speckle_count)
        tissue = ScattererSet(speckle_pos, speckle_amp, np.full(speckle_count, TISSUE))

        sigma = np.asarray(psf_fwhm, dtype=np.float64) * FWHM_TO_SIGMA
        center = np.asarray(landmark_center, dtype=np.float64)
        normals = fibonacci_sphere(landmark_points)
        # specular ball: only the probe-facing cap returns echo
        w = np.clip(-normals[:, 2], 0.0, None) ** 2
        keep = w > 1e-3
        ball = center + landmark_radius * normals[keep]
        # peak brightness relative to the mean speckle amplitude (0.75)
        ball_peak = landmark_gain * 0.75
        ball_amp = w[keep] * _peak_normalized(ball, ball_peak, sigma, weights=w[keep])

        struts = []
        for sx in (-1.0, 1.0):
            d = np.array([sx, 0.0, 1.0]) / math.sqrt(2)
            s = np.arange(0.0, 3.0, 0.05) + landmark_radius
            struts.append(center + s[:, None] * d)
        struts = np.concatenate(struts)
        strut_amp = np.full(len(struts), _peak_normalized(struts, support_gain * ball_peak, sigma))

        landmark = ScattererSet(np.concatenate([ball, struts]),
                                np.concatenate([ball_amp, strut_amp]),
                                np.full(len(ball) + len(struts), LANDMARK))
        if channels is None:
            channels = ChannelGeometry.crossed()
        return cls(tissue, landmark, center, channels, lo, hi)



@dataclass
class World:
    """Everything needed to place scatterers in the probe frame at any time."""

    phantom: Phantom
    profile: MotionProfile
    array: ArraySpec = field(default_factory=ArraySpec)
    flow_speed: float = flow_speed(1.5, 0.09)
    bubble_density: float = 0.2
    bubble_amplitude: float = 1.0
    nonlinearity: float = 0.85
    fov_lo: tuple = (-10.0, -10.0, 0.0)
    fov_hi: tuple = (10.0, 10.0, 45.0)
    yaw_deg: float = 0.0

    def in_fov(self, probe_points) -> np.ndarray:
        p = np.asarray(probe_points)
        return np.all((p >= np.asarray(self.fov_lo)) & (p <= np.asarray(self.fov_hi)), axis=-1)


def bubble_scatterers(world: World, positions) -> ScattererSet:
    n = len(positions)
    return ScattererSet(positions, np.full(n, world.bubble_amplitude), np.full(n, BUBBLE))


def scatterers_at(t: float, world: World, pose: ProbePose, bubble_positions=None,
                  include_tissue: bool = True) -> ScattererSet:
    """Probe-frame scatterers: phantom content displaced by the stage, seen from ``pose``."""
    d = stage_position(world.profile, t)
    parts = []
    if include_tissue:
        parts += [world.phantom.tissue, world.phantom.landmark]
    if bubble_positions is not None and len(bubble_positions):
        parts.append(bubble_scatterers(world, bubble_positions))
    s = ScattererSet.concat(parts)
    return ScattererSet(pose.to_probe(s.positions + d), s.amplitudes, s.kinds)


def landmark_probe_position(t: float, world: World, pose: ProbePose) -> np.ndarray:
    return pose.to_probe(world.phantom.landmark_center + stage_position(world.profile, t))


def profile_from_config(p) -> MotionProfile:
    common = dict(distance=p.distance, accel=p.accel, dwell=p.dwell, start_delay=p.start_delay)
    if p.kind == "static":
        return MotionProfile.static()
    if p.kind == "mixed":
        return MotionProfile.mixed(trips=p.trips, fast=p.fast, slow=p.slow, **common)
    if p.kind == "stepped":
        return MotionProfile.stepped(speeds=tuple(p.speeds), **common)
    raise ValueError(f"unknown profile kind {p.kind!r}")


def channels_from_config(c) -> ChannelGeometry:
    if c.layout == "crossed":
        return ChannelGeometry.crossed(tuple(c.center), c.angle_deg, c.half_length, c.radius, c.heading_deg)
    if c.layout == "parallel":
        return ChannelGeometry.parallel(tuple(c.center), c.gap, c.half_length, c.radius)
    raise ValueError(f"unknown channel layout {c.layout!r}")


def world_from_config(cfg) -> World:
    """Deterministic world for an experiment config (phantom drawn from the seed)."""
    from .config import direction_yaw  # local import keeps scene free of config at load

    s, acq = cfg.scene, cfg.acquisition
    channels = channels_from_config(s.channels)
    rng = np.random.default_rng([cfg.seed, 1])
    phantom = Phantom.build(
        rng, landmark_center=tuple(s.landmark_center), landmark_radius=s.landmark_radius,
        landmark_gain=s.landmark_gain, support_gain=s.support_gain, speckle_count=s.speckle_count,
        block_size=tuple(s.block_size), block_center=tuple(s.block_center), channels=channels,
        psf_fwhm=tuple(acq.psf_fwhm))
    half = acq.crop_extent / 2.0
    lo, hi = phantom.landmark_center - half, phantom.landmark_center + half
    in_view = sum(ch.length_inside(lo, hi) for ch in channels.channels)
    if in_view <= 0:
        in_view = sum(ch.length for ch in channels.channels)
    array = ArraySpec(cfg.array.rows, cfg.array.cols, cfg.array.aperture_x, cfg.array.aperture_y,
                      cfg.array.center_freq, sound_speed=cfg.array.sound_speed)
    w = acq.fov_half_width
    world = World(
        phantom=phantom, profile=profile_from_config(s.profile), array=array,
        flow_speed=flow_speed(s.channels.flow_ul_per_min, s.channels.radius),
        bubble_density=s.channels.bubbles_in_view / in_view,
        bubble_amplitude=s.channels.bubble_amplitude, nonlinearity=s.channels.nonlinearity,
        fov_lo=(-w, -w, 0.0), fov_hi=(w, w, acq.depth), yaw_deg=direction_yaw(s.profile.direction))
    return world
