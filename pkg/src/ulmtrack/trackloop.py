"""Discrete-event simulation of asynchronous acquisition, processing and
robot repositioning, plus the acquisition record it produces."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acoustics, beamform, io
from .config import ExperimentConfig, load_config, save_config
from .registration import GDOptions, RegistrationError, register_gd
from .scene import (BUBBLE, LANDMARK, TISSUE, ProbePose, World, scatterers_at, simulate_bubbles,
                    stage_position, trapezoid_distance, trapezoid_duration, world_from_config)
from .volume import Grid, Volume

EVENT_RANK = {
    "frame_acquired": 0,
    "beamform_done": 1,
    "registration_done": 2,
    "registration_failed": 2,
    "target_lost": 2,
    "command_issued": 3,
    "command_rejected": 3,
    "command_skipped": 3,
    "robot_stopped": 4,
}


class SafetyViolation(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class TimelineEvent:
    time: float
    rank: int
    seq: int
    kind: str = field(compare=False)
    payload: int = field(compare=False, default=-1)
    detail: str = field(compare=False, default="")


class Timeline:
    """Events totally ordered by (time, kind rank, insertion order)."""

    def __init__(self):
        self._heap = []
        self._seq = 0

    def add(self, time: float, kind: str, payload: int = -1, detail: str = "") -> None:
        if kind not in EVENT_RANK:
            raise ValueError(f"unknown event kind {kind!r}")
        heapq.heappush(self._heap, TimelineEvent(float(time), EVENT_RANK[kind], self._seq, kind, int(payload), detail))
        self._seq += 1

    def events(self) -> list:
        return sorted(self._heap)


# -- robot --------------------------------------------------------------------

def robot_move_duration(distance: float, accel: float = 250.0, vmax: float = 50.0) -> float:
    if distance < 0:
        raise ValueError("distance must be non-negative")
    return trapezoid_duration(distance, vmax, accel)


def robot_move_position(t, start, target, accel: float = 250.0, vmax: float = 50.0):
    """Position ``t`` seconds after a straight rest-to-rest move begins."""
    start = np.asarray(start, dtype=np.float64)
    delta = np.asarray(target, dtype=np.float64) - start
    d = float(np.linalg.norm(delta))
    if d == 0.0:
        return np.broadcast_to(start, np.shape(t) + (3,)).copy()
    s = trapezoid_distance(t, d, vmax, accel)
    return start + np.multiply.outer(s, delta / d)


@dataclass
class RobotMove:
    start_time: float
    start: np.ndarray
    target: np.ndarray
    duration: float


class RobotTrajectory:
    """Piecewise probe translation; a new move pre-empts the running one."""

    def __init__(self, start, accel: float = 250.0, vmax: float = 50.0):
        self.home = np.asarray(start, dtype=np.float64)
        self.accel, self.vmax = accel, vmax
        self.moves: list[RobotMove] = []

    def position(self, t: float) -> np.ndarray:
        for mv in reversed(self.moves):
            if mv.start_time <= t:
                return robot_move_position(t - mv.start_time, mv.start, mv.target, self.accel, self.vmax)
        return self.home.copy()

    def positions(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=np.float64)
        out = np.tile(self.home, (len(times), 1))
        starts = np.array([m.start_time for m in self.moves])
        if len(starts) == 0:
            return out
        idx = np.searchsorted(starts, times, side="right") - 1
        for j, mv in enumerate(self.moves):
            sel = idx == j
            if np.any(sel):
                out[sel] = robot_move_position(times[sel] - mv.start_time, mv.start, mv.target,
                                               self.accel, self.vmax)
        return out

    def in_motion(self, t: float) -> bool:
        for mv in reversed(self.moves):
            if mv.start_time <= t:
                return t < mv.start_time + mv.duration
        return False

    def command(self, t: float, target) -> RobotMove:
        if self.moves and t < self.moves[-1].start_time:
            raise ValueError("robot commands must be issued in time order")
        start = self.position(t)
        target = np.asarray(target, dtype=np.float64)
        mv = RobotMove(t, start, target, robot_move_duration(float(np.linalg.norm(target - start)),
                                                             self.accel, self.vmax))
        self.moves.append(mv)
        return mv


@dataclass
class RobotState:
    pose: ProbePose
    in_motion: bool = False
    command: tuple | None = None  # (target, start time)


# -- workspace ----------------------------------------------------------------

@dataclass(frozen=True)
class Workspace:
    """Box in probe axes around the start pose."""

    origin: tuple = (0.0, 0.0, 0.0)
    yaw_deg: float = 0.0
    lateral: tuple = (-50.0, 50.0)
    elevational: tuple = (-50.0, 50.0)
    depth: tuple = (-5.0, 5.0)

    def relative(self, target) -> np.ndarray:
        return ProbePose(self.origin, self.yaw_deg).to_probe(target)

    def contains(self, target, tol: float = 1e-9) -> bool:
        r = self.relative(target)
        bounds = (self.lateral, self.elevational, self.depth)
        return all(lo - tol <= r[i] <= hi + tol for i, (lo, hi) in enumerate(bounds))


@dataclass(frozen=True)
class WorkspaceDecision:
    accepted: bool
    target: tuple
    reason: str = ""


def clamp_to_workspace(target, ws: Workspace) -> WorkspaceDecision:
    """Accept a command target inside the workspace, otherwise withhold it (no clipping)."""
    target = np.asarray(target, dtype=np.float64)
    if not np.all(np.isfinite(target)):
        return WorkspaceDecision(False, tuple(target), "non-finite target")
    r = ws.relative(target)
    names = ("lateral", "elevational", "depth")
    for i, (lo, hi) in enumerate((ws.lateral, ws.elevational, ws.depth)):
        if not lo <= r[i] <= hi:
            return WorkspaceDecision(False, tuple(target),
                                     f"{names[i]} offset {r[i]:.3f} mm outside [{lo}, {hi}]")
    return WorkspaceDecision(True, tuple(target))


# -- latency ------------------------------------------------------------------

@dataclass
class LatencyModel:
    beamform: float = 0.04
    registration_min: float = 0.04
    registration_max: float = 0.3
    registration_iter_ref: float = 150.0
    registration_jitter: float = 0.02
    robot_min: float = 0.03
    robot_max: float = 0.25
    robot_accel: float = 250.0
    robot_vmax: float = 50.0

    def __post_init__(self):
        if min(self.beamform, self.registration_min, self.robot_min) <= 0:
            raise ValueError("latencies must be positive")

    def registration(self, iterations: int, rng) -> float:
        """Grows with solver iterations, plus seeded jitter, clipped to the range."""
        frac = min(iterations / self.registration_iter_ref, 1.0)
        base = self.registration_min + (self.registration_max - self.registration_min) * frac
        jitter = rng.normal(0.0, self.registration_jitter) if self.registration_jitter > 0 else 0.0
        return float(np.clip(base + jitter, self.registration_min, self.registration_max))

    def robot(self, distance: float | None) -> float:
        """Command overhead plus move time, clipped; ``None`` means no command sent."""
        if distance is None:
            return self.robot_min
        t = self.robot_min + robot_move_duration(distance, self.robot_accel, self.robot_vmax)
        return float(np.clip(t, self.robot_min, self.robot_max))

    @property
    def minimum_iteration(self) -> float:
        return self.beamform + self.registration_min + self.robot_min

    @classmethod
    def from_config(cls, t) -> "LatencyModel":
        return cls(t.beamform_latency, t.registration_min, t.registration_max, t.registration_iter_ref,
                   t.registration_jitter, t.robot_min, t.robot_max, t.robot_accel, t.robot_vmax)


# -- acquisition record -------------------------------------------------------

@dataclass
class IterationLog:
    start: float
    frame: int
    t: tuple
    iterations: int
    converged: bool
    cost: float
    command: tuple | None
    status: str


@dataclass
class AcquisitionRecord:
    config: ExperimentConfig
    world: World
    times: np.ndarray
    stage: np.ndarray  # (K, 3) phantom displacement
    probe: np.ndarray  # (K, 3) probe translation
    yaw_deg: float
    crop_grid: Grid
    landmark_probe: np.ndarray  # (K, 3) true landmark position in probe frame
    events: list
    iterations: list
    target_lost: np.ndarray  # (K,) bool, landmark outside the crop
    bubbles: object = None  # BubbleHistory, regenerated from the seed when loaded

    @property
    def n_frames(self) -> int:
        return len(self.times)

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    def pose(self, k: int) -> ProbePose:
        return ProbePose(tuple(self.probe[k]), self.yaw_deg)

    def retention(self, frames=None) -> float:
        lost = self.target_lost if frames is None else self.target_lost[frames]
        return float(1.0 - np.mean(lost)) if len(lost) else 1.0

    def scatterers(self, k: int, bubbles: bool = True, tissue: bool = True):
        pos = self.bubbles.at(k)[1] if (bubbles and self.bubbles is not None) else None
        return scatterers_at(self.times[k], self.world, self.pose(k), pos, include_tissue=tissue)

    def noise_rng(self, k: int, stream: int):
        return np.random.default_rng([self.config.seed, stream, k])

    def render(self, k: int, grid: Grid, kinds=None, snr_db=None, noise_ref=None, stream: int = 10,
               amplitude_scale=None) -> Volume:
        """Fast-path volume of frame ``k``; noise is seeded per (frame, stream)."""
        s = self.scatterers(k, bubbles=kinds is None or BUBBLE in kinds,
                            tissue=kinds is None or TISSUE in kinds or LANDMARK in kinds)
        if amplitude_scale:
            s = s.scaled(amplitude_scale)
        acq = self.config.acquisition
        return acoustics.synthesize_volume_fast(
            s, grid, tuple(acq.psf_fwhm), kinds=kinds, fov=(self.world.fov_lo, self.world.fov_hi),
            snr_db=snr_db, noise_ref=noise_ref, rng=self.noise_rng(k, stream) if snr_db is not None else None,
            frame_id=k, timestamp=float(self.times[k]))

    def channel_triplet(self, k: int):
        acq = self.config.acquisition
        params = acoustics.ChannelParams(acq.sample_rate, acq.bandwidth, acq.depth, 0.0, acq.directivity,
                                         self.world.nonlinearity)
        return acoustics.simulate_am_triplet(self.scatterers(k), self.world.array, params)

    # persistence -------------------------------------------------------------

    def save(self, out_dir, volume_stride: int | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        h = self.config_hash
        save_config(self.config, out / "config.toml")
        rows = [(k, self.times[k], *self.probe[k], self.yaw_deg, *self.stage[k], int(self.target_lost[k]))
                for k in range(self.n_frames)]
        io.write_csv(out / "poses.csv", ["frame", "time", "probe_x", "probe_y", "probe_z", "yaw_deg",
                                         "stage_x", "stage_y", "stage_z", "target_lost"], rows, h)
        io.write_csv(out / "events.csv", ["time", "kind", "payload", "detail"],
                     ((e.time, e.kind, e.payload, e.detail) for e in self.events), h)
        io.write_csv(out / "iterations.csv",
                     ["start", "frame", "tx", "ty", "tz", "iterations", "converged", "cost",
                      "cmd_x", "cmd_y", "cmd_z", "status"],
                     ((it.start, it.frame, *it.t, it.iterations, int(it.converged), it.cost,
                       *(it.command if it.command is not None else ("", "", "")), it.status)
                      for it in self.iterations), h)
        gt = []
        lm = self.landmark_probe
        for k in range(self.n_frames):
            gt.append((k, self.times[k], "landmark", -1, *lm[k]))
            if self.bubbles is not None:
                ids, pos = self.bubbles.at(k)
                ppos = self.pose(k).to_probe(pos + self.stage[k]) if len(pos) else pos
                gt.extend((k, self.times[k], "bubble", int(i), *p) for i, p in zip(ids, ppos))
        io.write_csv(out / "ground_truth.csv", ["frame", "time", "kind", "id", "x", "y", "z"], gt, h)
        stride = volume_stride if volume_stride is not None else self.config.acquisition.volume_stride
        if stride and stride > 0:
            vdir = out / "volumes"
            vdir.mkdir(exist_ok=True)
            for k in range(0, self.n_frames, stride):
                io.write_volume(vdir / f"crop_{k:06d}", self.render(k, self.crop_grid), h)
        crop = self.crop_grid
        (out / "crop_grid.txt").write_text(
            f"origin = {' '.join(repr(float(x)) for x in crop.origin)}\n"
            f"spacing = {' '.join(repr(float(x)) for x in crop.spacing)}\n"
            f"dims = {' '.join(str(n) for n in crop.shape)}\nconfig_hash = {h}\n")
        return out

    @classmethod
    def load(cls, out_dir) -> "AcquisitionRecord":
        out = Path(out_dir)
        cfg = load_config(out / "config.toml")
        h_cfg = cfg.hash()
        for name in ("poses.csv", "events.csv", "iterations.csv"):
            if io.csv_hash(out / name) != h_cfg:
                raise ValueError(f"{name} was written with a different config than config.toml")
        _, _, rows = io.read_csv(out / "poses.csv")
        arr = np.array([[float(x) for x in r] for r in rows]) if rows else np.zeros((0, 10))
        _, _, ev_rows = io.read_csv(out / "events.csv")
        events = [TimelineEvent(float(r[0]), EVENT_RANK[r[1]], i, r[1], int(r[2]), r[3])
                  for i, r in enumerate(ev_rows)]
        _, _, it_rows = io.read_csv(out / "iterations.csv")
        iters = []
        for r in it_rows:
            cmd = None if r[8] == "" else (float(r[8]), float(r[9]), float(r[10]))
            iters.append(IterationLog(float(r[0]), int(r[1]), (float(r[2]), float(r[3]), float(r[4])),
                                      int(r[5]), bool(int(r[6])), float(r[7]), cmd, r[11]))
        g = io.read_header(out / "crop_grid.txt")
        crop = Grid([float(x) for x in g["origin"].split()], [float(x) for x in g["spacing"].split()],
                    tuple(int(x) for x in g["dims"].split()))
        world = world_from_config(cfg)
        times = arr[:, 1]
        probe = arr[:, 2:5]
        yaw = float(arr[0, 5]) if len(arr) else world.yaw_deg
        stage = arr[:, 6:9]
        lm = np.array([ProbePose(tuple(probe[k]), yaw).to_probe(world.phantom.landmark_center + stage[k])
                       for k in range(len(times))]).reshape(-1, 3)
        rec = cls(cfg, world, times, stage, probe, yaw, crop, lm, events, iters, arr[:, 9].astype(bool))
        rec.bubbles = _bubble_history(cfg, world, times)
        return rec


def _bubble_history(cfg, world: World, times):
    return simulate_bubbles(world.phantom.channels, times, world.flow_speed, world.bubble_density,
                            np.random.default_rng([cfg.seed, 2]))


def frame_times(duration: float, rate_hz: float) -> np.ndarray:
    """t_k = k / rate for every frame inside [0, duration]; duration 0 gives one frame."""
    n = int(math.floor(duration * rate_hz + 1e-9)) + 1
    return np.arange(n) / rate_hz


def find_crop_center(world: World, cfg: ExperimentConfig, pose: ProbePose) -> np.ndarray:
    """Argmax of a wide frame-0 volume over the whole field of view."""
    acq = cfg.acquisition
    grid = Grid.from_bounds(world.fov_lo, world.fov_hi, acq.online_spacing)
    s = scatterers_at(0.0, world, pose, None)
    vol = acoustics.synthesize_volume_fast(s, grid, tuple(acq.psf_fwhm))
    return vol.argmax_position()


def _crop_box(grid: Grid):
    half = grid.spacing / 2.0
    return grid.origin - half, grid.upper + half


def process_iteration(ref: Volume, moving: Volume, pose: ProbePose, ws: Workspace, deadband: float,
                      suppress_depth: bool, opts: GDOptions):
    """Register one frame against the reference and derive the robot command.

    Returns ``(status, command_target or None, RegResult or None, reason)``
    where status is one of issued, deadband, rejected, failed.
    """
    try:
        res = register_gd(ref, moving, opts)
    except RegistrationError as exc:
        return "failed", None, None, str(exc)
    if not res.converged:
        return "failed", None, res, res.message or "registration did not converge"
    t = res.t.as_array()
    if suppress_depth:
        t = t * np.array([1.0, 1.0, 0.0])
    if np.linalg.norm(t) < deadband:
        return "deadband", None, res, ""
    target = np.asarray(pose.translation) + pose.vector_to_world(t)
    decision = clamp_to_workspace(target, ws)
    if not decision.accepted:
        return "rejected", None, res, decision.reason
    return "issued", target, res, ""


def run_closed_loop(cfg: ExperimentConfig, world: World | None = None, progress=None) -> AcquisitionRecord:
    """Simulate acquisition at a fixed rate with asynchronous tracking.

    Frames are acquired at k / rate regardless of processing. Processing
    repeatedly takes the latest acquired frame, renders its online crop,
    registers it to the frame-0 crop and moves the probe by the detected
    translation. Latencies come from the seeded latency model.
    """
    cfg.validate()
    world = world or world_from_config(cfg)
    acq, trk = cfg.acquisition, cfg.tracking
    times = frame_times(acq.duration, acq.rate_hz)
    n = len(times)
    home = np.zeros(3)
    pose0 = ProbePose(tuple(home), world.yaw_deg)
    robot = RobotTrajectory(home, trk.robot_accel, trk.robot_vmax)
    ws = Workspace(tuple(home), world.yaw_deg, (-trk.workspace_lateral, trk.workspace_lateral),
                   (-trk.workspace_lateral, trk.workspace_lateral), (-trk.workspace_depth, trk.workspace_depth))
    latency = LatencyModel.from_config(trk)
    jitter_rng = np.random.default_rng([cfg.seed, 3])
    stage = stage_position(world.profile, times)
    bubbles = _bubble_history(cfg, world, times)

    center = find_crop_center(world, cfg, pose0)
    crop = beamform.online_grid(center, acq.crop_extent, acq.online_spacing)
    record = AcquisitionRecord(cfg, world, times, stage, np.zeros((n, 3)), world.yaw_deg, crop,
                               np.zeros((n, 3)), [], [], np.zeros(n, bool), bubbles)

    timeline = Timeline()
    for k, t in enumerate(times):
        timeline.add(t, "frame_acquired", k)

    opts = GDOptions(levels=trk.gd_levels, min_step=trk.gd_min_step, max_iters=trk.gd_max_iters,
                     search_bound=trk.search_bound)
    iters = []
    if trk.enabled and n > 1:
        ref = record_frame(record, 0, robot, crop)
        noise_ref = ref.meta["noise_ref"]
        ref = ref.with_data(ref.data)
        s = times[1]
        last_frame = 0
        pending_stop = None
        while s <= times[-1]:
            k = int(math.floor(s * acq.rate_hz + 1e-9))
            k = min(k, n - 1)
            if k <= last_frame:
                # nothing new in the mailbox: wait for the next frame
                s = times[last_frame + 1] if last_frame + 1 < n else math.inf
                continue
            last_frame = k
            pose_k = ProbePose(tuple(robot.position(times[k])), world.yaw_deg)
            mov = record_frame(record, k, robot, crop, noise_ref)
            t_bf = s + latency.beamform
            timeline.add(t_bf, "beamform_done", k)
            status, target, res, reason = process_iteration(ref, mov, pose_k, ws, trk.deadband,
                                                            trk.suppress_depth, opts)
            n_it = res.iterations if res is not None else trk.gd_max_iters * trk.gd_levels
            t_reg = t_bf + latency.registration(n_it, jitter_rng)
            distance = None
            if status == "failed":
                timeline.add(t_reg, "registration_failed", k, reason)
                if res is None or not bool(np.all(np.abs(res.t.as_array()) < acq.crop_extent / 2)):
                    timeline.add(t_reg, "target_lost", k, reason)
            else:
                timeline.add(t_reg, "registration_done", k)
                if status == "issued":
                    if pending_stop is not None and pending_stop[0] > t_reg:
                        pending_stop = None  # pre-empted before arriving
                    if pending_stop is not None:
                        timeline.add(*pending_stop)
                    mv = robot.command(t_reg, target)
                    distance = float(np.linalg.norm(mv.target - mv.start))
                    timeline.add(t_reg, "command_issued", k)
                    pending_stop = (t_reg + mv.duration, "robot_stopped", k)
                elif status == "rejected":
                    timeline.add(t_reg, "command_rejected", k, reason)
                else:
                    timeline.add(t_reg, "command_skipped", k, "below deadband")
            iters.append(IterationLog(s, k, tuple(res.t.as_array()) if res is not None else (math.nan,) * 3,
                                      res.iterations if res is not None else 0,
                                      res.converged if res is not None else False,
                                      res.final_cost if res is not None else math.nan,
                                      tuple(target) if target is not None else None, status))
            if progress:
                progress(s, times[-1])
            s = t_reg + latency.robot(distance)
        if pending_stop is not None:
            timeline.add(*pending_stop)

    record.probe = robot.positions(times)
    for k in range(n):
        if not ws.contains(record.probe[k]):
            raise SafetyViolation(f"probe left the workspace at frame {k}")
    record.landmark_probe = np.array([record.pose(k).to_probe(world.phantom.landmark_center + stage[k])
                                      for k in range(n)]).reshape(-1, 3)
    lo, hi = _crop_box(crop)
    record.target_lost = ~np.all((record.landmark_probe >= lo) & (record.landmark_probe <= hi), axis=1)
    record.events = timeline.events()
    record.iterations = iters
    return record


def record_frame(record: AcquisitionRecord, k: int, robot: RobotTrajectory, crop: Grid,
                 noise_ref: float | None = None) -> Volume:
    """Online crop of frame ``k`` with the probe where the robot had it at t_k."""
    record.probe[k] = robot.position(record.times[k])
    acq = record.config.acquisition
    if acq.fidelity == "channel":
        triplet = record.channel_triplet(k)
        vol = beamform.das_beamform(triplet.full, crop, record.world.array, frame_id=k,
                                    timestamp=float(record.times[k]))
        if noise_ref is None:
            noise_ref = acoustics.signal_rms(vol.data)
        vol.meta["noise_ref"] = noise_ref
        return vol
    clean = record.render(k, crop)
    if noise_ref is None:
        noise_ref = acoustics.signal_rms(clean.data)
    vol = clean.with_data(clean.data + record.noise_rng(k, 0).normal(
        0.0, acoustics.noise_std(noise_ref, acq.snr_db), size=clean.shape))
    vol.meta["noise_ref"] = noise_ref
    return vol


def check_record(record: AcquisitionRecord) -> list:
    """Human-readable violations of the timeline contract; empty when sound."""
    problems = []
    rate = record.config.acquisition.rate_hz
    k = np.arange(record.n_frames)
    if np.any(record.times != k / rate):
        problems.append("frame times deviate from k / rate")
    ws = Workspace(tuple(record.probe[0]) if record.n_frames else (0.0, 0.0, 0.0), record.yaw_deg,
                   (-record.config.tracking.workspace_lateral, record.config.tracking.workspace_lateral),
                   (-record.config.tracking.workspace_lateral, record.config.tracking.workspace_lateral),
                   (-record.config.tracking.workspace_depth, record.config.tracking.workspace_depth))
    for i, p in enumerate(record.probe):
        if not ws.contains(p):
            problems.append(f"probe outside the workspace at frame {i}")
            break
    acquired, beamformed, registered = {}, {}, {}
    prev = None
    for e in record.events:
        key = (e.time, e.rank)
        if prev is not None and key < prev:
            problems.append(f"events out of order at t={e.time}")
        prev = key
        if e.kind == "frame_acquired":
            acquired[e.payload] = e.time
        elif e.kind == "beamform_done":
            if e.payload not in acquired or e.time < acquired[e.payload]:
                problems.append(f"frame {e.payload} beamformed before it was acquired")
            beamformed[e.payload] = e.time
        elif e.kind in ("registration_done", "registration_failed"):
            if e.payload not in beamformed or e.time < beamformed[e.payload]:
                problems.append(f"frame {e.payload} registered before beamforming finished")
            registered[e.payload] = e.time
        elif e.kind in ("command_issued", "command_rejected", "command_skipped"):
            if e.payload not in registered or e.time < registered[e.payload]:
                problems.append(f"command from frame {e.payload} precedes its registration")
    return problems
