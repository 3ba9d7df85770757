"""Experiment configuration: nested dataclasses loaded from TOML."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DIRECTION_YAW = {"lateral": 0.0, "elevational": 90.0, "arbitrary": 45.0}


class ConfigError(ValueError):
    pass


@dataclass
class ProfileConfig:
    kind: str = "mixed"  # mixed | stepped | static
    direction: str = "lateral"  # lateral | elevational | arbitrary, or a yaw in degrees
    distance: float = 20.0
    accel: float = 3.0
    dwell: float = 1.0
    start_delay: float = 1.0
    fast: float = 4.0
    slow: float = 2.0
    trips: int = 1
    speeds: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0])


@dataclass
class ChannelConfig:
    layout: str = "crossed"  # crossed | parallel
    radius: float = 0.09
    center: list = field(default_factory=lambda: [0.5, 0.5, 22.5])
    angle_deg: float = 60.0
    heading_deg: float = -20.0
    half_length: float = 14.0
    gap: float = 0.15
    flow_ul_per_min: float = 1.5
    bubbles_in_view: float = 5.0
    bubble_amplitude: float = 1.0
    nonlinearity: float = 0.85


@dataclass
class SceneConfig:
    speckle_count: int = 2000
    block_size: list = field(default_factory=lambda: [30.0, 20.0, 20.0])
    block_center: list = field(default_factory=lambda: [0.0, 0.0, 20.0])
    landmark_center: list = field(default_factory=lambda: [0.0, 0.0, 20.0])
    landmark_radius: float = 0.5
    landmark_gain: float = 10.0
    support_gain: float = 0.3
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    channels: ChannelConfig = field(default_factory=ChannelConfig)


@dataclass
class ArrayConfig:
    rows: int = 32
    cols: int = 32
    aperture_x: float = 9.6
    aperture_y: float = 10.6
    center_freq: float = 7.8
    sound_speed: float = 1.54


@dataclass
class AcquisitionConfig:
    rate_hz: float = 85.0
    duration: float = 30.0
    fidelity: str = "fast"  # fast | channel
    sample_rate: float = 31.2
    bandwidth: float = 0.6
    depth: float = 45.0
    directivity: bool = False
    psf_fwhm: list = field(default_factory=lambda: [0.4, 0.4, 0.25])
    snr_db: float = 30.0
    online_spacing: float = 0.4
    crop_extent: float = 12.5
    fov_half_width: float = 10.0
    volume_stride: int = 10


@dataclass
class TrackingConfig:
    enabled: bool = True
    beamform_latency: float = 0.04
    registration_min: float = 0.04
    registration_max: float = 0.3
    registration_iter_ref: float = 150.0
    registration_jitter: float = 0.02
    robot_min: float = 0.03
    robot_max: float = 0.25
    deadband: float = 0.2
    suppress_depth: bool = True
    workspace_lateral: float = 50.0
    workspace_depth: float = 5.0
    robot_accel: float = 250.0
    robot_vmax: float = 50.0
    gd_levels: int = 3
    gd_min_step: float = 0.01
    gd_max_iters: int = 100
    search_bound: float = 10.0


@dataclass
class UlmConfig:
    bmode_spacing: float = 0.1
    bmode_extent: float = 7.0
    bmode_levels: int = 4  # pyramid levels for the cold-start (first) registration
    warm_start: bool = True
    contrast_snr_db: float = 30.0  # relative to the peak bubble echo
    roi_center: list = field(default_factory=list)  # empty: channel crossing / centre
    roi_extent: list = field(default_factory=lambda: [6.0, 3.0, 3.0])
    lm_max_iters: int = 50
    lm_tol: float = 1e-3
    denoise_fwhm: float = 0.3
    denoise_window: int = 9
    noise_factor: float = 3.0
    psf_window: int = 13
    psf_isolation: float = 1.5
    psf_count: int = 5
    ncc_threshold: float = 0.5
    upsample: int = 5
    gate_speed: float = 10.0
    max_gap: int = 2
    velocity_window: int = 9
    min_track_length: int = 4
    map_spacing: float = 0.02
    density_fwhm: float = 0.04
    speed_ball_diameter: float = 0.06


@dataclass
class MetricsConfig:
    centroid_window: int = 11
    onset_threshold: float = 0.1
    fsc_pad_cube: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    array: ArrayConfig = field(default_factory=ArrayConfig)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    ulm: UlmConfig = field(default_factory=UlmConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self)

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``{"tracking.enabled": False}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.replace("__", ".").split(".")
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return from_dict(d)

    def validate(self) -> "ExperimentConfig":
        a, t, p = self.acquisition, self.tracking, self.scene.profile
        positive = {
            "acquisition.rate_hz": a.rate_hz, "acquisition.sample_rate": a.sample_rate,
            "acquisition.bandwidth": a.bandwidth, "acquisition.depth": a.depth,
            "acquisition.online_spacing": a.online_spacing, "acquisition.crop_extent": a.crop_extent,
            "scene.profile.distance": p.distance, "scene.profile.accel": p.accel,
            "scene.channels.radius": self.scene.channels.radius,
            "tracking.robot_accel": t.robot_accel, "tracking.robot_vmax": t.robot_vmax,
            "tracking.beamform_latency": t.beamform_latency,
            "tracking.registration_min": t.registration_min, "tracking.robot_min": t.robot_min,
            "ulm.bmode_spacing": self.ulm.bmode_spacing, "ulm.map_spacing": self.ulm.map_spacing,
            "array.center_freq": self.array.center_freq, "array.sound_speed": self.array.sound_speed,
        }
        for k, v in positive.items():
            if not v > 0:
                raise ConfigError(f"{k} must be positive, got {v}")
        if a.duration < 0:
            raise ConfigError("acquisition.duration must be non-negative")
        if a.fidelity not in ("fast", "channel"):
            raise ConfigError(f"acquisition.fidelity must be 'fast' or 'channel', got {a.fidelity!r}")
        if p.kind not in ("mixed", "stepped", "static"):
            raise ConfigError(f"scene.profile.kind must be mixed, stepped or static, got {p.kind!r}")
        if self.scene.channels.layout not in ("crossed", "parallel"):
            raise ConfigError("scene.channels.layout must be 'crossed' or 'parallel'")
        if t.registration_max < t.registration_min or t.robot_max < t.robot_min:
            raise ConfigError("latency ranges must satisfy min <= max")
        direction_yaw(p.direction)
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        return self


def direction_yaw(direction) -> float:
    if isinstance(direction, (int, float)):
        return float(direction)
    if direction in DIRECTION_YAW:
        return DIRECTION_YAW[direction]
    try:
        return float(direction)
    except ValueError:
        raise ConfigError(f"unknown motion direction {direction!r}") from None


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {path or 'root'} must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'root'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}".lstrip("."))
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}.{name} must be a boolean")
            kwargs[name] = value
        elif isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    if "seed" not in data:
        raise ConfigError("seed is mandatory")
    return _build(ExperimentConfig, data, "").validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return from_dict(data)


def default_config(seed: int = 0, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(seed=seed)
    return cfg.replace(**overrides) if overrides else cfg.validate()


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump_toml(cfg: ExperimentConfig) -> str:
    """Minimal TOML writer for the config tree (tables, scalars, flat lists)."""
    lines = []

    def scalar(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(scalar(x) for x in v) + "]"
        return repr(v)

    def emit(d, prefix):
        simple = {k: v for k, v in d.items() if not isinstance(v, dict)}
        tables = {k: v for k, v in d.items() if isinstance(v, dict)}
        if prefix:
            lines.append(f"[{prefix}]")
        for k, v in simple.items():
            lines.append(f"{k} = {scalar(v)}")
        lines.append("")
        for k, v in tables.items():
            emit(v, f"{prefix}.{k}" if prefix else k)

    emit(cfg.to_dict(), "")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_toml(cfg))
