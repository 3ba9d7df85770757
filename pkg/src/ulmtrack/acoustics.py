"""Forward models: point-scatterer channel data for the half-full-half AM
sequence, and a Gaussian-splat volume synthesizer for long runs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .scene import BUBBLE, FWHM_TO_SIGMA, ArraySpec, ScattererSet
from .volume import Grid, Volume

APERTURES = ("full", "half_A", "half_B")


@dataclass
class ChannelParams:
    sample_rate: float = 31.2  # MHz
    bandwidth: float = 0.6  # fractional, -6 dB
    depth: float = 45.0  # mm
    t0: float = 0.0  # us
    directivity: bool = False
    nonlinearity: float = 0.85
    window_sigmas: float = 4.5

    def pulse_exponent(self, center_freq: float) -> float:
        """Envelope exponent ``a`` of exp(-a t^2) giving the -6 dB bandwidth."""
        return (math.pi * self.bandwidth * center_freq) ** 2 / (4.0 * math.log(2.0))

    def half_window(self, center_freq: float) -> float:
        return self.window_sigmas / math.sqrt(2.0 * self.pulse_exponent(center_freq))

    def n_samples(self, array: ArraySpec) -> int:
        t_max = 2.0 * self.depth / array.sound_speed + self.half_window(array.center_freq)
        return int(math.ceil((t_max - self.t0) * self.sample_rate)) + 1


@dataclass
class ChannelFrame:
    samples: np.ndarray  # (elements, time samples)
    sample_rate: float
    t0: float
    tx_aperture: str = "full"

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("channel samples must be 2D (elements x samples)")

    @property
    def n_elements(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def time_axis(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) / self.sample_rate


@dataclass
class AMTriplet:
    full: ChannelFrame
    half_A: ChannelFrame
    half_B: ChannelFrame

    def __post_init__(self):
        frames = (self.full, self.half_A, self.half_B)
        if len({f.samples.shape for f in frames}) != 1:
            raise ValueError("AM triplet frames have different shapes: corrupted acquisition")
        if len({(f.t0, f.sample_rate) for f in frames}) != 1:
            raise ValueError("AM triplet frames have different time bases: corrupted acquisition")


def arrival_time(point, element, sound_speed: float = 1.54) -> float:
    """Plane-wave transmit (depth / c) plus spherical return to the element."""
    p = np.asarray(point, dtype=np.float64)
    e = np.asarray(element, dtype=np.float64)
    return float(p[2] / sound_speed + np.linalg.norm(e - p) / sound_speed)


def tx_weights(scatterers: ScattererSet, tx: str, nonlinearity: float) -> np.ndarray:
    """Echo scaling of each scatterer for a transmit aperture.

    Linear scatterers return exactly half the full-aperture echo for a half
    aperture; bubbles return ``nonlinearity`` times that.
    """
    if tx == "full":
        return np.ones(len(scatterers))
    if tx not in APERTURES:
        raise ValueError(f"unknown transmit aperture {tx!r}")
    w = np.full(len(scatterers), 0.5)
    w[scatterers.kinds == BUBBLE] *= nonlinearity
    return w


def simulate_channel_data(scatterers: ScattererSet, array: ArraySpec, tx: str = "full",
                          params: ChannelParams | None = None) -> ChannelFrame:
    params = params or ChannelParams()
    if len(scatterers) and np.any(scatterers.positions[:, 2] < 0):
        bad = int(np.argmin(scatterers.positions[:, 2]))
        raise ValueError(f"scatterer {bad} lies behind the array (z = {scatterers.positions[bad, 2]:.3f} mm)")
    ns = params.n_samples(array)
    elements = np.ascontiguousarray(array.element_positions())
    amps = np.ascontiguousarray(scatterers.amplitudes * tx_weights(scatterers, tx, params.nonlinearity))
    rf = kernels.simulate_rf(np.ascontiguousarray(scatterers.positions), amps, elements,
                             array.sound_speed, params.sample_rate, params.t0, ns,
                             array.center_freq, params.pulse_exponent(array.center_freq),
                             params.half_window(array.center_freq), params.directivity)
    return ChannelFrame(rf, params.sample_rate, params.t0, tx)


def simulate_am_triplet(scatterers: ScattererSet, array: ArraySpec,
                        params: ChannelParams | None = None) -> AMTriplet:
    return AMTriplet(*(simulate_channel_data(scatterers, array, tx, params) for tx in APERTURES))


def am_subtract(triplet: AMTriplet) -> ChannelFrame:
    f = triplet.full
    return ChannelFrame(f.samples - triplet.half_A.samples - triplet.half_B.samples,
                        f.sample_rate, f.t0, "am")


def multiplex_time_offsets(n_subapertures: int = 4, depth: float = 45.0, sound_speed: float = 1.54):
    """Start times (us) of sequential receive sub-apertures, one AM triplet each."""
    tof = 2.0 * depth / sound_speed
    return np.arange(n_subapertures) * len(APERTURES) * tof


def psf_sigma(fwhm) -> np.ndarray:
    return np.broadcast_to(np.asarray(fwhm, dtype=np.float64), (3,)) * FWHM_TO_SIGMA


def synthesize_volume_fast(scatterers: ScattererSet, grid: Grid, psf_fwhm=(0.4, 0.4, 0.25), *,
                           kinds=None, fov=None, snr_db=None, noise_ref=None, rng=None,
                           frame_id: int = 0, timestamp: float = 0.0) -> Volume:
    """Render scatterers as anisotropic Gaussians on ``grid``.

    ``kinds`` restricts the render to some scatterer kinds (tissue-only or
    bubble-only outputs). ``fov`` is a (lo, hi) box in the grid frame outside
    which the volume is zero. SNR is a power ratio: noise std is
    ``noise_ref * 10**(-snr_db/20)`` with ``noise_ref`` the signal RMS,
    by default that of this noiseless render.
    """
    s = scatterers if kinds is None else scatterers.select(*kinds)
    sigma = psf_sigma(psf_fwhm)
    data = kernels.splat_gaussians(np.ascontiguousarray(s.positions), np.ascontiguousarray(s.amplitudes),
                                   grid.origin, grid.spacing, grid.shape, sigma)
    if fov is not None:
        data *= fov_mask(grid, *fov)
    if snr_db is not None:
        if rng is None:
            raise ValueError("noise requires an rng")
        ref = signal_rms(data) if noise_ref is None else float(noise_ref)
        data = data + rng.normal(0.0, noise_std(ref, snr_db), size=data.shape)
    return Volume(data, grid, frame_id, timestamp)


def fov_mask(grid: Grid, lo, hi) -> np.ndarray:
    x, y, z = grid.axes()
    lo, hi = np.asarray(lo), np.asarray(hi)
    mx = (x >= lo[0]) & (x <= hi[0])
    my = (y >= lo[1]) & (y <= hi[1])
    mz = (z >= lo[2]) & (z <= hi[2])
    return mx[:, None, None] & my[None, :, None] & mz[None, None, :]


def signal_rms(data) -> float:
    return float(np.sqrt(np.mean(np.square(data))))


def noise_std(noise_ref: float, snr_db: float) -> float:
    return float(noise_ref) * 10.0 ** (-snr_db / 20.0)
