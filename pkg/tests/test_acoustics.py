import math

import numpy as np
import pytest

from ulmtrack import acoustics
from ulmtrack.acoustics import AMTriplet, ChannelFrame, ChannelParams
from ulmtrack.scene import BUBBLE, TISSUE, ScattererSet
from ulmtrack.volume import Grid

C = 1.54


def test_arrival_time_formula():
    # plane-wave transmit to depth z, spherical return to the element
    got = acoustics.arrival_time((0, 0, 10), (2.8, 0, 0), C)
    assert got == pytest.approx(10 / C + math.hypot(2.8, 10) / C, abs=1e-9)
    assert got == pytest.approx(13.2367, abs=1e-4)
    assert acoustics.arrival_time((0, 0, 10), (4.8, 0, 0), C) == pytest.approx(13.6963, abs=1e-4)


def test_arrival_monotone_in_depth():
    t = [acoustics.arrival_time((0.3, -0.2, z), (1.0, 1.0, 0.0)) for z in (5, 10, 20, 40)]
    assert np.all(np.diff(t) > 0)


def test_echo_lands_at_arrival_time(small_array):
    s = ScattererSet([[0.0, 0.0, 10.0]], [1.0], [TISSUE])
    params = ChannelParams(depth=12.0)
    f = acoustics.simulate_channel_data(s, small_array, "full", params)
    e = small_array.element_positions()[0]
    tau = acoustics.arrival_time((0, 0, 10), e)
    env = np.abs(f.samples[0])
    peak_t = f.time_axis()[np.argmax(env)]
    assert abs(peak_t - tau) < 1.0 / (2 * small_array.center_freq)


def test_empty_scene_gives_zero_frame(small_array):
    f = acoustics.simulate_channel_data(ScattererSet.empty(), small_array, "full", ChannelParams(depth=10.0))
    assert not np.any(f.samples)
    assert f.n_elements == 64


def test_sample_count_covers_round_trip(small_array):
    p = ChannelParams()
    f = acoustics.simulate_channel_data(ScattererSet.empty(), small_array, "full", p)
    assert f.time_axis()[-1] >= 2 * 45.0 / C


def test_scatterer_behind_array_rejected(small_array):
    with pytest.raises(ValueError, match="behind the array"):
        acoustics.simulate_channel_data(ScattererSet([[0, 0, -1.0]], [1.0], [TISSUE]), small_array)


def test_am_cancels_tissue(small_array):
    rng = np.random.default_rng(3)
    s = ScattererSet(rng.uniform([-1, -1, 6], [1, 1, 9], (20, 3)), rng.uniform(0.2, 1, 20), [TISSUE] * 20)
    tri = acoustics.simulate_am_triplet(s, small_array, ChannelParams(depth=10.0))
    res = acoustics.am_subtract(tri).samples
    assert np.sum(res ** 2) < 1e-10 * np.sum(tri.full.samples ** 2)


def test_am_residual_for_bubble_is_fifteen_percent(small_array):
    s = ScattererSet([[0.2, 0.1, 8.0]], [1.0], [BUBBLE])
    params = ChannelParams(depth=10.0, nonlinearity=0.85)
    tri = acoustics.simulate_am_triplet(s, small_array, params)
    res = acoustics.am_subtract(tri).samples
    np.testing.assert_allclose(res, (1 - 2 * 0.85 * 0.5) * tri.full.samples, atol=1e-12)


def test_am_of_zero_frames_is_zero():
    z = ChannelFrame(np.zeros((4, 10)), 31.2, 0.0)
    out = acoustics.am_subtract(AMTriplet(z, z, z))
    assert not np.any(out.samples)


def test_corrupted_triplet_rejected():
    a = ChannelFrame(np.zeros((4, 10)), 31.2, 0.0)
    with pytest.raises(ValueError, match="corrupted"):
        AMTriplet(a, a, ChannelFrame(np.zeros((4, 9)), 31.2, 0.0))
    with pytest.raises(ValueError, match="corrupted"):
        AMTriplet(a, a, ChannelFrame(np.zeros((4, 10)), 31.2, 1.0))


def test_multiplex_offsets():
    off = acoustics.multiplex_time_offsets(4)
    assert off[1] == pytest.approx(3 * 2 * 45 / C)
    assert 4 * 2 * 45 / C == pytest.approx(233.77, abs=0.01)


def _fwhm_1d(profile, spacing):
    p = profile / profile.max()
    above = np.flatnonzero(p >= 0.5)
    i0, i1 = above[0], above[-1]
    left = i0 - 1 + (0.5 - p[i0 - 1]) / (p[i0] - p[i0 - 1])
    right = i1 + (p[i1] - 0.5) / (p[i1] - p[i1 + 1])
    return (right - left) * spacing


def test_fast_path_psf_widths():
    grid = Grid.centered((0, 0, 20), (3, 3, 3), 0.02)
    s = ScattererSet([grid.center], [1.0], [TISSUE])
    v = acoustics.synthesize_volume_fast(s, grid, (0.4, 0.4, 0.25))
    c = np.unravel_index(np.argmax(v.data), v.shape)
    assert _fwhm_1d(v.data[:, c[1], c[2]], 0.02) == pytest.approx(0.4, rel=5e-3)
    assert _fwhm_1d(v.data[c[0], :, c[2]], 0.02) == pytest.approx(0.4, rel=5e-3)
    assert _fwhm_1d(v.data[c[0], c[1], :], 0.02) == pytest.approx(0.25, rel=5e-3)


def test_fast_path_argmax_at_voxel_centre():
    grid = Grid.centered((0, 0, 20), 6.0, 0.4)
    p = grid.position((3, 9, 5))
    v = acoustics.synthesize_volume_fast(ScattererSet([p], [1.0], [TISSUE]), grid)
    assert np.unravel_index(np.argmax(v.data), v.shape) == (3, 9, 5)


def test_two_close_scatterers_merge():
    grid = Grid.centered((0, 0, 20), (2, 0.02, 0.02), 0.01)
    s = ScattererSet([[-0.1, 0, 20], [0.1, 0, 20]], [1.0, 1.0], [TISSUE, TISSUE])
    v = acoustics.synthesize_volume_fast(s, grid, (0.4, 0.4, 0.25))
    line = v.data[:, 0, 0]
    interior = (line[1:-1] > line[:-2]) & (line[1:-1] >= line[2:])
    assert interior.sum() == 1


def test_zero_amplitude_gives_zero_volume():
    grid = Grid.centered((0, 0, 20), 2.0, 0.4)
    v = acoustics.synthesize_volume_fast(ScattererSet([[0, 0, 20]], [0.0], [TISSUE]), grid)
    assert not np.any(v.data)


def test_kind_selection_and_fov():
    grid = Grid.centered((0, 0, 20), 4.2, 0.2)
    s = ScattererSet([[-1, 0, 20], [1, 0, 20]], [1.0, 1.0], [TISSUE, BUBBLE])
    only_b = acoustics.synthesize_volume_fast(s, grid, kinds=[BUBBLE])
    assert only_b.argmax_position()[0] == pytest.approx(1.0)
    clipped = acoustics.synthesize_volume_fast(s, grid, fov=((-5, -5, 0), (0.0, 5, 45)))
    assert not np.any(clipped.data[grid.axes()[0] > 0])


def test_noise_level_matches_snr():
    grid = Grid.centered((0, 0, 20), 6.0, 0.2)
    s = ScattererSet([[0, 0, 20]], [1.0], [TISSUE])
    clean = acoustics.synthesize_volume_fast(s, grid)
    noisy = acoustics.synthesize_volume_fast(s, grid, snr_db=20.0, rng=np.random.default_rng(0))
    ratio = np.std(noisy.data - clean.data) / acoustics.signal_rms(clean.data)
    assert ratio == pytest.approx(0.1, rel=0.03)
    with pytest.raises(ValueError):
        acoustics.synthesize_volume_fast(s, grid, snr_db=20.0)
