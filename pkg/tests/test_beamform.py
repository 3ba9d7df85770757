import math

import numpy as np
import pytest

from ulmtrack import acoustics, beamform
from ulmtrack.acoustics import ChannelFrame, ChannelParams
from ulmtrack.scene import TISSUE, ArraySpec, ScattererSet
from ulmtrack.volume import Grid, Volume

ARRAY = ArraySpec()
PARAMS = ChannelParams(depth=25.0)


def _frame(points, amps=None):
    amps = np.ones(len(points)) if amps is None else amps
    s = ScattererSet(points, amps, [TISSUE] * len(points))
    return acoustics.simulate_channel_data(s, ARRAY, "full", PARAMS)


def test_das_argmax_near_scatterer():
    f = _frame([[1.0, 1.0, 20.0]])
    grid = Grid.centered((1.0, 1.0, 20.0), 2.8, 0.4)
    v = beamform.das_beamform(f, grid, ARRAY)
    assert np.all(np.abs(v.argmax_position() - [1.0, 1.0, 20.0]) <= 0.4 + 1e-9)


def test_zero_channels_give_zero_volume():
    f = ChannelFrame(np.zeros((ARRAY.rows * ARRAY.cols, 100)), 31.2, 0.0)
    v = beamform.das_beamform(f, Grid.centered((0, 0, 10), 1.2, 0.4), ARRAY)
    assert not np.any(v.data)


def test_das_iq_is_linear():
    f = _frame([[0.5, -0.3, 15.0]])
    g = _frame([[-1.0, 0.8, 16.0]])
    combo = ChannelFrame(2.0 * f.samples - 0.5 * g.samples, f.sample_rate, f.t0)
    pts = Grid.centered((0, 0, 15.5), 2.0, 0.4).points()
    i_f, q_f = beamform.das_iq(f, pts, ARRAY)
    i_g, q_g = beamform.das_iq(g, pts, ARRAY)
    i_c, q_c = beamform.das_iq(combo, pts, ARRAY)
    np.testing.assert_allclose(i_c, 2.0 * i_f - 0.5 * i_g, atol=1e-10)
    np.testing.assert_allclose(q_c, 2.0 * q_f - 0.5 * q_g, atol=1e-10)


def test_mirror_symmetry():
    f = _frame([[1.2, 0.4, 18.0], [-1.2, 0.4, 18.0]])
    grid = Grid.centered((0.0, 0.4, 18.0), (4.0, 0.8, 1.6), 0.4)
    v = beamform.das_beamform(f, grid, ARRAY).data
    np.testing.assert_allclose(v, v[::-1], rtol=0.02, atol=0.02 * v.max())


def test_shift_by_one_voxel_shifts_argmax():
    grid = Grid.centered((0, 0, 18.0), 2.8, 0.4)
    a = beamform.das_beamform(_frame([[0.0, 0.0, 18.0]]), grid, ARRAY).argmax_position()
    b = beamform.das_beamform(_frame([[0.4, 0.0, 18.0]]), grid, ARRAY).argmax_position()
    assert b - a == pytest.approx([0.4, 0.0, 0.0])


def test_das_is_deterministic_and_worker_independent(monkeypatch):
    f = _frame([[0.0, 0.5, 17.0]])
    grid = Grid.centered((0, 0.5, 17.0), 6.4, 0.4)
    a = beamform.das_beamform(f, grid, ARRAY, workers=1).data
    b = beamform.das_beamform(f, grid, ARRAY, workers=3).data
    assert np.array_equal(a, b)
    monkeypatch.setenv(beamform.WORKERS_ENV, "2")
    assert beamform.max_workers() == 2


def test_fast_and_channel_paths_agree():
    p = [0.6, -0.7, 19.3]
    grid = Grid.centered((0.4, -0.8, 19.2), 3.2, 0.4)
    das = beamform.das_beamform(_frame([p]), grid, ARRAY).argmax_position()
    fast = acoustics.synthesize_volume_fast(ScattererSet([p], [1.0], [TISSUE]), grid).argmax_position()
    assert np.all(np.abs(das - fast) <= 0.4 + 1e-9)


def test_crop_sizes_and_values():
    src = Volume(np.random.default_rng(0).random((60, 60, 60)), Grid((-12.0, -12.0, 0.0), 0.4, (60, 60, 60)))
    crop = beamform.crop_online_volume(src, (0.0, 0.0, 12.0), 12.5)
    assert crop.shape == (31, 31, 31)
    assert crop.meta["padded_voxels"] == 0
    one = beamform.crop_online_volume(src, src.grid.position((10, 20, 30)), 0.4)
    assert one.shape == (1, 1, 1)
    assert one.data[0, 0, 0] == src.data[10, 20, 30]


def test_crop_pads_beyond_edge():
    src = Volume(np.ones((20, 20, 20)), Grid((0.0, 0.0, 0.0), 0.4, (20, 20, 20)))
    crop = beamform.crop_online_volume(src, (0.4, 4.0, 4.0), 12.5)
    assert crop.meta["padded_voxels"] > 0
    assert crop.data.sum() == crop.data.size - crop.meta["padded_voxels"]


def test_crop_outside_fov_is_target_lost():
    src = Volume(np.ones((10, 10, 10)), Grid((0.0, 0.0, 0.0), 0.4, (10, 10, 10)))
    with pytest.raises(beamform.TargetLostError):
        beamform.crop_online_volume(src, (10.0, 0.0, 0.0), 12.5)


def test_log_mip_values():
    assert np.all(beamform.log_mip(np.ones((3, 4, 5)), 20.0) == 255.0)
    v = np.zeros((1, 1, 3))
    v[0, 0] = [1.0, 1.0 / math.sqrt(10.0), 1.0 / 100.0]
    img = beamform.log_compress(v, 20.0)
    assert img[0, 0, 0] == pytest.approx(255.0)
    assert img[0, 0, 1] == pytest.approx(127.5)
    assert img[0, 0, 2] == 0.0
    assert beamform.log_compress(np.array([0.1]), 20.0, vmax=1.0)[0] == pytest.approx(0.0)
    assert not np.any(beamform.log_mip(np.zeros((2, 2, 2))))
    with pytest.raises(ValueError):
        beamform.log_mip(np.ones((2, 2, 2)), 0.0)


def test_log_mip_projection_axis():
    v = np.zeros((4, 5, 6))
    v[1, 2, 3] = 1.0
    img = beamform.log_mip(v, 20.0, axis=1)
    assert img.shape == (4, 6)
    assert img[1, 3] == 255.0


def test_axial_subsamples_follow_half_wavelength():
    assert beamform.axial_subsamples(Grid.centered((0, 0, 10), 2.0, 0.1), ARRAY) == 1
    assert beamform.axial_subsamples(Grid.centered((0, 0, 10), 2.0, 0.4), ARRAY) == 4


def test_coarse_grid_does_not_alias_axial_peak():
    # scatterer midway between two 0.4 mm depth planes
    f = _frame([[0.3, -0.2, 20.2]])
    grid = Grid.centered((0.0, 0.0, 20.0), 4.4, 0.4)
    v = beamform.das_beamform(f, grid, ARRAY)
    assert np.all(np.abs(v.argmax_position() - [0.3, -0.2, 20.2]) <= 0.4 + 1e-9)
