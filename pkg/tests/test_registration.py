import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.ndimage import gaussian_filter

from ulmtrack import acoustics, scene
from ulmtrack.registration import (
    DegenerateInputError, GDOptions, LMOptions, RegistrationError, Translation3,
    register_gd, register_lm, resample_translate, ssd_cost, write_trace_csv,
)
from ulmtrack.volume import Grid, Volume


@pytest.fixture(scope="module")
def landmark_scene():
    phantom = scene.Phantom.build(np.random.default_rng(0))
    world = scene.World(phantom, scene.MotionProfile.static())
    return scene.scatterers_at(0.0, world, scene.ProbePose())


@pytest.fixture(scope="module")
def landmark_grid():
    return Grid.centered([0.0, 0.0, 20.0], 7.0, 0.1)


def render(scatterers, grid, shift=(0.0, 0.0, 0.0)):
    return acoustics.synthesize_volume_fast(scatterers.translated(np.asarray(shift, float)), grid)


def smooth_volume(seed=0, n=24, spacing=0.2):
    data = gaussian_filter(np.random.default_rng(seed).normal(size=(n, n, n)), 2.0)
    return Volume(data, Grid(np.zeros(3), np.full(3, spacing), (n, n, n)))


# -- cost ---------------------------------------------------------------------

def test_cost_zero_for_identical_volumes():
    v = smooth_volume()
    cost, grad = ssd_cost(v, v, Translation3())
    assert cost == 0.0
    assert np.all(grad == 0.0)


def test_cost_zero_at_exact_voxel_shift():
    v = smooth_volume(spacing=0.2)
    moved = Volume(v.data, v.grid.shifted([0.4, 0.0, 0.0]))
    cost, _ = ssd_cost(v, moved, [0.4, 0.0, 0.0])
    assert cost == pytest.approx(0.0, abs=1e-24)


def test_gradient_matches_central_differences():
    ref = smooth_volume(1)
    mov = smooth_volume(2)
    t = np.array([0.137, -0.051, 0.093])
    _, grad = ssd_cost(ref, mov, t)
    h = 1e-3
    fd = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd[i] = (ssd_cost(ref, mov, t + e)[0] - ssd_cost(ref, mov, t - e)[0]) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=1e-4)


def test_no_overlap_signals_divergence():
    v = smooth_volume()
    with pytest.raises(RegistrationError):
        ssd_cost(v, v, [100.0, 0.0, 0.0])


def test_mismatched_spacing_rejected():
    a = smooth_volume(spacing=0.2)
    b = smooth_volume(spacing=0.3)
    with pytest.raises(ValueError):
        ssd_cost(a, b, [0.0, 0.0, 0.0])


# -- gradient descent -----------------------------------------------------------

def test_gd_recovers_lateral_shift(landmark_scene, landmark_grid):
    ref = render(landmark_scene, landmark_grid)
    mov = render(landmark_scene, landmark_grid, (2.0, 0.0, 0.0))
    res = register_gd(ref, mov, GDOptions(levels=4))
    assert np.linalg.norm(res.t.as_array() - [2.0, 0.0, 0.0]) <= 0.02
    assert res.final_cost >= 0.0
    assert res.levels == [3, 2, 1, 0]


def test_gd_zero_shift_stays_put(landmark_scene, landmark_grid):
    ref = render(landmark_scene, landmark_grid)
    res = register_gd(ref, ref, GDOptions(levels=4))
    assert res.t.norm <= 0.01


def test_gd_iterations_bounded_when_converged():
    ref = smooth_volume(3)
    mov = Volume(ref.data, ref.grid.shifted([0.3, -0.2, 0.1]))
    opts = GDOptions(levels=2, max_iters=100)
    res = register_gd(ref, mov, opts)
    if res.converged:
        assert res.iterations <= opts.max_iters * opts.levels
    np.testing.assert_allclose(res.t.as_array(), [0.3, -0.2, 0.1], atol=0.05)


def test_gd_reports_non_convergence_with_best_estimate():
    ref = smooth_volume(4)
    mov = Volume(ref.data, ref.grid.shifted([0.6, 0.0, 0.0]))
    res = register_gd(ref, mov, GDOptions(levels=1, max_iters=2))
    assert not res.converged
    assert res.message
    assert np.all(np.isfinite(res.t.as_array()))


# -- Levenberg-Marquardt -------------------------------------------------------

def test_lm_identical_volumes_take_no_steps(landmark_scene, landmark_grid):
    ref = render(landmark_scene, landmark_grid)
    res = register_lm(ref, ref)
    assert res.iterations == 0
    assert res.t.as_array().tolist() == [0.0, 0.0, 0.0]


def test_lm_flat_volume_is_degenerate():
    flat = Volume(np.ones((16, 16, 16)), Grid(np.zeros(3), np.full(3, 0.1), (16, 16, 16)))
    with pytest.raises(DegenerateInputError):
        register_lm(flat, flat, init=[0.05, 0.0, 0.0])


def test_lm_warm_start_converges_quickly(landmark_scene, landmark_grid):
    truth = np.array([0.8, -0.3, 0.2])
    ref = render(landmark_scene, landmark_grid)
    mov = render(landmark_scene, landmark_grid, truth)
    init = truth + np.array([0.1, 0.0, 0.0])
    res = register_lm(ref, mov, LMOptions(), init=init)
    assert res.converged
    assert res.iterations <= 5
    assert np.linalg.norm(res.t.as_array() - truth) <= 0.02


def test_lm_cost_never_increases(landmark_scene, landmark_grid):
    ref = render(landmark_scene, landmark_grid)
    mov = render(landmark_scene, landmark_grid, (0.35, 0.2, -0.1))
    res = register_lm(ref, mov, LMOptions(levels=3))
    for level in res.levels:
        costs = [row[2] for row in res.trace if row[0] == level]
        assert all(b <= a for a, b in zip(costs, costs[1:]))


def test_registration_is_antisymmetric(landmark_scene, landmark_grid):
    shift = np.array([1.2, -0.6, 0.3])
    a = render(landmark_scene, landmark_grid)
    b = render(landmark_scene, landmark_grid, shift)
    forward = register_gd(a, b, GDOptions(levels=4)).t.as_array()
    backward = register_gd(b, a, GDOptions(levels=4)).t.as_array()
    assert np.linalg.norm(forward + backward) <= 2 * 0.1


def test_trace_csv(tmp_path):
    ref = smooth_volume(5)
    mov = Volume(ref.data, ref.grid.shifted([0.2, 0.0, 0.0]))
    res = register_lm(ref, mov, LMOptions())
    path = write_trace_csv(tmp_path / "trace.csv", res, "abc")
    lines = path.read_text().splitlines()
    assert "level,iteration,cost,dx,dy,dz" in lines
    assert len([ln for ln in lines if not ln.startswith("#")]) == len(res.trace) + 1


# -- resampling ---------------------------------------------------------------

def test_resample_zero_is_identity():
    v = smooth_volume()
    assert np.array_equal(resample_translate(v, [0.0, 0.0, 0.0]).data, v.data)


def test_resample_integer_shift_is_index_shift():
    v = smooth_volume(spacing=0.2)
    out = resample_translate(v, [0.4, -0.2, 0.0]).data
    assert np.array_equal(out[:-2, 1:, :], v.data[2:, :-1, :])
    assert np.all(out[-2:] == 0.0)
    assert np.all(out[:, 0] == 0.0)


def test_resample_round_trip_error_small():
    # linear interpolation attenuates fine detail; "smooth" here means a
    # correlation length of about eight voxels
    n = 56
    data = gaussian_filter(np.random.default_rng(6).normal(size=(n, n, n)), 8.0, mode="wrap")
    v = Volume(data, Grid(np.zeros(3), np.full(3, 0.2), (n, n, n)))
    t = np.array([0.13, -0.27, 0.31])
    back = resample_translate(resample_translate(v, t), -t).data
    inner = (slice(4, -4),) * 3
    err = np.linalg.norm(back[inner] - v.data[inner]) / np.linalg.norm(v.data[inner])
    assert err < 0.01


def test_resample_rejects_non_finite():
    with pytest.raises(ValueError):
        resample_translate(smooth_volume(), [np.nan, 0.0, 0.0])


@given(st.tuples(*[st.floats(-0.5, 0.5, allow_nan=False)] * 3))
def test_translation3_round_trip(v):
    t = Translation3.of(v)
    assert np.array_equal(t.as_array(), np.asarray(v))
    assert (-t).norm == pytest.approx(t.norm)
