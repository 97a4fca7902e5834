import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

from dronelab.core_types import Bounds, Gate, Pose, Track
from dronelab.environment_geometry import (
    NO_OBSTACLE_DISTANCE,
    GeometryError,
    GridTooLarge,
    NoFreeSpaceFound,
    SignedDistanceField,
    VoxelGrid,
    brute_force_sdf,
    build_sdf,
    build_voxel_grid,
    is_occupied,
    nearest_free_point,
    query_gradient,
    query_sdf,
    read_sdf,
    read_voxel_grid,
    write_sdf,
    write_voxel_grid,
)


def axis_gate_track():
    g0 = Gate("a", 0, Pose([2.0, 0.0, 2.0]), 1.0, 1.0, 2.0, 2.0)
    g1 = Gate("b", 1, Pose([6.0, 0.0, 2.0]), 1.0, 1.0, 2.0, 2.0)
    return Track("axis", (g0, g1), Bounds([0, -2, 0], [8, 2, 4]))


def frame_oracle(p, centre, res):
    """Axis-aligned frame: square ring |y|,|z| in [0.5, 1] (max-norm), |x| <= 0.05, grown by res/2."""
    x, y, z = p - centre
    dx = max(abs(x) - 0.05, 0.0)
    m = max(abs(y), abs(z))
    # distance from (y, z) to the ring between the two squares
    if m > 1.0:
        dyz = np.hypot(max(abs(y) - 1.0, 0.0), max(abs(z) - 1.0, 0.0))
    elif m >= 0.5:
        dyz = 0.0
    else:
        dyz = 0.5 - m
    return np.hypot(dx, dyz) <= res / 2 + 1e-12


def test_voxelisation_matches_point_oracle():
    track = axis_gate_track()
    res = 0.1
    grid = build_voxel_grid(track, res)
    assert grid.dims == (80, 40, 40)
    idx = np.indices(grid.dims).reshape(3, -1).T
    centres = grid.origin + (idx + 0.5) * res
    want = np.array([any(frame_oracle(c, g.center, res) for g in track.gates) for c in centres])
    np.testing.assert_array_equal(grid.occupancy.ravel(), want)


def test_sdf_signs_and_fast_path_matches_reference(rng):
    occ = rng.random((9, 7, 5)) < 0.15
    grid = VoxelGrid(np.zeros(3), 0.2, occ)
    sdf = build_sdf(grid)
    np.testing.assert_array_equal(sdf.distance, brute_force_sdf(grid))
    assert np.all(sdf.distance[occ] < 0) and np.all(sdf.distance[~occ] > 0)


@pytest.mark.parametrize("fill", [False, True])
def test_single_polarity_uses_sentinel(fill):
    grid = VoxelGrid(np.zeros(3), 0.5, np.full((3, 3, 3), fill))
    d = build_sdf(grid).distance
    np.testing.assert_array_equal(d, -NO_OBSTACLE_DISTANCE if fill else NO_OBSTACLE_DISTANCE)


def test_query_is_trilinear(rng):
    d = rng.normal(size=(6, 5, 4))
    sdf = SignedDistanceField(np.array([1.0, -1.0, 0.5]), 0.3, d)
    axes = [sdf.origin[a] + (np.arange(n) + 0.5) * sdf.resolution for a, n in enumerate(d.shape)]
    interp = RegularGridInterpolator(axes, d)
    lo = sdf.origin + 0.5 * sdf.resolution
    hi = sdf.origin + (np.array(d.shape) - 0.5) * sdf.resolution
    for p in rng.uniform(lo, hi, (200, 3)):
        assert query_sdf(sdf, p) == pytest.approx(float(interp(p)[0]), abs=1e-12)
    val, oob = query_sdf(sdf, sdf.origin - 1.0, with_flag=True)
    assert oob and val == pytest.approx(d[0, 0, 0])


def test_gradient_of_linear_field_is_exact():
    ijk = np.indices((8, 8, 8)).astype(float)
    d = 0.25 * (2 * ijk[0] - ijk[1] + 2 * ijk[2])
    sdf = SignedDistanceField(np.zeros(3), 0.25, d)
    g = query_gradient(sdf, [1.0, 1.1, 0.9])
    np.testing.assert_allclose(g, np.array([2, -1, 2]) / 3, atol=1e-12)


def test_nearest_free_point_escapes_an_obstacle():
    occ = np.zeros((20, 20, 20), dtype=bool)
    occ[8:12, 8:12, 8:12] = True
    sdf = build_sdf(VoxelGrid(np.zeros(3), 0.1, occ))
    p = nearest_free_point(sdf, [1.05, 1.0, 0.98], margin=0.05)
    assert query_sdf(sdf, p) > 0.05
    assert not is_occupied(VoxelGrid(np.zeros(3), 0.1, occ), p)
    solid = build_sdf(VoxelGrid(np.zeros(3), 0.1, np.ones((4, 4, 4), dtype=bool)))
    with pytest.raises(NoFreeSpaceFound):
        nearest_free_point(solid, [0.2, 0.2, 0.2], max_iter=5)


def test_file_round_trip(tmp_path, rng):
    grid = VoxelGrid(np.array([-1.0, 0.5, 2.0]), 0.25, rng.random((5, 6, 7)) < 0.3)
    write_voxel_grid(grid, tmp_path / "g.voxgrid")
    back = read_voxel_grid(tmp_path / "g.voxgrid")
    np.testing.assert_array_equal(back.occupancy, grid.occupancy)
    np.testing.assert_array_equal(back.origin, grid.origin)
    sdf = build_sdf(grid)
    write_sdf(sdf, tmp_path / "g.sdf")
    np.testing.assert_allclose(read_sdf(tmp_path / "g.sdf").distance, sdf.distance, rtol=1e-6)
    with pytest.raises(GeometryError):
        read_sdf(tmp_path / "g.voxgrid")


def test_resolution_and_size_limits():
    track = axis_gate_track()
    with pytest.raises(GeometryError):
        build_voxel_grid(track, 0.01)
    big = Track("big", track.gates, Bounds([-1000, -1000, -100], [1000, 1000, 100]))
    with pytest.raises(GridTooLarge):
        build_voxel_grid(big, 0.05)
