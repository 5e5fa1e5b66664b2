import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occanomaly import geometry as g
from occanomaly.fixtures import kitti_camera


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_default_grid():
    meta = g.GridMeta()
    assert meta.dims == (256, 256, 32)
    assert meta.num_voxels == 2_097_152
    assert meta.extent == pytest.approx((51.2, 51.2, 6.4))


@pytest.mark.parametrize("kwargs", [
    {"dims": (0, 1, 1)},
    {"voxel_size": 0.0},
    {"voxel_size": float("nan")},
    {"origin": (0.0, float("inf"), 0.0)},
])
def test_grid_validation(kwargs):
    with pytest.raises(ValueError):
        g.GridMeta(**kwargs)


def test_voxel_lookup_edges():
    meta = g.GridMeta()
    assert g.world_to_voxel(meta.origin, meta) == (0, 0, 0)
    just_inside = np.asarray(meta.origin) + np.asarray(meta.extent) - 1e-9
    assert g.world_to_voxel(just_inside, meta) == (255, 255, 31)
    assert g.world_to_voxel(np.asarray(meta.origin) + np.asarray(meta.extent), meta) is None
    assert g.world_to_voxel((-0.01, 0, 0), meta) is None
    with pytest.raises(IndexError):
        g.voxel_to_world((256, 0, 0), meta)


@settings(max_examples=100, deadline=None)
@given(st.tuples(st.integers(0, 255), st.integers(0, 255), st.integers(0, 31)))
def test_voxel_center_round_trip(idx):
    meta = g.GridMeta()
    c = g.voxel_to_world(idx, meta)
    assert g.world_to_voxel(c, meta) == idx
    np.testing.assert_allclose(g.world_to_continuous_voxel(c, meta), idx, atol=1e-9)


def test_many_matches_single():
    meta = g.GridMeta()
    rng = np.random.default_rng(0)
    pts = rng.uniform(-5, 55, size=(500, 3))
    idx, inside = g.world_to_voxel_many(pts, meta)
    for p, i, ok in zip(pts, idx, inside):
        single = g.world_to_voxel(p, meta)
        assert (single is not None) == ok
        if ok:
            assert single == tuple(i)


def test_projection_uses_euclidean_distance():
    cam = kitti_camera()
    p = np.array([10.0, -2.0, 1.0])
    uv, d = g.project_point(cam, p)
    assert d == pytest.approx(np.linalg.norm(p))
    pc = cam.R @ p
    assert uv == pytest.approx((cam.K @ pc)[:2] / pc[2])


def test_behind_camera():
    cam = kitti_camera()
    with pytest.raises(g.BehindCameraError):
        g.project_point(cam, (-1.0, 0.0, 0.0))
    uv, d, front = g.project_points(cam, np.array([[-1.0, 0, 0], [5.0, 0, 0]]))
    assert list(front) == [False, True]
    assert np.isnan(uv[0]).all()


def test_camera_center():
    rng = np.random.default_rng(1)
    R = random_rotation(rng)
    t = rng.normal(size=3)
    cam = g.CameraModel(np.diag([500.0, 500.0, 1.0]), R, t, (100, 100))
    np.testing.assert_allclose(R @ cam.center + t, 0, atol=1e-12)


def test_camera_validation():
    K = np.diag([500.0, 500.0, 1.0])
    with pytest.raises(ValueError):
        g.CameraModel(K, np.diag([1.0, 1.0, -1.0]), np.zeros(3), (10, 10))
    with pytest.raises(ValueError):
        g.CameraModel(np.diag([500.0, 500.0, 2.0]), np.eye(3), np.zeros(3), (10, 10))
    with pytest.raises(ValueError):
        g.CameraModel(K, np.eye(3), np.zeros(3), (0, 10))


def test_label_grid_flat_order_is_x_fastest():
    meta = g.GridMeta((3, 2, 2), 0.2, (0, 0, 0))
    grid = g.LabelGrid(meta, np.arange(12))
    assert grid.labels[1, 0, 0] == 1
    assert grid.labels[0, 1, 0] == 3
    assert grid.labels[0, 0, 1] == 6
    np.testing.assert_array_equal(grid.flat(), np.arange(12))


def test_logit_volume_checks():
    meta = g.GridMeta((2, 2, 2), 0.2, (0, 0, 0))
    with pytest.raises(ValueError):
        g.LogitVolume(meta, np.zeros((1, 2, 2, 2)))
    bad = np.zeros((3, 2, 2, 2))
    bad[1, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        g.LogitVolume(meta, bad)
    vol = g.LogitVolume(meta, np.arange(24.0).reshape(3, 2, 2, 2))
    flat = vol.flat_by_voxel()
    assert flat.shape == (8, 3)
    np.testing.assert_array_equal(flat[1], vol.values[:, 1, 0, 0])


def test_sampling_is_seeded():
    cloud = g.PointCloud(np.arange(300.0).reshape(100, 3))
    a = g.sample_points(cloud, 10, 5).points
    b = g.sample_points(cloud, 10, 5).points
    np.testing.assert_array_equal(a, b)
    assert len(np.unique(a[:, 0])) == 10
    assert len(g.sample_points(cloud, 1000, 0)) == 100
    with pytest.raises(ValueError):
        g.sample_points(g.PointCloud(np.empty((0, 3))), 5, 0)
    with pytest.raises(ValueError):
        g.sample_points(cloud, 0, 0)
