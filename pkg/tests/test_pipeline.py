import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occanomaly import pipeline as pl
from occanomaly.fixtures import kitti_camera, make_scene, make_toy_inputs, pseudo_from_metric
from occanomaly.geometry import CameraModel, GridMeta, LabelGrid, PointCloud, project_points, world_to_voxel
from occanomaly.svr import SvrHyper
from oracles import fine_step_occluded


def test_round_half_away():
    np.testing.assert_array_equal(pl.round_half_away([-1.5, -0.5, 0.49, 0.5, 2.5]), [-2, -1, 0, 1, 3])


coord = st.floats(-20, 60, allow_nan=False)


@settings(max_examples=150, deadline=None)
@given(
    st.tuples(coord, coord, coord),
    st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(0, 15)),
    st.sampled_from([0.5, 1.0, 2.0, 4.0, 8.0]),
)
def test_ray_march_ends_at_target(cam, target, scale):
    if np.linalg.norm(np.subtract(cam, target)) < 1e-6:
        return
    cfg = pl.RayMarchConfig(scale)
    pos, vox = pl.ray_march(cam, target, cfg)
    assert tuple(vox[-1]) == target
    assert np.linalg.norm(pos[-1] - target) <= cfg.step + 1e-9
    if len(pos) > 1:
        assert np.all(np.linalg.norm(pos[:-1] - np.asarray(target), axis=1) > cfg.step)
        np.testing.assert_allclose(np.linalg.norm(np.diff(pos, axis=0), axis=1), cfg.step)


def test_ray_march_zero_length():
    with pytest.raises(ValueError):
        pl.ray_march((1, 2, 3), (1, 2, 3), pl.RayMarchConfig())


def test_scale_validation():
    with pytest.raises(ValueError):
        pl.RayMarchConfig(0.0)


def test_visibility_blocked_and_clear():
    occ = np.zeros((40, 20, 10), bool)
    occ[20, :, :] = True
    cam = np.array([0.0, 10.0, 5.0])
    cfg = pl.RayMarchConfig(4.0)
    assert pl.classify_visibility(occ, cam, (30, 10, 5), cfg) == pl.OCCLUDED
    assert pl.classify_visibility(occ, cam, (15, 10, 5), cfg) == pl.VISIBLE
    # an occupied target does not block itself
    assert pl.classify_visibility(occ, cam, (20, 10, 5), cfg) == pl.VISIBLE


def test_camera_outside_grid_sees_through_empty_space():
    occ = np.zeros((10, 10, 4), bool)
    occ[:, :, 0] = True
    cfg = pl.RayMarchConfig()
    assert pl.classify_visibility(occ, np.array([-6.0, 5.0, 3.0]), (8, 5, 3), cfg) == pl.VISIBLE
    assert pl.classify_visibility(occ, np.array([-6.0, 5.0, 3.0]), (8, 5, 0), cfg) == pl.OCCLUDED


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_visibility_matches_fine_oracle_on_slabs(seed):
    rng = np.random.default_rng(seed)
    occ = np.zeros((30, 30, 8), bool)
    i = int(rng.integers(8, 22))
    y0, y1 = sorted(rng.integers(0, 30, 2))
    occ[i, y0:y1 + 1, :] = True
    cam = np.array([0.0, rng.uniform(0, 29), rng.uniform(0, 7)])
    target = (int(rng.integers(i + 2, 30)), int(rng.integers(0, 30)), int(rng.integers(0, 8)))
    cfg = pl.RayMarchConfig(4.0)
    got = pl.classify_visibility(occ, cam, target, cfg) == pl.OCCLUDED
    assert got == fine_step_occluded(occ, cam, target, cfg.step)


def test_integrate_writes_only_visible():
    scene = make_scene()
    cam = kitti_camera()
    meta = scene.meta
    behind = world_to_voxel((40.0, 0.0, 0.5), meta)
    clear = world_to_voxel((15.0, 0.0, 0.5), meta)
    out, vis = pl.integrate_with_occlusion(scene, [behind, clear, clear], cam)
    assert vis == {behind: pl.OCCLUDED, clear: pl.VISIBLE}
    assert out.labels[clear] == scene.anomaly_class
    assert out.labels[behind] == scene.labels[behind]
    assert scene.labels[clear] == 0  # input untouched
    kept, _ = pl.integrate_with_occlusion(scene, [behind], cam, keep_occluded=True)
    assert kept.labels[behind] == scene.anomaly_class


def test_integrate_rejects_far_camera():
    scene = make_scene(GridMeta((16, 16, 4), 0.2, (100.0, 0.0, 0.0)))
    with pytest.raises(ValueError):
        pl.integrate_with_occlusion(scene, [(1, 1, 1)], kitti_camera())


def test_integrate_rejects_out_of_grid_voxel():
    scene = make_scene()
    with pytest.raises(IndexError):
        pl.integrate_with_occlusion(scene, [(300, 0, 0)], kitti_camera())


def random_camera(rng, size=(320, 240)):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    K = np.array([[rng.uniform(200, 800), 0.0, size[0] / 2], [0.0, rng.uniform(200, 800), size[1] / 2], [0.0, 0.0, 1.0]])
    return CameraModel(K, q, rng.normal(size=3), size)


@pytest.mark.parametrize("seed", range(3))
def test_lift_then_project_round_trip(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    w, h = cam.image_size
    depth = rng.uniform(1.0, 80.0, size=(h, w))
    mask = rng.random((h, w)) < 0.05
    pts = pl.lift_mask_to_points(pl.AnomalyMask2D(w, h, mask), pl.DepthMap(w, h, depth, "metric"), cam)
    rows, cols = np.nonzero(mask)
    uv, dist, front = project_points(cam, pts.points)
    assert front.all()
    np.testing.assert_allclose(uv, np.stack([cols, rows], axis=1), atol=1e-6)
    np.testing.assert_allclose(dist, depth[rows, cols], atol=1e-6)


def test_lift_skips_invalid_depth():
    cam = kitti_camera((8, 6))
    depth = np.full((6, 8), 10.0)
    depth[0, 0] = np.nan
    depth[0, 1] = 0.0
    mask = np.zeros((6, 8), bool)
    mask[0, :3] = True
    diag = pl.Diagnostics()
    pts = pl.lift_mask_to_points(pl.AnomalyMask2D(8, 6, mask), pl.DepthMap(8, 6, depth, "metric"), cam, diag)
    assert len(pts) == 1 and diag.skipped_pixels == 2


def test_lift_requires_metric_depth():
    cam = kitti_camera((4, 4))
    with pytest.raises(ValueError):
        pl.lift_mask_to_points(pl.AnomalyMask2D(4, 4, np.ones(16)), pl.DepthMap(4, 4, np.ones(16)), cam)


def test_voxelize_dedups_and_counts_out_of_range():
    meta = GridMeta((4, 4, 4), 1.0, (0, 0, 0))
    diag = pl.Diagnostics()
    vox = pl.voxelize_points(PointCloud([[0.2, 0.2, 0.2], [0.7, 0.1, 0.9], [5, 0, 0]]), meta, diag)
    assert vox == {(0, 0, 0)}
    assert diag.out_of_range_points == 1


def test_alignment_pairs_and_fit_recover_distance():
    toy = make_toy_inputs(n_points=4000)
    diag = pl.Diagnostics()
    pseudo, dist = pl.collect_alignment_pairs(toy.points, toy.depth, toy.camera, 400, seed=1, exclude=toy.mask.mask, diag=diag)
    assert diag.alignment_pairs == len(pseudo) > 100
    assert diag.alignment_pairs + diag.dropped_samples == 400
    model = pl.fit_depth_alignment(np.column_stack([pseudo, dist]), SvrHyper())
    aligned = pl.apply_depth_alignment(model, toy.depth)
    assert aligned.kind == "metric"
    valid = toy.depth.valid
    assert np.isnan(aligned.values[~valid]).all()
    # distances recovered within the tube plus sampling slack
    pts_d = np.array([12.0, 20.0, 30.0])
    np.testing.assert_allclose(model.predict(pseudo_from_metric(pts_d)), pts_d, atol=0.5)


def test_alignment_requires_pseudo():
    toy_depth = pl.DepthMap(2, 1, [1.0, 2.0], "metric")
    with pytest.raises(ValueError):
        pl.apply_depth_alignment(None, toy_depth)


def test_depth_and_mask_shapes():
    with pytest.raises(ValueError):
        pl.DepthMap(3, 2, np.zeros(5))
    with pytest.raises(ValueError):
        pl.DepthMap(1, 1, [1.0], kind="disparity")
    with pytest.raises(ValueError):
        pl.AnomalyMask2D(2, 2, np.zeros(3))


def test_toy_injection_end_to_end():
    toy = make_toy_inputs(n_points=20000)
    pseudo, dist = pl.collect_alignment_pairs(toy.points, toy.depth, toy.camera, 500, seed=0, exclude=toy.mask.mask)
    model = pl.fit_depth_alignment(np.column_stack([pseudo, dist]))
    aligned = pl.apply_depth_alignment(model, toy.depth)
    pts = pl.lift_mask_to_points(toy.mask, aligned, toy.camera)
    vox = pl.voxelize_points(pts, toy.scene.meta)
    out, vis = pl.integrate_with_occlusion(toy.scene, vox, toy.camera)
    injected = np.argwhere(out.labels == out.anomaly_class)
    assert len(injected) > 20
    # front faces of the box sit near x = 14.5 m
    x = toy.scene.meta.origin[0] + (injected[:, 0] + 0.5) * toy.scene.meta.voxel_size
    assert 13.5 < x.min() and x.max() < 16.5
    assert isinstance(out, LabelGrid)
