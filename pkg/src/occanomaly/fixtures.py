"""Deterministic toy inputs: a flat road, a wall, a parked car and one box anomaly.

Surfaces are ray-cast analytically to get the pseudo-depth raster, the anomaly
mask and a LiDAR-like point cloud, so the injection pipeline can be run end to
end without external data. ``make_logits`` turns a label grid into a K-class
logit volume for scoring and evaluation runs.

Run ``python -m occanomaly.fixtures OUT_DIR`` to write the files and a config.
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraModel, GridMeta, LabelGrid, LogitVolume, PointCloud
from .pipeline import AnomalyMask2D, DepthMap

GROUND_Z = -1.73
ROAD, SIDEWALK, TERRAIN, BUILDING, CAR = 9, 11, 17, 13, 1
# axis-aligned boxes in world meters: (min corner, max corner, label)
WALL = ((35.0, -10.0, -1.8), (35.4, 10.0, 2.0), BUILDING)
PARKED_CAR = ((18.0, -6.0, GROUND_Z), (22.0, -4.2, GROUND_Z + 1.5), CAR)
ANOMALY_BOX = ((14.5, 0.5, GROUND_Z), (15.5, 1.5, GROUND_Z + 1.2))


def pseudo_from_metric(d: np.ndarray) -> np.ndarray:
    """Disparity-like relative depth, larger when closer."""
    return 1000.0 / (np.asarray(d) + 2.0)


def kitti_camera(image_size=(1226, 370)) -> CameraModel:
    w, h = image_size
    K = np.array([[707.0912, 0.0, w / 2.0], [0.0, 707.0912, h / 2.0], [0.0, 0.0, 1.0]])
    # camera x = -world y, camera y = -world z, camera z = world x
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return CameraModel(K, R, np.zeros(3), (w, h))


def _fill_box(labels: np.ndarray, meta: GridMeta, box, label: int) -> None:
    lo = np.floor((np.asarray(box[0]) - meta.origin) / meta.voxel_size).astype(int)
    hi = np.ceil((np.asarray(box[1]) - meta.origin) / meta.voxel_size).astype(int)
    lo = np.clip(lo, 0, meta.dims)
    hi = np.clip(hi, 0, meta.dims)
    labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = label


def make_scene(meta: GridMeta = GridMeta()) -> LabelGrid:
    labels = np.zeros(meta.dims, dtype=np.uint16)
    y = meta.origin[1] + (np.arange(meta.dims[1]) + 0.5) * meta.voxel_size
    ground = np.where(np.abs(y) < 4.0, ROAD, np.where(np.abs(y) < 6.0, SIDEWALK, TERRAIN))
    k_ground = int(np.floor((GROUND_Z - meta.origin[2]) / meta.voxel_size))
    labels[:, :, : k_ground + 1] = ground[None, :, None]
    for lo, hi, lab in (WALL, PARKED_CAR):
        _fill_box(labels, meta, (lo, hi), lab)
    return LabelGrid(meta, labels)


def _ray_box(origin, dirs, lo, hi):
    """Entry distance of rays into an axis-aligned box, inf when missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (np.asarray(lo) - origin) / dirs
        t2 = (np.asarray(hi) - origin) / dirs
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    return np.where(hit, np.maximum(tmin, 0.0), np.inf)


def _scene_hits(origin, dirs):
    """Distances along unit ``dirs`` to the static scene and to the anomaly box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, (GROUND_Z - origin[2]) / dirs[:, 2], np.inf)
    ground_pt = origin + np.where(np.isfinite(t_ground), t_ground, 0.0)[:, None] * dirs
    t_ground = np.where((ground_pt[:, 0] < 51.2) & (np.abs(ground_pt[:, 1]) < 25.6), t_ground, np.inf)
    t_wall = _ray_box(origin, dirs, *WALL[:2])
    t_car = _ray_box(origin, dirs, *PARKED_CAR[:2])
    t_scene = np.minimum(np.minimum(t_ground, t_wall), t_car)
    return t_scene, _ray_box(origin, dirs, *ANOMALY_BOX)


def cast_image(cam: CameraModel):
    """Per-pixel Euclidean distance to the nearest surface and the anomaly mask."""
    w, h = cam.image_size
    rows, cols = np.mgrid[0:h, 0:w]
    pix = np.stack([cols.ravel(), rows.ravel(), np.ones(w * h)], axis=1)
    rays_c = np.linalg.solve(cam.K, pix.T).T
    rays_c /= np.linalg.norm(rays_c, axis=1, keepdims=True)
    dirs = rays_c @ cam.R  # world frame
    t_scene, t_anom = _scene_hits(cam.center, dirs)
    anomaly = t_anom < t_scene
    dist = np.minimum(t_scene, t_anom).reshape(h, w)
    return dist, anomaly.reshape(h, w)


def lidar_points(n: int, seed: int, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """Points on the static surfaces that are in line of sight from ``viewpoint``.

    The anomaly is not seen by the LiDAR.
    """
    rng = np.random.default_rng(seed)
    n_ground = int(n * 0.7)
    g = np.column_stack([rng.uniform(2.0, 51.0, n_ground), rng.uniform(-25.0, 25.0, n_ground), np.full(n_ground, GROUND_Z)])
    n_wall = (n - n_ground) // 2
    wlo, whi, _ = WALL
    wall = np.column_stack([np.full(n_wall, wlo[0]), rng.uniform(wlo[1], whi[1], n_wall), rng.uniform(GROUND_Z, whi[2], n_wall)])
    n_car = n - n_ground - n_wall
    clo, chi, _ = PARKED_CAR
    car = np.column_stack([np.full(n_car, clo[0]), rng.uniform(clo[1], chi[1], n_car), rng.uniform(clo[2], chi[2], n_car)])
    pts = np.vstack([g, wall, car])
    origin = np.asarray(viewpoint, dtype=np.float64)
    span = pts - origin
    dist = np.linalg.norm(span, axis=1)
    t_scene, _ = _scene_hits(origin, span / dist[:, None])
    return PointCloud(pts[t_scene >= dist - 1e-6 * dist])


@dataclass
class ToyInputs:
    scene: LabelGrid
    camera: CameraModel
    depth: DepthMap
    mask: AnomalyMask2D
    points: PointCloud


def make_toy_inputs(meta: GridMeta = GridMeta(), image_size=(1226, 370), n_points: int = 60000, seed: int = 0) -> ToyInputs:
    cam = kitti_camera(image_size)
    dist, anomaly = cast_image(cam)
    pseudo = np.where(np.isfinite(dist), pseudo_from_metric(dist), 0.0)
    w, h = cam.image_size
    return ToyInputs(
        scene=make_scene(meta),
        camera=cam,
        depth=DepthMap(w, h, pseudo, "pseudo"),
        mask=AnomalyMask2D(w, h, anomaly),
        points=lidar_points(n_points, seed),
    )


def make_logits(grid: LabelGrid, num_classes: int = 20, seed: int = 0, noise: float = 0.3, free_margin: float = 4.0) -> LogitVolume:
    """Synthetic network output for ``grid``.

    Known classes get a clear peak at their label. Anomaly voxels lean towards
    car with extra mass on bicycle, motorcycle and person. Free voxels get noisy
    logits with a ``free_margin`` lead for the free class.
    """
    rng = np.random.default_rng(seed)
    labels = grid.labels
    vals = rng.normal(0.0, noise, size=(num_classes,) + labels.shape).astype(np.float32)
    lab = labels.astype(np.int64)
    known = (lab < num_classes) & (lab != grid.free_class)
    ii, jj, kk = np.nonzero(known)
    vals[lab[known], ii, jj, kk] += 8.0
    ii, jj, kk = np.nonzero(lab == grid.free_class)
    vals[grid.free_class, ii, jj, kk] += free_margin
    ii, jj, kk = np.nonzero(lab == grid.anomaly_class)
    vals[CAR, ii, jj, kk] += 4.0
    for c in (2, 3, 6):  # bicycle, motorcycle, person
        vals[c, ii, jj, kk] += 2.5
    return LogitVolume(grid.meta, vals)


def predicted_scene(meta: GridMeta = GridMeta()) -> LabelGrid:
    """What a model would see: the static scene plus the whole anomaly box."""
    grid = make_scene(meta)
    _fill_box(grid.labels, meta, ANOMALY_BOX, grid.anomaly_class)
    return grid


def write_fixture(out_dir, seed: int = 0, meta: GridMeta = GridMeta(), with_logits: bool = True) -> Path:
    """Write toy inputs and a config chaining inject, score and eval; returns the config path."""
    from . import formats
    from .scoring import geometry_prior

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    toy = make_toy_inputs(meta, seed=seed)
    formats.write_label_grid(toy.scene, out / "scene.occ")
    formats.write_calib(toy.camera, out / "calib.txt")
    formats.write_depth_raster(toy.depth, out / "pseudo_depth.bin")
    formats.write_mask(toy.mask, out / "anomaly_mask.pgm")
    formats.write_point_cloud(toy.points, out / "points.bin")
    run = out / "run"
    config = {
        "dataset": "toy",
        "seed": seed,
        "output_dir": str(run),
        "grid": {"dims": list(meta.dims), "voxel_size": meta.voxel_size, "origin": list(meta.origin)},
        "inject": {
            "scene": str(out / "scene.occ"),
            "calib": str(out / "calib.txt"),
            "depth": str(out / "pseudo_depth.bin"),
            "mask": str(out / "anomaly_mask.pgm"),
            "points": str(out / "points.bin"),
        },
        "eval": {"gt": str(run / "labels_injected.occ"), "scores": str(run / "scores_semantic_aware.occ")},
    }
    if with_logits:
        logits = make_logits(predicted_scene(meta), seed=seed)
        formats.write_logit_volume(logits, out / "logits.occ")
        pred, _ = geometry_prior(logits)
        formats.write_label_grid(pred, out / "pred_labels.occ")
        del logits
        config["score"] = {"logits": str(out / "logits.occ")}
        config["eval"]["pred"] = str(out / "pred_labels.occ")
    path = out / "config.json"
    path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="write the toy anomaly-injection fixture")
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--no-logits", action="store_true", help="skip the 20-class logit volume")
    args = parser.parse_args(argv)
    print(write_fixture(args.out_dir, args.seed, with_logits=not args.no_logits))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
