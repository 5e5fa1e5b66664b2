"""Lift 2D anomaly masks into a voxel scene.

Depth alignment pairs sampled LiDAR distances with pseudo-depth, the fitted SVR
maps the pseudo-depth raster to meters, masked pixels are back-projected to
world points, voxelized, and each anomaly voxel is checked for occlusion by
marching a ray from the camera.

Pixel ``(col, row)`` has image coordinates ``(u, v) = (col, row)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import numpy as np

from .geometry import (
    CameraModel,
    GridMeta,
    LabelGrid,
    PointCloud,
    project_points,
    sample_points,
    world_to_continuous_voxel,
    world_to_voxel_many,
)
from .svr import SvrHyper, SvrModel, fit_svr

logger = logging.getLogger(__name__)

VISIBLE = "visible"
OCCLUDED = "occluded"

Voxel = Tuple[int, int, int]


@dataclass(eq=False)
class DepthMap:
    width: int
    height: int
    values: np.ndarray
    kind: str = "pseudo"

    def __post_init__(self):
        if self.kind not in ("pseudo", "metric"):
            raise ValueError(f"depth kind must be 'pseudo' or 'metric', got {self.kind!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != self.width * self.height:
            raise ValueError(f"depth payload has {values.size} values, expected {self.width}x{self.height}")
        self.values = values.reshape(self.height, self.width)

    @property
    def valid(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.values) & (self.values > 0)


@dataclass(eq=False)
class AnomalyMask2D:
    width: int
    height: int
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.size != self.width * self.height:
            raise ValueError(f"mask payload has {mask.size} values, expected {self.width}x{self.height}")
        self.mask = mask.reshape(self.height, self.width) != 0


@dataclass(frozen=True)
class RayMarchConfig:
    scale: float = 4.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"ray-march scale must be positive, got {self.scale}")

    @property
    def step(self) -> float:
        return 1.0 / self.scale


@dataclass
class Diagnostics:
    skipped_pixels: int = 0
    out_of_range_points: int = 0
    alignment_pairs: int = 0
    dropped_samples: int = 0
    notes: list = field(default_factory=list)


def collect_alignment_pairs(
    cloud: PointCloud,
    depth: DepthMap,
    cam: CameraModel,
    n: int,
    seed: int,
    exclude: np.ndarray | None = None,
    diag: Diagnostics | None = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Sample points, project them, and pair pseudo-depth with Euclidean distance.

    Sampling happens before frustum filtering; samples behind the camera,
    outside the image, on invalid depth or on ``exclude`` pixels are dropped.
    """
    sampled = sample_points(cloud, n, seed)
    uv, dist, front = project_points(cam, sampled.points)
    col = np.floor(uv[:, 0] + 0.5)
    row = np.floor(uv[:, 1] + 0.5)
    ok = front & (col >= 0) & (col < depth.width) & (row >= 0) & (row < depth.height)
    col = np.where(ok, col, 0).astype(np.int64)
    row = np.where(ok, row, 0).astype(np.int64)
    ok &= depth.valid[row, col]
    if exclude is not None:
        ok &= ~np.asarray(exclude, dtype=bool)[row, col]
    if diag is not None:
        diag.dropped_samples += int((~ok).sum())
        diag.alignment_pairs += int(ok.sum())
    return depth.values[row[ok], col[ok]], dist[ok]


def fit_depth_alignment(pairs, hyper: SvrHyper = SvrHyper()) -> SvrModel:
    """SVR fit of metric distance against pseudo-depth; ``pairs`` is (N, 2)."""
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    return fit_svr(pairs[:, 0], pairs[:, 1], hyper)


def apply_depth_alignment(model: SvrModel, depth: DepthMap) -> DepthMap:
    if depth.kind != "pseudo":
        raise ValueError("depth alignment expects a pseudo-depth map")
    valid = depth.valid
    out = np.full(depth.values.shape, np.nan)
    out[valid] = model.predict(depth.values[valid])
    return DepthMap(depth.width, depth.height, out, kind="metric")


def lift_mask_to_points(
    mask: AnomalyMask2D,
    aligned: DepthMap,
    cam: CameraModel,
    diag: Diagnostics | None = None,
) -> PointCloud:
    """Back-project masked pixels so each point sits at its pixel's Euclidean distance."""
    if aligned.kind != "metric":
        raise ValueError("lifting needs a metric depth map")
    if (mask.width, mask.height) != (aligned.width, aligned.height):
        raise ValueError("mask and depth map dimensions disagree")
    valid = aligned.valid
    skipped = int((mask.mask & ~valid).sum())
    if diag is not None:
        diag.skipped_pixels += skipped
    if skipped:
        logger.info("skipped %d masked pixels with invalid depth", skipped)
    rows, cols = np.nonzero(mask.mask & valid)
    if rows.size == 0:
        return PointCloud(np.empty((0, 3)))
    pix = np.stack([cols, rows, np.ones_like(cols)], axis=1).astype(np.float64)
    rays = np.linalg.solve(cam.K, pix.T).T
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    pc = rays * aligned.values[rows, cols][:, None]
    return PointCloud((pc - cam.t) @ cam.R)


def voxelize_points(points: PointCloud, meta: GridMeta, diag: Diagnostics | None = None) -> set:
    idx, inside = world_to_voxel_many(points.points, meta)
    if diag is not None:
        diag.out_of_range_points += int((~inside).sum())
    return {tuple(int(a) for a in row) for row in np.unique(idx[inside], axis=0)}


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def ray_march(camera_voxel, target, cfg: RayMarchConfig) -> Tuple[np.ndarray, np.ndarray]:
    """March from ``camera_voxel`` toward ``target`` in steps of ``1 / scale``.

    Returns ``(positions, voxels)`` with one row per step, ending at the first
    position within one step of the target. The terminal row's voxel is the
    target itself: for steps above half a voxel the tolerance ball can straddle
    a rounding boundary.
    """
    C = np.asarray(camera_voxel, dtype=np.float64)
    A = np.asarray(target, dtype=np.float64)
    span = A - C
    length = float(np.linalg.norm(span))
    if length == 0.0:
        raise ValueError("zero-length ray: camera position coincides with the target")
    step = cfg.step
    unit = span / length
    m = np.arange(int(math.ceil(length / step)) + 2, dtype=np.float64)
    pos = C + (m * step)[:, None] * unit
    near = np.linalg.norm(pos - A, axis=1) <= step
    last = int(np.argmax(near))
    pos = pos[:last + 1]
    vox = round_half_away(pos)
    vox[-1] = np.asarray(target, dtype=np.int64)
    return pos, vox


def camera_voxel_position(cam: CameraModel, meta: GridMeta) -> np.ndarray:
    return world_to_continuous_voxel(cam.center, meta)


def classify_visibility(occupied: np.ndarray, camera_voxel: np.ndarray, target: Voxel, cfg: RayMarchConfig) -> str:
    """Occluded when an occupied voxel is hit before the terminal step, or the ray leaves the grid."""
    _, vox = ray_march(camera_voxel, target, cfg)
    inner = vox[:-1]
    if inner.size == 0:
        return VISIBLE
    inner = inner[np.any(inner != np.asarray(target), axis=1)]
    dims = np.asarray(occupied.shape)
    inside = np.all((inner >= 0) & (inner < dims), axis=1)
    if inside.any():
        first_in = int(np.argmax(inside))
        if not inside[first_in:].all():
            return OCCLUDED
        hit = inner[inside]
        if occupied[hit[:, 0], hit[:, 1], hit[:, 2]].any():
            return OCCLUDED
    return VISIBLE


def integrate_with_occlusion(
    scene: LabelGrid,
    anomaly_voxels: Iterable[Voxel],
    cam: CameraModel,
    cfg: RayMarchConfig = RayMarchConfig(),
    margin_voxels: float = 64.0,
    keep_occluded: bool = False,
) -> Tuple[LabelGrid, Dict[Voxel, str]]:
    """Write visible anomaly voxels into a copy of ``scene``.

    Occlusion is judged against the original scene only; all decisions are made
    before any label is written.
    """
    meta = scene.meta
    cv = camera_voxel_position(cam, meta)
    lo, hi = -margin_voxels, np.asarray(meta.dims) - 1 + margin_voxels
    if np.any(cv < lo) or np.any(cv > hi):
        raise ValueError(f"camera at voxel {cv.round(2).tolist()} is outside the grid margin of {margin_voxels} voxels")
    occupied = scene.occupied()
    visibility: Dict[Voxel, str] = {}
    for vox in sorted({tuple(int(a) for a in v) for v in anomaly_voxels}):
        if not meta.contains_index(vox):
            raise IndexError(f"anomaly voxel {vox} outside grid {meta.dims}")
        visibility[vox] = classify_visibility(occupied, cv, vox, cfg)
    out = scene.copy()
    for vox, state in visibility.items():
        if state == VISIBLE or keep_occluded:
            out.labels[vox] = scene.anomaly_class
    return out, visibility
