"""Grid and camera domain types and the coordinate transforms shared by the toolkit.

Volumes are held as numpy arrays indexed ``[i, j, k]`` (x, y, z). On disk they are
flattened x-fastest, ``flat = i + X * (j + Y * k)``, which is Fortran order for an
``(X, Y, Z)`` array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

DEFAULT_DIMS = (256, 256, 32)
DEFAULT_VOXEL_SIZE = 0.2
# 51.2 m forward, +-25.6 m lateral, 6.4 m vertical starting 2 m below the sensor.
DEFAULT_ORIGIN = (0.0, -25.6, -2.0)

FREE_CLASS = 0
ANOMALY_CLASS = 20


class BehindCameraError(ValueError):
    """Raised when a point has non-positive depth in the camera frame."""


@dataclass(frozen=True)
class GridMeta:
    dims: Tuple[int, int, int] = DEFAULT_DIMS
    voxel_size: float = DEFAULT_VOXEL_SIZE
    origin: Tuple[float, float, float] = DEFAULT_ORIGIN

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"grid dims must be three positive counts, got {self.dims}")
        if len(origin) != 3 or not all(math.isfinite(o) for o in origin):
            raise ValueError(f"grid origin must be three finite values, got {self.origin}")
        if not (self.voxel_size > 0 and math.isfinite(self.voxel_size)):
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def num_voxels(self) -> int:
        X, Y, Z = self.dims
        return X * Y * Z

    @property
    def extent(self) -> Tuple[float, float, float]:
        return tuple(d * self.voxel_size for d in self.dims)

    def contains_index(self, idx) -> bool:
        return all(0 <= int(a) < d for a, d in zip(idx, self.dims))


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera with world-to-camera extrinsics ``p_cam = R @ p + t``."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64).reshape(3, 3)
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("camera parameters must be finite")
        if abs(K[2, 2] - 1.0) > 1e-12 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics need K[2][2] = 1 and positive focal lengths")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("R must be a proper rotation (orthonormal, det +1)")
        w, h = (int(v) for v in self.image_size)
        if w < 1 or h < 1:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        for name, arr in (("K", K), ("R", R), ("t", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "image_size", (w, h))

    @property
    def center(self) -> np.ndarray:
        """Camera optical center in world coordinates."""
        return -self.R.T @ self.t


@dataclass(eq=False)
class LabelGrid:
    meta: GridMeta
    labels: np.ndarray
    free_class: int = FREE_CLASS
    anomaly_class: int = ANOMALY_CLASS

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim == 1:
            if labels.size != self.meta.num_voxels:
                raise ValueError(f"expected {self.meta.num_voxels} labels, got {labels.size}")
            labels = labels.reshape(self.meta.dims, order="F")
        if labels.shape != self.meta.dims:
            raise ValueError(f"label array shape {labels.shape} != grid dims {self.meta.dims}")
        self.labels = labels.astype(np.uint16, copy=False)

    @classmethod
    def empty(cls, meta: GridMeta, **kwargs) -> "LabelGrid":
        free = kwargs.get("free_class", FREE_CLASS)
        return cls(meta, np.full(meta.dims, free, dtype=np.uint16), **kwargs)

    def occupied(self) -> np.ndarray:
        return self.labels != self.free_class

    def copy(self) -> "LabelGrid":
        return LabelGrid(self.meta, self.labels.copy(), self.free_class, self.anomaly_class)

    def flat(self) -> np.ndarray:
        return self.labels.ravel(order="F")


@dataclass(eq=False)
class LogitVolume:
    """Per-voxel class scores, ``values[c, i, j, k]``."""

    meta: GridMeta
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        X, Y, Z = self.meta.dims
        if values.ndim == 1:
            if values.size % self.meta.num_voxels:
                raise ValueError("logit payload length is not a multiple of the voxel count")
            K = values.size // self.meta.num_voxels
            values = values.reshape(K, Z, Y, X).transpose(0, 3, 2, 1)
        if values.ndim != 4 or values.shape[1:] != self.meta.dims:
            raise ValueError(f"logit array shape {values.shape} does not match grid {self.meta.dims}")
        if values.shape[0] < 2:
            raise ValueError("a logit volume needs at least two classes")
        if not np.all(np.isfinite(values)):
            raise ValueError("logit volume contains non-finite values")
        self.values = values

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    def flat_by_voxel(self) -> np.ndarray:
        """(N, K) view-or-copy with voxels in on-disk flat order."""
        K = self.num_classes
        return self.values.transpose(0, 3, 2, 1).reshape(K, -1).T


@dataclass(eq=False)
class ScoreVolume:
    meta: GridMeta
    scores: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        scores = np.asarray(self.scores)
        if scores.ndim == 1:
            if scores.size != self.meta.num_voxels:
                raise ValueError(f"expected {self.meta.num_voxels} scores, got {scores.size}")
            scores = scores.reshape(self.meta.dims, order="F")
        if scores.shape != self.meta.dims:
            raise ValueError(f"score array shape {scores.shape} != grid dims {self.meta.dims}")
        self.scores = scores


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


def world_to_voxel(p, meta: GridMeta) -> Optional[Tuple[int, int, int]]:
    """Voxel containing ``p``, or None outside the half-open grid extent."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    idx = np.floor((p - np.asarray(meta.origin)) / meta.voxel_size).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= np.asarray(meta.dims)):
        return None
    return tuple(int(v) for v in idx)


def world_to_voxel_many(points: np.ndarray, meta: GridMeta) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized ``world_to_voxel``: returns (indices (N, 3), in-range flags (N,))."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((pts - np.asarray(meta.origin)) / meta.voxel_size)
    inside = np.all((idx >= 0) & (idx < np.asarray(meta.dims)), axis=1)
    return idx.astype(np.int64), inside


def voxel_to_world(idx, meta: GridMeta) -> np.ndarray:
    """Center of voxel ``idx`` in world coordinates."""
    if not meta.contains_index(idx):
        raise IndexError(f"voxel index {tuple(idx)} outside grid {meta.dims}")
    return np.asarray(meta.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * meta.voxel_size


def world_to_continuous_voxel(p, meta: GridMeta) -> np.ndarray:
    """World point in voxel units where integer coordinates are voxel centers."""
    return (np.asarray(p, dtype=np.float64) - np.asarray(meta.origin)) / meta.voxel_size - 0.5


def project_point(cam: CameraModel, p) -> Tuple[np.ndarray, float]:
    """Pixel coordinates and Euclidean camera distance of a world point.

    ``d`` is the length of the camera-frame vector, not its z component.
    """
    pc = cam.R @ np.asarray(p, dtype=np.float64) + cam.t
    if not pc[2] > 0:
        raise BehindCameraError(f"point has camera-frame depth {pc[2]:.6g} <= 0")
    uvw = cam.K @ pc
    return uvw[:2] / pc[2], float(np.linalg.norm(pc))


def project_points(cam: CameraModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection: (uv (N, 2), distance (N,), in-front flags (N,)).

    Rows behind the camera get NaN pixel coordinates.
    """
    pc = np.asarray(points, dtype=np.float64).reshape(-1, 3) @ cam.R.T + cam.t
    front = pc[:, 2] > 0
    uvw = pc @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = uvw[:, :2] / pc[:, 2:3]
    uv[~front] = np.nan
    return uv, np.linalg.norm(pc, axis=1), front


def sample_points(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Seeded sample of ``min(n, N)`` points without replacement."""
    if n < 1:
        raise ValueError("sample count must be >= 1")
    if len(cloud) == 0:
        raise ValueError("cannot sample from an empty point cloud")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(cloud), size=min(n, len(cloud)), replace=False)
    return PointCloud(cloud.points[pick])
