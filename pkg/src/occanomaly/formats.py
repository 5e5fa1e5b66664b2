"""On-disk formats. All multi-byte values are little-endian.

Volume container (60-byte header, then the payload)::

    0   8s   magic b"OCCOODV1"
    8   u32  dtype code (1 u16 labels, 2 f32 scores, 3 f32 logits, 4 u8 mask)
    12  u32  X
    16  u32  Y
    20  u32  Z
    24  u32  K (class count for logits, 1 otherwise)
    28  f64  voxel_size
    36  f64  origin x, y, z

Payloads are flattened x-fastest (``i + X * (j + Y * k)``); logits are
class-major, one full volume per class.

Depth rasters are either PFM (``Pf``) or ``u32 width, u32 height`` followed by
row-major f32 values. Masks are binary PGM (P5, maxval 255). Calibration files
use KITTI-style ``key: values`` lines.
"""

from __future__ import annotations

import logging
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .geometry import ANOMALY_CLASS, FREE_CLASS, CameraModel, GridMeta, LabelGrid, LogitVolume, PointCloud, ScoreVolume
from .pipeline import AnomalyMask2D, DepthMap

logger = logging.getLogger(__name__)

MAGIC = b"OCCOODV1"
HEADER = struct.Struct("<8s5I4d")
DTYPE_LABELS, DTYPE_SCORES, DTYPE_LOGITS, DTYPE_MASK = 1, 2, 3, 4
DTYPES = {
    DTYPE_LABELS: np.dtype("<u2"),
    DTYPE_SCORES: np.dtype("<f4"),
    DTYPE_LOGITS: np.dtype("<f4"),
    DTYPE_MASK: np.dtype("u1"),
}
DEFAULT_MAX_BYTES = 16 << 30


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


class SizeMismatchError(FormatError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class DtypeMismatchError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


@dataclass(frozen=True)
class VolumeHeader:
    dtype_code: int
    meta: GridMeta
    num_classes: int = 1

    @property
    def payload_bytes(self) -> int:
        return self.meta.num_voxels * self.num_classes * DTYPES[self.dtype_code].itemsize

    def pack(self) -> bytes:
        X, Y, Z = self.meta.dims
        return HEADER.pack(MAGIC, self.dtype_code, X, Y, Z, self.num_classes, self.meta.voxel_size, *self.meta.origin)


def _read_header(path, raw: bytes, max_bytes: int) -> VolumeHeader:
    if len(raw) < HEADER.size or raw[:8] != MAGIC:
        raise BadMagicError(f"{path}: missing OCCOODV1 magic")
    _, code, X, Y, Z, K, vs, ox, oy, oz = HEADER.unpack_from(raw)
    if code not in DTYPES:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    expected = X * Y * Z * K * DTYPES[code].itemsize
    if expected > max_bytes:
        raise FormatError(f"{path}: header claims {expected} payload bytes, above the {max_bytes} byte cap")
    try:
        meta = GridMeta((X, Y, Z), vs, (ox, oy, oz))
    except ValueError as exc:
        raise FormatError(f"{path}: invalid grid header: {exc}") from None
    if K < 1:
        raise FormatError(f"{path}: class count must be >= 1")
    return VolumeHeader(code, meta, K)


def _load(path, expect_code: int, max_bytes: int) -> Tuple[VolumeHeader, np.ndarray]:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        header = _read_header(path, head, max_bytes)
        if header.dtype_code != expect_code:
            raise DtypeMismatchError(f"{path}: dtype code {header.dtype_code}, expected {expect_code}")
        expected = HEADER.size + header.payload_bytes
        if size != expected:
            raise SizeMismatchError(path, expected, size)
        payload = np.fromfile(fh, dtype=DTYPES[expect_code])
    return header, payload


def _write(path, header: VolumeHeader, payload: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.pack())
        fh.write(np.ascontiguousarray(payload, dtype=DTYPES[header.dtype_code]).tobytes())


def _f_flat(arr: np.ndarray) -> np.ndarray:
    return arr.ravel(order="F")


def read_label_grid(
    path,
    fallback_meta: Optional[GridMeta] = None,
    free_class: int = FREE_CLASS,
    anomaly_class: int = ANOMALY_CLASS,
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> LabelGrid:
    """Read a headered label volume, or a raw u16 benchmark file given ``fallback_meta``."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic != MAGIC and fallback_meta is not None:
        expected = fallback_meta.num_voxels * 2
        size = path.stat().st_size
        if size != expected:
            raise SizeMismatchError(path, expected, size)
        labels = np.fromfile(path, dtype="<u2")
        return LabelGrid(fallback_meta, labels, free_class, anomaly_class)
    header, payload = _load(path, DTYPE_LABELS, max_bytes)
    return LabelGrid(header.meta, payload, free_class, anomaly_class)


def write_label_grid(grid: LabelGrid, path, raw: bool = False) -> None:
    if raw:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        _f_flat(grid.labels).astype("<u2").tofile(path)
        return
    _write(path, VolumeHeader(DTYPE_LABELS, grid.meta), _f_flat(grid.labels))


def read_logit_volume(path, max_bytes: int = DEFAULT_MAX_BYTES) -> LogitVolume:
    header, payload = _load(path, DTYPE_LOGITS, max_bytes)
    if header.num_classes < 2:
        raise FormatError(f"{path}: logit volume needs at least two classes")
    if not np.all(np.isfinite(payload)):
        raise NonFiniteError(f"{path}: logit payload contains non-finite values")
    X, Y, Z = header.meta.dims
    values = payload.reshape(header.num_classes, Z, Y, X).transpose(0, 3, 2, 1)
    return LogitVolume(header.meta, values)


def write_logit_volume(vol: LogitVolume, path) -> None:
    values = np.asarray(vol.values, dtype="<f4").transpose(0, 3, 2, 1)
    _write(path, VolumeHeader(DTYPE_LOGITS, vol.meta, vol.num_classes), values.ravel(order="C"))


def read_score_volume(path, max_bytes: int = DEFAULT_MAX_BYTES) -> ScoreVolume:
    header, payload = _load(path, DTYPE_SCORES, max_bytes)
    if not np.all(np.isfinite(payload)):
        raise NonFiniteError(f"{path}: score payload contains non-finite values")
    return ScoreVolume(header.meta, payload)


def write_score_volume(vol: ScoreVolume, path) -> None:
    scores = np.asarray(vol.scores)
    if not np.all(np.isfinite(scores)):
        raise NonFiniteError("refusing to write non-finite scores")
    _write(path, VolumeHeader(DTYPE_SCORES, vol.meta), _f_flat(scores))


def read_voxel_mask(path, fallback_meta: Optional[GridMeta] = None, max_bytes: int = DEFAULT_MAX_BYTES) -> Tuple[GridMeta, np.ndarray]:
    """Boolean volume from a headered u8 mask or a raw one-byte-per-voxel file."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic != MAGIC and fallback_meta is not None:
        size = path.stat().st_size
        if size != fallback_meta.num_voxels:
            raise SizeMismatchError(path, fallback_meta.num_voxels, size)
        payload = np.fromfile(path, dtype="u1")
        return fallback_meta, payload.reshape(fallback_meta.dims, order="F") != 0
    header, payload = _load(path, DTYPE_MASK, max_bytes)
    return header.meta, payload.reshape(header.meta.dims, order="F") != 0


def write_voxel_mask(mask: np.ndarray, meta: GridMeta, path) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != meta.dims:
        raise ValueError(f"mask shape {mask.shape} != grid dims {meta.dims}")
    _write(path, VolumeHeader(DTYPE_MASK, meta), _f_flat(mask).astype("u1"))


# depth rasters

def read_depth_raster(path, kind: str = "pseudo") -> DepthMap:
    """PFM or width/height-headered f32 raster; non-finite or <= 0 pixels are invalid."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"Pf":
        return _read_pfm(path, data, kind)
    if len(data) < 8:
        raise FormatError(f"{path}: depth raster too short for its header")
    w, h = struct.unpack_from("<2I", data)
    if w < 1 or h < 1:
        raise FormatError(f"{path}: depth raster has zero size")
    expected = 8 + 4 * w * h
    if len(data) != expected:
        raise SizeMismatchError(path, expected, len(data))
    values = np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64)
    return DepthMap(w, h, values, kind)


def write_depth_raster(depth: DepthMap, path, pfm: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vals = np.asarray(depth.values, dtype="<f4")
    if pfm:
        with open(path, "wb") as fh:
            fh.write(f"Pf\n{depth.width} {depth.height}\n-1.0\n".encode("ascii"))
            fh.write(np.ascontiguousarray(vals[::-1]).tobytes())
        return
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2I", depth.width, depth.height))
        fh.write(np.ascontiguousarray(vals).tobytes())


_PFM_HEADER = re.compile(rb"^Pf\s+(\d+)\s+(\d+)\s+(\S+)\s")


def _read_pfm(path, data: bytes, kind: str) -> DepthMap:
    m = _PFM_HEADER.match(data)
    if not m:
        raise FormatError(f"{path}: malformed PFM header")
    w, h, scale = int(m.group(1)), int(m.group(2)), float(m.group(3))
    dtype = "<f4" if scale < 0 else ">f4"
    offset = m.end()
    expected = offset + 4 * w * h
    if len(data) != expected:
        raise SizeMismatchError(path, expected, len(data))
    # PFM rows run bottom to top
    vals = np.frombuffer(data, dtype=dtype, offset=offset).reshape(h, w)[::-1]
    return DepthMap(w, h, vals.astype(np.float64), kind)


# masks

def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_mask(path) -> AnomalyMask2D:
    path = Path(path)
    data = path.read_bytes()
    try:
        tokens, offset = _pgm_tokens(data, 4)
    except (FormatError, IndexError):
        raise FormatError(f"{path}: malformed PGM header") from None
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: expected binary PGM (P5), got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: PGM maxval must be 255, got {maxval}")
    expected = offset + w * h
    if len(data) != expected:
        raise SizeMismatchError(path, expected, len(data))
    return AnomalyMask2D(w, h, np.frombuffer(data, dtype="u1", offset=offset))


def write_mask(mask: AnomalyMask2D, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii"))
        fh.write(np.where(mask.mask, 255, 0).astype("u1").tobytes())


# calibration

def read_calib(path, image_size: Optional[Tuple[int, int]] = None, projection_key: str = "P2") -> CameraModel:
    """Camera from KITTI-style calibration lines.

    Needs a 3x4 projection (``projection_key``, else ``P``/``P0``) and a
    world-to-camera extrinsic ``Tr`` (12 or 16 values). An ``image_size: W H``
    line overrides the ``image_size`` argument. The projection's fourth column
    is folded into the translation.
    """
    path = Path(path)
    rows = {}
    for line in path.read_text().splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            rows[key.strip()] = [float(v) for v in rest.split()]
        except ValueError:
            raise FormatError(f"{path}: non-numeric values on line {key.strip()!r}") from None
    proj = next((rows[k] for k in (projection_key, "P", "P0") if k in rows), None)
    if proj is None or len(proj) != 12:
        raise FormatError(f"{path}: no 12-value projection line ({projection_key})")
    tr = rows.get("Tr", rows.get("Tr_velo_to_cam"))
    if tr is None or len(tr) not in (12, 16):
        raise FormatError(f"{path}: no 12- or 16-value Tr line")
    if "image_size" in rows:
        w, h = rows["image_size"]
        image_size = (int(w), int(h))
    if image_size is None:
        raise FormatError(f"{path}: image size unknown; add an image_size line or pass it in")
    P = np.array(proj).reshape(3, 4)
    T = np.array(tr).reshape(-1, 4)
    K = P[:, :3]
    R = T[:3, :3]
    t = T[:3, 3] + np.linalg.solve(K, P[:, 3])
    if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        logger.info("%s: re-orthonormalized extrinsic rotation", path)
    try:
        return CameraModel(K, R, t, image_size)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_calib(cam: CameraModel, path) -> None:
    P = np.zeros((3, 4))
    P[:, :3] = cam.K
    T = np.hstack([cam.R, cam.t[:, None]])
    fmt = lambda a: " ".join(repr(float(v)) for v in a.ravel())  # noqa: E731
    Path(path).write_text(
        f"P2: {fmt(P)}\nTr: {fmt(T)}\nimage_size: {cam.image_size[0]} {cam.image_size[1]}\n"
    )


# point clouds

def read_point_cloud(path, columns: int = 3) -> PointCloud:
    """Flat little-endian f32 points with ``columns`` values each (4 for KITTI scans)."""
    path = Path(path)
    size = path.stat().st_size
    if columns < 3 or size % (4 * columns):
        raise SizeMismatchError(path, size - size % (4 * columns), size)
    pts = np.fromfile(path, dtype="<f4").reshape(-1, columns)[:, :3]
    if not np.all(np.isfinite(pts)):
        raise NonFiniteError(f"{path}: point cloud contains non-finite coordinates")
    return PointCloud(pts.astype(np.float64))


def write_point_cloud(cloud: PointCloud, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.asarray(cloud.points, dtype="<f4").tofile(path)


def ensure_exists(*paths) -> None:
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise FileNotFoundError(p)
