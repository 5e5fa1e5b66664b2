"""Voxel anomaly scores from logit volumes.

Everything here works on ``(N, K)`` voxel-by-class blocks so large volumes can
be processed in chunks; the volume-level functions handle the chunking.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .geometry import FREE_CLASS, LabelGrid, LogitVolume, ScoreVolume

logger = logging.getLogger(__name__)

INSTANCE = "instance"
REGION = "region"
FREE = "free"

METHODS = ("semantic_aware", "entropy", "energy", "posterior")

CHUNK = 1 << 18


class PartitionError(ValueError):
    def __init__(self, missing):
        self.missing = sorted(int(c) for c in missing)
        super().__init__(f"class partition does not cover class ids {self.missing}")


@dataclass(frozen=True)
class ClassPartition:
    mapping: Dict[int, str]
    region_weight: float = 0.5
    names: Dict[int, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        mapping = {int(k): str(v) for k, v in self.mapping.items()}
        bad = {v for v in mapping.values()} - {INSTANCE, REGION, FREE}
        if bad:
            raise ValueError(f"unknown class groups {sorted(bad)}")
        if sum(v == FREE for v in mapping.values()) != 1:
            raise ValueError("a partition needs exactly one free class")
        if not 0 < self.region_weight <= 1:
            raise ValueError(f"region_weight must lie in (0, 1], got {self.region_weight}")
        object.__setattr__(self, "mapping", mapping)

    @property
    def free_class(self) -> int:
        return next(k for k, v in self.mapping.items() if v == FREE)

    def check_covers(self, num_classes: int) -> None:
        missing = set(range(num_classes)) - set(self.mapping)
        if missing:
            raise PartitionError(missing)

    def group_codes(self, num_classes: int) -> np.ndarray:
        """Per class id: 0 free, 1 instance, 2 region."""
        self.check_covers(num_classes)
        code = {FREE: 0, INSTANCE: 1, REGION: 2}
        return np.array([code[self.mapping[c]] for c in range(num_classes)], dtype=np.int8)

    @classmethod
    def from_dict(cls, data: dict) -> "ClassPartition":
        mapping, names = {}, {}
        for entry in data["classes"]:
            mapping[int(entry["id"])] = entry["group"]
            if "name" in entry:
                names[int(entry["id"])] = entry["name"]
        return cls(mapping, float(data.get("region_weight", 0.5)), names)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ClassPartition":
        """Read a partition config; ``None`` gives the bundled SemanticKITTI one."""
        if path is None:
            text = resources.files("occanomaly").joinpath("data/semantickitti_partition.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))


@dataclass
class ClassMeanLogits:
    means: Dict[int, np.ndarray]
    counts: Dict[int, int]

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"id": c, "count": self.counts.get(c, 0), "mean": self.means[c].tolist()}
                for c in sorted(self.means)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClassMeanLogits":
        means = {int(e["id"]): np.asarray(e["mean"], dtype=np.float64) for e in data["classes"]}
        counts = {int(e["id"]): int(e.get("count", 1)) for e in data["classes"]}
        return cls(means, counts)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    x = np.asarray(logits, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy_score(probs: np.ndarray) -> np.ndarray | float:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _logit_entropy(logits: np.ndarray) -> np.ndarray:
    # entropy straight from logits: log Z - sum p * shifted
    x = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(x)
    z = e.sum(axis=-1)
    return np.log(z) - (e * x).sum(axis=-1) / z


def energy_score(logits: np.ndarray) -> np.ndarray | float:
    """Negative log-sum-exp along the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    m = x.max(axis=-1)
    out = -(m + np.log(np.exp(x - m[..., None]).sum(axis=-1)))
    return float(out) if np.ndim(out) == 0 else out


def posterior_score(logits: np.ndarray) -> np.ndarray | float:
    """One minus the largest logit."""
    out = 1.0 - np.asarray(logits, dtype=np.float64).max(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def cosine_score(logit: np.ndarray, mean: np.ndarray) -> np.ndarray | float:
    """``1 - cos(logit, mean)`` along the last axis; zero-norm inputs score 0."""
    a = np.asarray(logit, dtype=np.float64)
    b = np.asarray(mean, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    degenerate = denom == 0
    if np.any(degenerate):
        logger.warning("cosine score on a zero-norm vector; scored as 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(degenerate, 1.0, (a * b).sum(axis=-1) / np.where(degenerate, 1.0, denom))
    out = 1.0 - np.clip(cos, -1.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def _voxel_chunks(volume: LogitVolume, chunk: int = CHUNK):
    """Yield (slice, (n, K) float64 block) in on-disk flat voxel order."""
    flat = volume.flat_by_voxel()
    n = flat.shape[0]
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        yield sl, np.asarray(flat[sl], dtype=np.float64)


def _to_grid(flat: np.ndarray, volume: LogitVolume) -> np.ndarray:
    return flat.reshape(volume.meta.dims, order="F")


def geometry_prior(volume: LogitVolume, free_class: int = FREE_CLASS) -> Tuple[LabelGrid, np.ndarray]:
    """Argmax labels (ties to the lowest class id) and the non-free mask."""
    labels = np.empty(volume.meta.num_voxels, dtype=np.uint16)
    for sl, block in _voxel_chunks(volume):
        labels[sl] = np.argmax(block, axis=1)
    grid = LabelGrid(volume.meta, _to_grid(labels, volume), free_class=free_class)
    return grid, grid.labels != free_class


def class_mean_logits(volume: LogitVolume, pred_labels: LabelGrid, occupied_mask: np.ndarray) -> ClassMeanLogits:
    K = volume.num_classes
    sums = np.zeros((K, K))
    counts = np.zeros(K, dtype=np.int64)
    labels = pred_labels.flat()
    occ = np.asarray(occupied_mask).ravel(order="F")
    for sl, block in _voxel_chunks(volume):
        sel = occ[sl]
        lab = labels[sl][sel].astype(np.int64)
        np.add.at(sums, lab, block[sel])
        counts += np.bincount(lab, minlength=K)[:K]
    present = np.nonzero(counts)[0]
    return ClassMeanLogits(
        means={int(c): sums[c] / counts[c] for c in present},
        counts={int(c): int(counts[c]) for c in present},
    )


def minmax_normalize(raw: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Min-max over ``active`` entries; inactive entries and degenerate ranges give 0."""
    out = np.zeros(raw.shape, dtype=np.float64)
    if not np.any(active):
        return out
    vals = raw[active]
    lo, hi = vals.min(), vals.max()
    if hi > lo:
        out[active] = (vals - lo) / (hi - lo)
    return out


def _finish(volume: LogitVolume, raw: np.ndarray, active: np.ndarray, diag: dict) -> ScoreVolume:
    scores = minmax_normalize(raw, active)
    diag["active_voxels"] = int(active.sum())
    return ScoreVolume(volume.meta, _to_grid(scores, volume), diag)


def semantic_aware_score(
    volume: LogitVolume,
    partition: ClassPartition,
    class_means: ClassMeanLogits | None = None,
) -> ScoreVolume:
    """Cosine deviation for instance classes, weighted entropy for region classes.

    Class means come from the frame's own occupied voxels unless supplied.
    Free-predicted voxels score 0.
    """
    K = volume.num_classes
    groups = partition.group_codes(K)
    free = partition.free_class
    pred, occupied = geometry_prior(volume, free)
    diag: dict = {"method": "semantic_aware"}
    if not occupied.any():
        logger.warning("no occupied voxels; returning an all-zero score volume")
        diag["empty"] = True
        return ScoreVolume(volume.meta, np.zeros(volume.meta.dims), diag)
    if class_means is None:
        class_means = class_mean_logits(volume, pred, occupied)
    mean_mat = np.zeros((K, K))
    has_mean = np.zeros(K, dtype=bool)
    for c, m in class_means.means.items():
        if c < K:
            mean_mat[c] = m
            has_mean[c] = True

    labels = pred.flat()
    occ = occupied.ravel(order="F")
    raw = np.zeros(volume.meta.num_voxels)
    fallback = 0
    for sl, block in _voxel_chunks(volume):
        lab = labels[sl].astype(np.int64)
        grp = groups[lab]
        use_cos = (grp == 1) & has_mean[lab] & occ[sl]
        fallback += int(((grp == 1) & ~has_mean[lab] & occ[sl]).sum())
        ent = _logit_entropy(block)
        vals = np.where(grp == 2, partition.region_weight * ent, ent)
        if use_cos.any():
            vals[use_cos] = cosine_score(block[use_cos], mean_mat[lab[use_cos]])
        raw[sl] = vals
    if fallback:
        logger.warning("%d instance voxels lack a class mean; scored by entropy", fallback)
        diag["mean_fallback_voxels"] = fallback
    return _finish(volume, raw, occ, diag)


def baseline_score_volume(volume: LogitVolume, method: str, use_geometry_prior: bool = True, free_class: int = FREE_CLASS) -> ScoreVolume:
    """Entropy, energy or posterior scores, min-max normalized.

    With the geometry prior, normalization runs over non-free voxels and free
    voxels score 0; without it every voxel takes part.
    """
    fn = {"entropy": _logit_entropy, "energy": energy_score, "posterior": posterior_score}.get(method)
    if fn is None:
        raise ValueError(f"unknown baseline method {method!r}")
    raw = np.empty(volume.meta.num_voxels)
    active = np.ones(volume.meta.num_voxels, dtype=bool)
    for sl, block in _voxel_chunks(volume):
        raw[sl] = fn(block)
        if use_geometry_prior:
            active[sl] = np.argmax(block, axis=1) != free_class
    diag = {"method": method, "geometry_prior": bool(use_geometry_prior)}
    return _finish(volume, raw, active, diag)


def score_volume(
    volume: LogitVolume,
    method: str,
    partition: ClassPartition | None = None,
    use_geometry_prior: bool = True,
    class_means: ClassMeanLogits | None = None,
) -> ScoreVolume:
    if method == "semantic_aware":
        partition = partition or ClassPartition.load()
        return semantic_aware_score(volume, partition, class_means)
    free = partition.free_class if partition is not None else FREE_CLASS
    return baseline_score_volume(volume, method, use_geometry_prior, free)
