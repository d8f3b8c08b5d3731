"""Core sample types, label derivation and count statistics.

A labeled sample bundles an RGB patch with three aligned label channels:
an integer instance map, a cell-type semantic mask and a distance map that
encodes, per pixel, the Chebyshev distance to the nearest pixel outside its
instance, normalized so every instance peaks at 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

STAIN_HE = 0
STAIN_NISSL = 1
STAIN_NAMES = ("HE", "Nissl")

DOWNSCALE_FACTOR = 4  # encoder reduces H and W by this factor


class DataModelError(ValueError):
    """Raised when a sample or manifest violates its structural contract."""


@dataclass
class LabeledSample:
    """One image patch with exact segmentation labels.

    image:   (H, W, 3) float32 in [0, 1]
    instances: (H, W) int32, 0 = background, k > 0 = instance id
    types:   (H, W) int32, 0 = background, 1..C = cell class
    dmap:    (H, W) float32 in [0, 1]
    stain:   STAIN_HE or STAIN_NISSL
    tissue:  tissue index into the schema's tissue list
    per_class_counts: (C,) int64, instances per class
    """

    image: np.ndarray
    instances: np.ndarray
    types: np.ndarray
    dmap: np.ndarray
    stain: int
    tissue: int
    per_class_counts: np.ndarray

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def validate_sample(sample: LabeledSample, n_classes: int | None = None) -> None:
    """Check every structural invariant of a LabeledSample; raise on violation."""
    img = sample.image
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataModelError(f"image must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    if h % DOWNSCALE_FACTOR or w % DOWNSCALE_FACTOR:
        raise DataModelError(f"H and W must be divisible by {DOWNSCALE_FACTOR}, got {h}x{w}")
    if not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0:
        raise DataModelError("image values must be finite and within [0, 1]")
    for name in ("instances", "types", "dmap"):
        arr = getattr(sample, name)
        if arr.shape != (h, w):
            raise DataModelError(f"{name} shape {arr.shape} does not match image {h}x{w}")
    if sample.instances.min() < 0:
        raise DataModelError("instance ids must be non-negative")
    if sample.types.min() < 0:
        raise DataModelError("type classes must be non-negative")
    if n_classes is not None and sample.types.max() > n_classes:
        raise DataModelError(f"type class {sample.types.max()} out of range 1..{n_classes}")
    bg_mismatch = (sample.instances == 0) != (sample.types == 0)
    if bg_mismatch.any():
        raise DataModelError("types background must coincide with instances background")
    if not np.isfinite(sample.dmap).all() or sample.dmap.min() < 0.0 or sample.dmap.max() > 1.0:
        raise DataModelError("dmap values must be finite and within [0, 1]")
    if (sample.dmap[sample.instances == 0] != 0.0).any():
        raise DataModelError("dmap must be 0 on background")
    if sample.stain not in (STAIN_HE, STAIN_NISSL):
        raise DataModelError(f"stain must be 0 (HE) or 1 (Nissl), got {sample.stain}")
    if n_classes is not None and len(sample.per_class_counts) != n_classes:
        raise DataModelError("per_class_counts length does not match the class list")


def instance_ids(instances: np.ndarray) -> np.ndarray:
    """Sorted positive instance ids present in the map."""
    ids = np.unique(instances)
    return ids[ids > 0]


def derive_distance_map(instances: np.ndarray) -> np.ndarray:
    """Per-instance boundary distance map, normalized to max 1 per instance.

    For a pixel p in instance k, the value is the Chebyshev (chessboard)
    distance from p to the nearest pixel outside k, divided by the maximum of
    that distance within k. Background pixels are 0. Pixels beyond the image
    border count as "outside", so instances touching the border behave as if
    the map were padded with one row of background.
    """
    dmap = np.zeros(instances.shape, dtype=np.float32)
    objects = ndimage.find_objects(instances)
    for idx, sl in enumerate(objects):
        if sl is None:
            continue
        k = idx + 1
        mask = instances[sl] == k
        # pad so the transform sees an "outside" ring on every side
        padded = np.pad(mask, 1)
        dist = ndimage.distance_transform_cdt(padded, metric="chessboard")
        dist = dist[1:-1, 1:-1].astype(np.float32)
        peak = dist.max()
        if peak > 0:
            dmap[sl][mask] = dist[mask] / peak
    return dmap


def derive_type_mask(
    instances: np.ndarray, per_instance_class: Mapping[int, int]
) -> np.ndarray:
    """Paint each instance's pixels with its class; background stays 0."""
    ids = instance_ids(instances)
    missing = [int(k) for k in ids if int(k) not in per_instance_class]
    if missing:
        raise DataModelError(f"no class given for instance ids {missing}")
    if len(ids) == 0:
        return np.zeros(instances.shape, dtype=np.int32)
    lut = np.zeros(int(ids.max()) + 1, dtype=np.int32)
    for k in ids:
        lut[int(k)] = int(per_instance_class[int(k)])
    return lut[instances]


def recount_per_class(
    instances: np.ndarray, types: np.ndarray, n_classes: int
) -> np.ndarray:
    """Count instances per majority class, straight from the label maps.

    Each instance votes with its pixel classes; the majority class (smallest
    class id on ties, background excluded) receives one count.
    """
    counts = np.zeros(n_classes, dtype=np.int64)
    ids = instance_ids(instances)
    if len(ids) == 0:
        return counts
    max_id = int(ids.max())
    # joint histogram over (instance id, class id)
    joint = np.zeros((max_id + 1, n_classes + 1), dtype=np.int64)
    inst_flat = instances.ravel().astype(np.int64)
    flat = inst_flat * (n_classes + 1) + types.ravel().astype(np.int64)
    np.add.at(joint.ravel(), flat[inst_flat > 0], 1)
    for k in ids:
        votes = joint[int(k), 1:]  # background excluded
        counts[int(np.argmax(votes))] += 1
    return counts


@dataclass
class NormalizationStats:
    """Per-class count statistics over a training set.

    n_max is the maximum count observed in any single patch; mean/std are the
    per-patch population statistics. Classes that never occur keep n_max = 0
    and are flagged in `absent`; normalization then divides by max(n_max, 1).
    """

    n_max: np.ndarray  # (C,) int64
    mean: np.ndarray  # (C,) float64
    std: np.ndarray  # (C,) float64, population (divide by N)
    absent: np.ndarray = field(default=None)  # (C,) bool

    def __post_init__(self):
        if self.absent is None:
            self.absent = np.asarray(self.n_max) == 0

    @property
    def n_classes(self) -> int:
        return len(self.n_max)

    def norm_divisor(self) -> np.ndarray:
        """Per-class divisor for count normalization: max(n_max, 1)."""
        return np.maximum(np.asarray(self.n_max, dtype=np.float64), 1.0)

    def to_dict(self) -> dict:
        return {
            "n_max": [int(v) for v in self.n_max],
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "absent": [bool(v) for v in self.absent],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            n_max=np.asarray(d["n_max"], dtype=np.int64),
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            absent=np.asarray(d["absent"], dtype=bool),
        )


def compute_normalization_stats(counts: Sequence[np.ndarray] | np.ndarray) -> NormalizationStats:
    """Aggregate per-patch class counts into NormalizationStats.

    `counts` is an (N, C) array (or sequence of length-C rows), one row per
    training patch.
    """
    mat = np.asarray(counts, dtype=np.int64)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise DataModelError("need a nonempty (N, C) count matrix")
    return NormalizationStats(
        n_max=mat.max(axis=0),
        mean=mat.mean(axis=0, dtype=np.float64),
        std=mat.std(axis=0, dtype=np.float64),  # population std
    )
