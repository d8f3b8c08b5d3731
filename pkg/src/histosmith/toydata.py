"""Procedural toy-histology generator with exact ground truth.

Cells are non-overlapping elliptical blobs. Radius and color depend on the
class, layout density on the tissue, and the palette on the stain, so every
conditioning factor of the generative model has a visible counterpart. All
label channels are exact by construction, which makes the generated datasets
usable as oracles for post-processing and metric tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import (
    STAIN_HE,
    STAIN_NISSL,
    DOWNSCALE_FACTOR,
    LabeledSample,
    derive_distance_map,
    derive_type_mask,
)


class ToyPackingError(RuntimeError):
    """Requested cell density cannot be packed without overlaps."""


@dataclass(frozen=True)
class ToyClassSpec:
    name: str
    radius: tuple[float, float]  # major-axis radius range, pixels
    count_range: tuple[int, int]  # inclusive, before tissue density scaling
    color_he: tuple[float, float, float]
    color_nissl: tuple[float, float, float]


@dataclass(frozen=True)
class ToyTissueSpec:
    name: str
    density: float  # multiplies class count ranges
    stain: int


@dataclass(frozen=True)
class ToySchema:
    """Appearance and layout parameters for the toy generator."""

    classes: tuple[ToyClassSpec, ...] = (
        ToyClassSpec("alpha", (2.0, 3.2), (2, 12), (0.29, 0.21, 0.56), (0.36, 0.24, 0.52)),
        ToyClassSpec("beta", (3.2, 4.6), (1, 6), (0.63, 0.19, 0.44), (0.56, 0.38, 0.66)),
        ToyClassSpec("gamma", (5.0, 6.5), (0, 4), (0.20, 0.43, 0.52), (0.28, 0.17, 0.40)),
    )
    tissues: tuple[ToyTissueSpec, ...] = (
        ToyTissueSpec("dense", 1.0, STAIN_HE),
        ToyTissueSpec("sparse", 0.5, STAIN_NISSL),
    )
    background_he: tuple[float, float, float] = (0.93, 0.81, 0.87)
    background_nissl: tuple[float, float, float] = (0.95, 0.93, 0.88)
    noise_sigma: float = 0.015
    min_gap: float = 3.0  # center separation beyond radius sum; keeps blobs 8-disconnected
    border_margin: float = 2.0
    max_place_attempts: int = 500

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    @property
    def tissue_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tissues)

    def validate(self) -> None:
        if len(self.classes) < 2 or len(self.tissues) < 2:
            raise ValueError("toy schema needs at least 2 classes and 2 tissues")
        if len(set(self.class_names)) != len(self.classes):
            raise ValueError("duplicate class names")
        if len(set(self.tissue_names)) != len(self.tissues):
            raise ValueError("duplicate tissue names")


@dataclass
class _Blob:
    cls: int  # 1-based class id
    cy: float
    cx: float
    a: float  # semi-axis along the rotated y'
    b: float
    angle: float

    @property
    def bound(self) -> float:
        return max(self.a, self.b)


def _draw_counts(rng: np.random.Generator, schema: ToySchema, tissue: ToyTissueSpec) -> np.ndarray:
    counts = np.zeros(len(schema.classes), dtype=np.int64)
    while True:
        for ci, spec in enumerate(schema.classes):
            lo = int(round(spec.count_range[0] * tissue.density))
            hi = max(lo, int(round(spec.count_range[1] * tissue.density)))
            counts[ci] = rng.integers(lo, hi + 1)
        if counts.sum() >= 1:
            return counts


def _place_blobs(
    rng: np.random.Generator, schema: ToySchema, counts: np.ndarray, size: int
) -> list[_Blob]:
    blobs: list[_Blob] = []
    # larger classes first for easier packing; instance ids follow this order
    order = sorted(range(len(schema.classes)), key=lambda ci: -schema.classes[ci].radius[1])
    for ci in order:
        spec = schema.classes[ci]
        for _ in range(int(counts[ci])):
            r = rng.uniform(*spec.radius)
            ratio = rng.uniform(0.75, 1.0)
            angle = rng.uniform(0.0, math.pi)
            lo = r + schema.border_margin
            hi = size - 1 - r - schema.border_margin
            if hi <= lo:
                raise ToyPackingError(f"patch size {size} too small for radius {r:.1f}")
            placed = False
            for _attempt in range(schema.max_place_attempts):
                cy = rng.uniform(lo, hi)
                cx = rng.uniform(lo, hi)
                ok = True
                for other in blobs:
                    min_d = r + other.bound + schema.min_gap
                    if (cy - other.cy) ** 2 + (cx - other.cx) ** 2 < min_d**2:
                        ok = False
                        break
                if ok:
                    blobs.append(_Blob(ci + 1, cy, cx, r, r * ratio, angle))
                    placed = True
                    break
            if not placed:
                raise ToyPackingError(
                    f"could not place cell of class '{spec.name}' after "
                    f"{schema.max_place_attempts} attempts (density too high)"
                )
    return blobs


def _rasterize(blobs: list[_Blob], size: int) -> tuple[np.ndarray, np.ndarray, dict[int, int]]:
    """Instance map, per-pixel elliptical coordinate t in [0,1], and id->class."""
    instances = np.zeros((size, size), dtype=np.int32)
    tcoord = np.zeros((size, size), dtype=np.float32)
    classes: dict[int, int] = {}
    yy, xx = np.mgrid[0:size, 0:size]
    for k, blob in enumerate(blobs, start=1):
        dy = yy - blob.cy
        dx = xx - blob.cx
        c, s = math.cos(blob.angle), math.sin(blob.angle)
        u = dy * c + dx * s
        v = -dy * s + dx * c
        t2 = (u / blob.a) ** 2 + (v / blob.b) ** 2
        mask = t2 <= 1.0
        if not mask.any():
            raise ToyPackingError("degenerate blob rasterized to zero pixels")
        instances[mask] = k
        tcoord[mask] = np.sqrt(t2[mask], dtype=np.float32)
        classes[k] = blob.cls
    return instances, tcoord, classes


def _paint_image(
    rng: np.random.Generator,
    schema: ToySchema,
    tissue: ToyTissueSpec,
    instances: np.ndarray,
    tcoord: np.ndarray,
    classes: dict[int, int],
) -> np.ndarray:
    size = instances.shape[0]
    he = tissue.stain == STAIN_HE
    bg = schema.background_he if he else schema.background_nissl
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = np.asarray(bg, dtype=np.float32)
    for k, cls in classes.items():
        spec = schema.classes[cls - 1]
        color = np.asarray(spec.color_he if he else spec.color_nissl, dtype=np.float32)
        mask = instances == k
        shade = (0.72 + 0.38 * tcoord[mask])[:, None]  # darker core, lighter rim
        img[mask] = color[None, :] * shade
    img += rng.normal(0.0, schema.noise_sigma, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0, out=img)


def generate_toy_sample(
    rng: np.random.Generator, schema: ToySchema, size: int, tissue_idx: int
) -> LabeledSample:
    """Generate one sample for a fixed tissue from an explicit RNG stream."""
    tissue = schema.tissues[tissue_idx]
    counts = _draw_counts(rng, schema, tissue)
    blobs = _place_blobs(rng, schema, counts, size)
    instances, tcoord, classes = _rasterize(blobs, size)
    image = _paint_image(rng, schema, tissue, instances, tcoord, classes)
    per_class = np.zeros(len(schema.classes), dtype=np.int64)
    for cls in classes.values():
        per_class[cls - 1] += 1
    return LabeledSample(
        image=image,
        instances=instances,
        types=derive_type_mask(instances, classes),
        dmap=derive_distance_map(instances),
        stain=tissue.stain,
        tissue=tissue_idx,
        per_class_counts=per_class,
    )


def generate_toy_dataset(
    seed: int, n_samples: int, size: int = 64, schema: ToySchema | None = None
) -> list[LabeledSample]:
    """Deterministic toy dataset; pure function of (seed, n_samples, size, schema).

    Tissues alternate round-robin so every tissue (and both stains) appears.
    """
    schema = schema or ToySchema()
    schema.validate()
    if size % DOWNSCALE_FACTOR:
        raise ValueError(f"size must be divisible by {DOWNSCALE_FACTOR}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    return [
        generate_toy_sample(rng, schema, size, i % len(schema.tissues))
        for i in range(n_samples)
    ]
