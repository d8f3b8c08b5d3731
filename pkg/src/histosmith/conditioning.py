"""Conditioning vectors: stain flag, normalized class counts, tissue one-hot.

Layout of a vector of length 1 + C + T:
  [0]          stain, 0 = HE, 1 = Nissl
  [1 .. C]     per-class counts divided by the training-set per-patch maximum
  [C+1 .. C+T] one-hot tissue encoding
Count slots may exceed 1 when extrapolating beyond the training range.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import STAIN_HE, STAIN_NISSL, NormalizationStats

COUNT_WARN_LIMIT = 2.0
COUNT_ERROR_LIMIT = 5.0


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class ConditioningSchema:
    count_class_names: tuple[str, ...] = (
        "neutrophils",
        "epithelial",
        "eosinophils",
        "other",
        "neuron/glia",
    )
    tissue_names: tuple[str, ...] = (
        "colon",
        "auditory cortex",
        "cerebellum",
        "hippocampus",
    )

    def __post_init__(self):
        for label, names in (("class", self.count_class_names), ("tissue", self.tissue_names)):
            if not names:
                raise ConditioningError(f"{label} name list is empty")
            if len(set(names)) != len(names):
                raise ConditioningError(f"duplicate {label} names: {names}")

    @property
    def n_classes(self) -> int:
        return len(self.count_class_names)

    @property
    def n_tissues(self) -> int:
        return len(self.tissue_names)

    @property
    def length(self) -> int:
        return 1 + self.n_classes + self.n_tissues

    def class_index(self, name: str) -> int:
        try:
            return self.count_class_names.index(name)
        except ValueError:
            raise ConditioningError(f"unknown class {name!r}") from None

    def tissue_index(self, tissue: str | int) -> int:
        if isinstance(tissue, str):
            try:
                return self.tissue_names.index(tissue)
            except ValueError:
                raise ConditioningError(f"unknown tissue {tissue!r}") from None
        idx = int(tissue)
        if not 0 <= idx < self.n_tissues:
            raise ConditioningError(f"tissue index {idx} out of range")
        return idx

    def to_dict(self) -> dict:
        return {
            "count_class_names": list(self.count_class_names),
            "tissue_names": list(self.tissue_names),
            "length": self.length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditioningSchema":
        schema = cls(
            count_class_names=tuple(d["count_class_names"]),
            tissue_names=tuple(d["tissue_names"]),
        )
        if "length" in d and int(d["length"]) != schema.length:
            raise ConditioningError("schema length field disagrees with name lists")
        return schema


def build_vector(
    stain: int,
    raw_counts: Sequence[int],
    tissue: str | int,
    stats: NormalizationStats,
    schema: ConditioningSchema,
) -> np.ndarray:
    """Assemble one conditioning vector from raw per-class counts."""
    if stain not in (STAIN_HE, STAIN_NISSL):
        raise ConditioningError(f"stain must be 0 (HE) or 1 (Nissl), got {stain}")
    counts = np.asarray(raw_counts, dtype=np.float64)
    if counts.shape != (schema.n_classes,):
        raise ConditioningError(
            f"expected {schema.n_classes} counts, got shape {counts.shape}"
        )
    if (counts < 0).any():
        raise ConditioningError("counts must be non-negative")
    vec = np.zeros(schema.length, dtype=np.float64)
    vec[0] = float(stain)
    vec[1 : 1 + schema.n_classes] = counts / stats.norm_divisor()
    vec[1 + schema.n_classes + schema.tissue_index(tissue)] = 1.0
    return vec


def validate_vector(vec: np.ndarray, schema: ConditioningSchema) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (schema.length,):
        raise ConditioningError(f"expected length {schema.length}, got {vec.shape}")
    if not np.isfinite(vec).all():
        raise ConditioningError("conditioning vector has non-finite entries")
    if vec[0] not in (0.0, 1.0):
        raise ConditioningError(f"stain slot must be 0 or 1, got {vec[0]}")
    counts = vec[1 : 1 + schema.n_classes]
    if (counts < 0).any():
        raise ConditioningError("count slots must be non-negative")
    if (counts > COUNT_ERROR_LIMIT).any():
        raise ConditioningError(
            f"normalized count above {COUNT_ERROR_LIMIT}: {counts.max():.3f}"
        )
    if (counts > COUNT_WARN_LIMIT).any():
        warnings.warn(
            f"normalized count above {COUNT_WARN_LIMIT}: {counts.max():.3f}",
            stacklevel=2,
        )
    onehot = vec[1 + schema.n_classes :]
    if not (np.isin(onehot, (0.0, 1.0)).all() and onehot.sum() == 1.0):
        raise ConditioningError(f"tissue slice must be one-hot, got {onehot}")


def vector_stain(vec: np.ndarray) -> int:
    return int(vec[0])


def vector_counts(vec: np.ndarray, schema: ConditioningSchema) -> np.ndarray:
    return np.asarray(vec[1 : 1 + schema.n_classes], dtype=np.float64)


def vector_tissue_index(vec: np.ndarray, schema: ConditioningSchema) -> int:
    onehot = np.asarray(vec[1 + schema.n_classes :])
    return int(np.argmax(onehot))


def denormalize_counts(
    vec: np.ndarray, stats: NormalizationStats, schema: ConditioningSchema
) -> np.ndarray:
    """Invert the count normalization; exact for integer-count inputs."""
    return vector_counts(vec, schema) * stats.norm_divisor()


@dataclass
class AugmentationPolicy:
    """Gaussian count-sampling recipe for dataset augmentation.

    alpha maps each class name to a multiplicative factor on the training
    mean, either a fixed float or an inclusive (lo, hi) range drawn uniformly
    per sample. samples_per_tissue fixes how many vectors each tissue gets,
    stain_per_tissue its stain flag, and zero_classes pins selected class
    slots to exactly zero for a tissue.
    """

    alpha: Mapping[str, float | tuple[float, float]]
    samples_per_tissue: Mapping[str, int]
    stain_per_tissue: Mapping[str, int]
    zero_classes: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def validate(self, schema: ConditioningSchema) -> None:
        for name, value in self.alpha.items():
            schema.class_index(name)
            lo, hi = (value, value) if np.isscalar(value) else tuple(value)
            if not (0 < lo <= hi):
                raise ConditioningError(f"alpha for {name!r} must be positive, got {value}")
        for tissue, m in self.samples_per_tissue.items():
            schema.tissue_index(tissue)
            if m < 1:
                raise ConditioningError(f"samples for {tissue!r} must be >= 1, got {m}")
        for tissue, stain in self.stain_per_tissue.items():
            schema.tissue_index(tissue)
            if stain not in (STAIN_HE, STAIN_NISSL):
                raise ConditioningError(f"bad stain {stain} for tissue {tissue!r}")
        for tissue, names in self.zero_classes.items():
            schema.tissue_index(tissue)
            for name in names:
                schema.class_index(name)

    def draw_alpha(self, class_name: str, rng: np.random.Generator) -> float:
        value = self.alpha.get(class_name, 1.0)
        if np.isscalar(value):
            return float(value)
        lo, hi = value
        return float(rng.uniform(lo, hi))


def _truncated_normal(rng: np.random.Generator, mean: float, sd: float) -> float:
    """Normal draw truncated at 0 by resampling (no point mass at 0)."""
    if sd == 0.0:
        return max(mean, 0.0)
    for _ in range(1000):
        x = rng.normal(mean, sd)
        if x >= 0.0:
            return float(x)
    return 0.0  # unreachable for mean >= 0


def sample_augmentation_conditions(
    policy: AugmentationPolicy,
    stats: NormalizationStats,
    schema: ConditioningSchema,
    seed: int,
) -> list[np.ndarray]:
    """Deterministic list of conditioning vectors following the policy.

    Per class the normalized count is drawn from
    N(alpha * mean / n_max, (std / n_max)^2), truncated at zero.
    """
    policy.validate(schema)
    if stats.n_classes != schema.n_classes:
        raise ConditioningError("stats were computed for a different class list")
    rng = np.random.Generator(np.random.PCG64(seed))
    divisor = stats.norm_divisor()
    vectors: list[np.ndarray] = []
    for tissue in schema.tissue_names:
        if tissue not in policy.samples_per_tissue:
            continue
        m = int(policy.samples_per_tissue[tissue])
        stain = int(policy.stain_per_tissue.get(tissue, STAIN_HE))
        zeroed = set(policy.zero_classes.get(tissue, ()))
        t_idx = schema.tissue_index(tissue)
        for _ in range(m):
            vec = np.zeros(schema.length, dtype=np.float64)
            vec[0] = float(stain)
            for ci, name in enumerate(schema.count_class_names):
                if name in zeroed:
                    continue
                alpha = policy.draw_alpha(name, rng)
                mean = alpha * stats.mean[ci] / divisor[ci]
                sd = stats.std[ci] / divisor[ci]
                vec[1 + ci] = _truncated_normal(rng, mean, sd)
            vec[1 + schema.n_classes + t_idx] = 1.0
            vectors.append(vec)
    return vectors


def count_ramp(
    class_name: str,
    n_points: int,
    lo: float,
    hi: float,
    base_cond: np.ndarray,
    schema: ConditioningSchema,
) -> list[np.ndarray]:
    """Evenly spaced normalized-count values substituted into one class slot."""
    if not lo < hi:
        raise ConditioningError(f"ramp range must satisfy lo < hi, got [{lo}, {hi}]")
    if n_points < 1:
        raise ConditioningError("n_points must be >= 1")
    slot = 1 + schema.class_index(class_name)
    base = np.asarray(base_cond, dtype=np.float64)
    if base.shape != (schema.length,):
        raise ConditioningError("base_cond does not match schema length")
    out = []
    for value in np.linspace(lo, hi, n_points):
        vec = base.copy()
        vec[slot] = value
        out.append(vec)
    return out


# ---------------------------------------------------------------------------
# JSON round-trip (the sampling CLI consumes and emits these files)
# ---------------------------------------------------------------------------

def conditions_to_json(vectors: Sequence[np.ndarray], schema: ConditioningSchema) -> str:
    doc = {
        "schema": schema.to_dict(),
        "vectors": [[float(v) for v in vec] for vec in vectors],
    }
    return json.dumps(doc, indent=2) + "\n"


def conditions_from_json(text: str) -> tuple[list[np.ndarray], ConditioningSchema]:
    doc = json.loads(text)
    schema = ConditioningSchema.from_dict(doc["schema"])
    vectors = [np.asarray(v, dtype=np.float64) for v in doc["vectors"]]
    for vec in vectors:
        validate_vector(vec, schema)
    return vectors, schema


def save_conditions(path: Path, vectors: Sequence[np.ndarray], schema: ConditioningSchema) -> None:
    Path(path).write_text(conditions_to_json(vectors, schema), encoding="utf-8")


def load_conditions(path: Path) -> tuple[list[np.ndarray], ConditioningSchema]:
    return conditions_from_json(Path(path).read_text(encoding="utf-8"))
