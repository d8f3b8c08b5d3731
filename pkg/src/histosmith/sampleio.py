"""Dataset serialization: PNG rasters, raw float maps and the JSON manifest.

Directory layout per sample (all files share a basename stem):
  {stem}_image.png      8-bit RGB
  {stem}_instances.png  16-bit grayscale, instance ids
  {stem}_types.png      8-bit grayscale, class ids
  {stem}_dmap.raw       float32 little-endian row-major
  {stem}_dmap.json      sidecar {"width": W, "height": H, "channels": 1}
One manifest.json at the dataset root lists every sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .datamodel import LabeledSample, compute_normalization_stats, recount_per_class
from .datamodel import NormalizationStats

MANIFEST_NAME = "manifest.json"


class DatasetIOError(IOError):
    """Raised on malformed, truncated or inconsistent dataset files."""


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to the 8-bit grid; serialization is exact afterwards."""
    return (np.round(image * 255.0) / np.float32(255.0)).astype(np.float32)


# ---------------------------------------------------------------------------
# raster primitives
# ---------------------------------------------------------------------------

def write_float_raster(path: Path, values: np.ndarray) -> None:
    """Raw little-endian float32 with a JSON sidecar describing the shape."""
    path = Path(path)
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise DatasetIOError(f"float raster must be 2-D, got shape {arr.shape}")
    path.write_bytes(arr.tobytes())
    meta = {"width": int(arr.shape[1]), "height": int(arr.shape[0]), "channels": 1}
    path.with_suffix(".json").write_text(json.dumps(meta), encoding="utf-8")


def read_float_raster(path: Path) -> np.ndarray:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise DatasetIOError(f"missing sidecar {sidecar}")
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        w, h, c = int(meta["width"]), int(meta["height"]), int(meta["channels"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetIOError(f"malformed sidecar {sidecar}: {exc}") from exc
    if c != 1:
        raise DatasetIOError(f"expected 1 channel, sidecar says {c}")
    raw = path.read_bytes()
    expected = w * h * 4
    if len(raw) != expected:
        raise DatasetIOError(
            f"{path}: expected {expected} bytes for {w}x{h} float32, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()


def write_feature_file(path: Path, features: np.ndarray) -> None:
    """(N, d) float32 feature matrix in the raw format with an {n, d} sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise DatasetIOError("feature matrix must be 2-D")
    path.write_bytes(arr.tobytes())
    meta = {"n": int(arr.shape[0]), "d": int(arr.shape[1])}
    path.with_suffix(".json").write_text(json.dumps(meta), encoding="utf-8")


def read_feature_file(path: Path) -> np.ndarray:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise DatasetIOError(f"missing sidecar {sidecar}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    n, d = int(meta["n"]), int(meta["d"])
    raw = path.read_bytes()
    if len(raw) != n * d * 4:
        raise DatasetIOError(f"{path}: size does not match sidecar (n={n}, d={d})")
    return np.frombuffer(raw, dtype="<f4").reshape(n, d).copy()


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def _read_png(path: Path, expect_mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != expect_mode:
                raise DatasetIOError(f"{path}: expected mode {expect_mode}, got {im.mode}")
            return np.array(im)
    except (OSError, SyntaxError) as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    stem: str
    stain: int
    tissue: int
    per_class_counts: list[int] | None
    files: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stem": self.stem,
            "stain": self.stain,
            "tissue": self.tissue,
            "per_class_counts": self.per_class_counts,
            "files": self.files,
        }


@dataclass
class DatasetManifest:
    root: Path
    class_names: list[str]
    tissue_names: list[str]
    entries: list[ManifestEntry]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self) -> None:
        for name, values in (("class", self.class_names), ("tissue", self.tissue_names)):
            if not values:
                raise DatasetIOError(f"{name} name list is empty")
            if len(set(values)) != len(values):
                raise DatasetIOError(f"duplicate {name} names: {values}")
        for entry in self.entries:
            for channel, fname in entry.files.items():
                if not (self.root / fname).exists():
                    raise DatasetIOError(f"missing {channel} file {fname} for {entry.stem}")


def default_files(stem: str) -> dict[str, str]:
    return {
        "image": f"{stem}_image.png",
        "instances": f"{stem}_instances.png",
        "types": f"{stem}_types.png",
        "dmap": f"{stem}_dmap.raw",
        "dmap_meta": f"{stem}_dmap.json",
    }


def write_sample(root: Path, stem: str, sample: LabeledSample) -> ManifestEntry:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = default_files(stem)
    image8 = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
    _write_png(root / files["image"], image8)
    if sample.instances.max() > np.iinfo(np.uint16).max:
        raise DatasetIOError("instance id exceeds 16-bit range")
    _write_png(root / files["instances"], sample.instances.astype(np.uint16))
    if sample.types.max() > np.iinfo(np.uint8).max:
        raise DatasetIOError("class id exceeds 8-bit range")
    _write_png(root / files["types"], sample.types.astype(np.uint8))
    write_float_raster(root / files["dmap"], sample.dmap)
    return ManifestEntry(
        stem=stem,
        stain=int(sample.stain),
        tissue=int(sample.tissue),
        per_class_counts=[int(v) for v in sample.per_class_counts],
        files=files,
    )


def read_sample(root: Path, entry: ManifestEntry, n_classes: int) -> LabeledSample:
    root = Path(root)
    image8 = _read_png(root / entry.files["image"], "RGB")
    instances = _read_png(root / entry.files["instances"], "I;16").astype(np.int32)
    types = _read_png(root / entry.files["types"], "L").astype(np.int32)
    dmap = read_float_raster(root / entry.files["dmap"])
    shapes = {a.shape[:2] for a in (image8, instances, types, dmap)}
    if len(shapes) != 1:
        raise DatasetIOError(f"{entry.stem}: channel dimensions disagree: {shapes}")
    counts = entry.per_class_counts
    if counts is None:
        counts = recount_per_class(instances, types, n_classes)
    return LabeledSample(
        image=(image8 / np.float32(255.0)).astype(np.float32),
        instances=instances,
        types=types,
        dmap=dmap.astype(np.float32),
        stain=entry.stain,
        tissue=entry.tissue,
        per_class_counts=np.asarray(counts, dtype=np.int64),
    )


def write_dataset(
    root: Path,
    samples: Sequence[LabeledSample],
    class_names: Sequence[str],
    tissue_names: Sequence[str],
    prefix: str = "sample",
) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = [
        write_sample(root, f"{prefix}_{i:05d}", sample) for i, sample in enumerate(samples)
    ]
    manifest = DatasetManifest(
        root=root,
        class_names=list(class_names),
        tissue_names=list(tissue_names),
        entries=entries,
    )
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest) -> Path:
    manifest.validate()
    path = Path(manifest.root) / MANIFEST_NAME
    doc = {
        "class_names": manifest.class_names,
        "tissue_names": manifest.tissue_names,
        "samples": [e.to_dict() for e in manifest.entries],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(root_or_path: Path) -> DatasetManifest:
    path = Path(root_or_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DatasetIOError(f"no manifest at {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"malformed manifest {path}: {exc}") from exc
    entries = [
        ManifestEntry(
            stem=e["stem"],
            stain=int(e["stain"]),
            tissue=int(e["tissue"]),
            per_class_counts=e.get("per_class_counts"),
            files=dict(e["files"]),
        )
        for e in doc["samples"]
    ]
    manifest = DatasetManifest(
        root=path.parent,
        class_names=list(doc["class_names"]),
        tissue_names=list(doc["tissue_names"]),
        entries=entries,
    )
    manifest.validate()
    return manifest


def iter_samples(manifest: DatasetManifest) -> Iterator[LabeledSample]:
    for entry in manifest.entries:
        yield read_sample(manifest.root, entry, manifest.n_classes)


def load_samples(manifest: DatasetManifest) -> list[LabeledSample]:
    return list(iter_samples(manifest))


def manifest_stats(manifest: DatasetManifest) -> NormalizationStats:
    """Normalization statistics over every sample listed in the manifest."""
    counts = []
    for entry in manifest.entries:
        if entry.per_class_counts is not None:
            counts.append(np.asarray(entry.per_class_counts, dtype=np.int64))
        else:
            sample = read_sample(manifest.root, entry, manifest.n_classes)
            counts.append(sample.per_class_counts)
    return compute_normalization_stats(np.stack(counts))
