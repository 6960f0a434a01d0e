"""Manifests, stratified splitting, image loading and the synthetic toy corpus."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ecovnet.errors import (ArgumentError, DuplicatePathError, ManifestError,
                            ManifestNotFoundError, UnknownLabelError)
from ecovnet.imaging import read_gray, resize_bilinear, write_pgm
from ecovnet.train import ImageSet

DEFAULT_CLASSES = ("covid19", "normal", "pneumonia")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    classes: tuple[str, ...] = DEFAULT_CLASSES
    split: str = "all"

    @property
    def class_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.classes)}

    @property
    def labels(self) -> np.ndarray:
        idx = self.class_index
        return np.array([idx[e.label] for e in self.entries], dtype=np.int64)

    def counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=len(self.classes)).tolist() if self.entries else [0] * len(self.classes)

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(csv_path, classes=DEFAULT_CLASSES, check_paths: bool = True) -> DatasetManifest:
    """Parse a ``path,label`` CSV. Relative image paths resolve against the CSV's directory."""
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise ManifestNotFoundError(f"manifest {csv_path} does not exist")
    classes = tuple(classes)
    base = csv_path.parent
    entries, seen = [], set()
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise ManifestError(f"{csv_path}: header must be 'path,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ManifestError(f"{csv_path}:{lineno}: expected 2 fields, got {len(row)}")
            path, label = row[0].strip(), row[1].strip()
            if label not in classes:
                raise UnknownLabelError(f"{csv_path}:{lineno}: unknown label {label!r} "
                                        f"(expected one of {', '.join(classes)})")
            full = path if os.path.isabs(path) else str(base / path)
            if full in seen:
                raise DuplicatePathError(f"{csv_path}:{lineno}: duplicate path {path}")
            if check_paths and not os.path.exists(full):
                raise ManifestError(f"{csv_path}:{lineno}: image {path} does not exist")
            seen.add(full)
            entries.append(ManifestEntry(full, label))
    return DatasetManifest(entries, classes)


def write_manifest(manifest: DatasetManifest, csv_path, relative_to=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for e in manifest.entries:
            p = os.path.relpath(e.path, relative_to) if relative_to else e.path
            w.writerow([p, e.label])


def split_dataset(manifest: DatasetManifest, val_fraction: float = 0.1,
                  seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Stratified train/validation split; ``floor(n * val_fraction)`` per class go to validation."""
    if not 0.0 < val_fraction < 1.0:
        raise ArgumentError("val_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    labels = manifest.labels
    val_idx = []
    for c, name in enumerate(manifest.classes):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise ArgumentError(f"class {name!r} has fewer than 2 samples; cannot split")
        n_val = min(max(1, int(np.floor(len(members) * val_fraction + 1e-9))), len(members) - 1)
        val_idx.extend(rng.permutation(members)[:n_val].tolist())
    in_val = np.zeros(len(manifest), dtype=bool)
    in_val[val_idx] = True
    train = [e for e, v in zip(manifest.entries, in_val) if not v]
    val = [e for e, v in zip(manifest.entries, in_val) if v]
    return (DatasetManifest(train, manifest.classes, "train"),
            DatasetManifest(val, manifest.classes, "val"))


def load_image(path, target_resolution: int) -> np.ndarray:
    """Read a grayscale image as (3, R, R) float32 in [0, 1]."""
    gray = read_gray(path).astype(np.float64) / 255.0
    gray = resize_bilinear(gray, target_resolution, target_resolution)
    return np.repeat(gray[None].astype(np.float32), 3, axis=0)


def load_imageset(manifest: DatasetManifest, resolution: int) -> ImageSet:
    images = np.empty((len(manifest), resolution, resolution), dtype=np.float32)
    for i, e in enumerate(manifest.entries):
        gray = read_gray(e.path).astype(np.float64) / 255.0
        images[i] = resize_bilinear(gray, resolution, resolution)
    return ImageSet(images, manifest.labels, [e.path for e in manifest.entries])


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

TOY_BACKGROUND = 80.0
TOY_NOISE_SIGMA = 12.0
TOY_BLOB_AMPLITUDE = 150.0
TOY_BAND_AMPLITUDE = 70.0


def toy_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic image: 0 = blob in the upper-left quadrant, 1 = noise, 2 = lower-half bands."""
    img = TOY_BACKGROUND + TOY_NOISE_SIGMA * rng.standard_normal((size, size))
    rows, cols = np.mgrid[0:size, 0:size]
    if label == 0:
        cy, cx = rng.uniform(size / 6, size / 3, size=2)
        sigma = size / 8
        img += TOY_BLOB_AMPLITUDE * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma ** 2))
    elif label == 2:
        period = max(2, size // 8)
        phase = int(rng.integers(0, 2 * period))
        band = ((rows + phase) // period) % 2 == 0
        img += TOY_BAND_AMPLITUDE * (band & (rows >= size // 2))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_toy_dataset(out_dir, n_per_class: int = 50, size: int = 48, seed: int = 0,
                         classes=DEFAULT_CLASSES) -> DatasetManifest:
    """Write ``3 * n_per_class`` PGM images plus ``manifest.csv`` under ``out_dir``."""
    if n_per_class < 10:
        raise ArgumentError("n_per_class must be >= 10")
    if len(classes) != 3:
        raise ArgumentError("the toy corpus has exactly three classes")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for c, name in enumerate(classes):
        for i in range(n_per_class):
            path = out / "images" / f"{name}_{i:04d}.pgm"
            write_pgm(path, toy_image(c, size, rng))
            entries.append(ManifestEntry(str(path), name))
    manifest = DatasetManifest(entries, tuple(classes))
    write_manifest(manifest, out / "manifest.csv", relative_to=out)
    return manifest
