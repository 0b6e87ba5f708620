"""Patch dataset model: records, binary labeling, summary stats, stratified splitting, manifest I/O.

A patch is a 256x256 grayscale sub-image of a mammogram with lesion metadata.
The binary target is lesion *presence* (mass or calcification), not malignancy:
benign and unproven lesions count as pathological.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, IngestError, InputError

PATCH_SIZE = 256

MANIFEST_COLUMNS = ["id", "image_path", "lesion_type", "pathology_tag", "birads"]


class LesionType(str, Enum):
    MASS = "mass"
    CALCIFICATION = "calcification"
    NORMAL = "normal"


class PathologyTag(str, Enum):
    MALIGNANT = "malignant"
    BENIGN = "benign"
    BENIGN_WITHOUT_CALLBACK = "benign_without_callback"
    UNPROVEN = "unproven"
    NONE = "none"


class Label(str, Enum):
    PATHOLOGICAL = "pathological"
    NON_PATHOLOGICAL = "non_pathological"


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


def binarize_label(lesion_type: LesionType) -> Label:
    """Binary label from lesion type: any mass or calcification is pathological.

    The pathology tag (malignant / benign / unproven) is deliberately ignored.
    """
    if not isinstance(lesion_type, LesionType):
        try:
            lesion_type = LesionType(lesion_type)
        except ValueError:
            raise InputError(f"unrecognized lesion type: {lesion_type!r}") from None
    if lesion_type is LesionType.NORMAL:
        return Label.NON_PATHOLOGICAL
    return Label.PATHOLOGICAL


@dataclass
class PatchRecord:
    """One grayscale patch plus its lesion metadata and derived binary label."""

    id: str
    image: np.ndarray
    lesion_type: LesionType
    pathology_tag: PathologyTag
    birads: int | None = None
    label: Label = None  # type: ignore[assignment]  # derived in __post_init__ when omitted

    def __post_init__(self):
        if self.label is None:
            self.label = binarize_label(self.lesion_type)
        self.validate()

    def validate(self) -> None:
        img = self.image
        if img is not None:
            if img.ndim != 2 or img.shape != (PATCH_SIZE, PATCH_SIZE):
                raise InputError(
                    f"record {self.id!r}: image must be {PATCH_SIZE}x{PATCH_SIZE}, got {img.shape}"
                )
            if img.size and (img.min() < 0.0 or img.max() > 1.0):
                raise InputError(f"record {self.id!r}: pixel values outside [0, 1]")
        normal = self.lesion_type is LesionType.NORMAL
        if normal != (self.pathology_tag is PathologyTag.NONE):
            raise InputError(
                f"record {self.id!r}: lesion_type {self.lesion_type.value} inconsistent "
                f"with pathology_tag {self.pathology_tag.value}"
            )
        if normal != (self.label is Label.NON_PATHOLOGICAL):
            raise InputError(f"record {self.id!r}: label inconsistent with lesion_type")
        if self.birads is not None and not 1 <= self.birads <= 5:
            raise InputError(f"record {self.id!r}: birads must be in 1..5, got {self.birads}")


@dataclass
class SummaryStats:
    """Counts per (lesion_type, pathology_tag) cell plus binary-label totals."""

    cells: Counter = field(default_factory=Counter)
    total_pathological: int = 0
    total_non_pathological: int = 0
    total: int = 0

    def count(self, lesion_type: LesionType, pathology_tag: PathologyTag) -> int:
        return self.cells[(lesion_type, pathology_tag)]

    def __add__(self, other: "SummaryStats") -> "SummaryStats":
        return SummaryStats(
            cells=self.cells + other.cells,
            total_pathological=self.total_pathological + other.total_pathological,
            total_non_pathological=self.total_non_pathological + other.total_non_pathological,
            total=self.total + other.total,
        )


def summarize(records: list[PatchRecord]) -> SummaryStats:
    """Exact enumeration of records into per-cell and per-label counts."""
    stats = SummaryStats()
    for rec in records:
        stats.cells[(rec.lesion_type, rec.pathology_tag)] += 1
        if rec.label is Label.PATHOLOGICAL:
            stats.total_pathological += 1
        else:
            stats.total_non_pathological += 1
        stats.total += 1
    return stats


@dataclass
class SplitAssignment:
    """Mapping of record id to train/validation/test, plus the split recipe."""

    assignments: dict[str, Split]
    ratios: tuple[float, float, float]
    seed: int

    def ids(self, split: Split) -> list[str]:
        return [rid for rid, s in self.assignments.items() if s is split]

    def size(self, split: Split) -> int:
        return sum(1 for s in self.assignments.values() if s is split)


_SPLIT_ORDER = (Split.TRAIN, Split.VALIDATION, Split.TEST)


def _largest_remainder(total: int, ratios: tuple[float, float, float]) -> list[int]:
    """Integer allocation of `total` by `ratios`, each count within 1 of ratios[k] * total."""
    exact = [total * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    # hand out the leftover to the largest fractional parts; ties go to earlier splits
    order = sorted(range(3), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[: total - sum(counts)]:
        counts[k] += 1
    return counts


def stratified_split(
    records: list[PatchRecord], ratios: tuple[float, float, float], seed: int
) -> SplitAssignment:
    """Deterministic per-class split with exact global sizes.

    Each binary class is shuffled (seeded) and allocated to splits by largest-remainder
    rounding; allocations are then nudged so the global split sizes match the
    largest-remainder targets for the whole set. This keeps split sizes within +-1
    record of ratio * total while holding per-split class balance to a couple of
    records of the global fraction.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got sum {sum(ratios)!r}")
    if not records:
        raise InputError("cannot split an empty record list")
    n_active = sum(1 for r in ratios if r > 0)
    if len(records) < n_active:
        raise InputError(f"{len(records)} records cannot fill {n_active} non-empty splits")
    ids = [rec.id for rec in records]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate record ids")

    targets = _largest_remainder(len(records), ratios)

    by_class: dict[Label, list[str]] = {}
    for rec in records:
        by_class.setdefault(rec.label, []).append(rec.id)

    rng = np.random.default_rng(seed)
    alloc: dict[Label, list[int]] = {}
    shuffled: dict[Label, list[str]] = {}
    for lab in sorted(by_class, key=lambda l: l.value):
        class_ids = sorted(by_class[lab])
        rng.shuffle(class_ids)
        shuffled[lab] = class_ids
        alloc[lab] = _largest_remainder(len(class_ids), ratios)

    # nudge per-class allocations until global sizes hit the targets exactly,
    # always moving a slot within the largest class touched by the imbalance
    labs = list(alloc)
    for _ in range(len(records)):
        sizes = [sum(alloc[lab][k] for lab in labs) for k in range(3)]
        over = [k for k in range(3) if sizes[k] > targets[k]]
        under = [k for k in range(3) if sizes[k] < targets[k]]
        if not over:
            break
        k_over, k_under = over[0], under[0]
        donor = max((lab for lab in labs if alloc[lab][k_over] > 0), key=lambda l: len(shuffled[l]))
        alloc[donor][k_over] -= 1
        alloc[donor][k_under] += 1

    assignments: dict[str, Split] = {}
    for lab in labs:
        pos = 0
        for k, split in enumerate(_SPLIT_ORDER):
            for rid in shuffled[lab][pos : pos + alloc[lab][k]]:
                assignments[rid] = split
            pos += alloc[lab][k]

    assert len(assignments) == len(records)
    return SplitAssignment(assignments=assignments, ratios=ratios, seed=seed)


def save_split(assignment: SplitAssignment, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split"])
        for rid, split in assignment.assignments.items():
            writer.writerow([rid, split.value])


def load_split(path: str | Path, ratios=(0.0, 0.0, 0.0), seed: int = 0) -> SplitAssignment:
    assignments: dict[str, Split] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"id", "split"}:
            raise IngestError(f"split file {path}: expected columns id,split")
        for row in reader:
            try:
                assignments[row["id"]] = Split(row["split"])
            except ValueError:
                raise IngestError(f"split file {path}: bad split {row['split']!r}") from None
    return SplitAssignment(assignments=assignments, ratios=tuple(ratios), seed=seed)


def _image_to_png(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(image * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)


def _png_to_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return (arr / 255.0).astype(np.float32)
    if arr.dtype in (np.uint16, np.int32):
        return (arr / 65535.0).astype(np.float32)
    raise IngestError(f"image {path}: unsupported PNG bit depth ({arr.dtype})")


def save_manifest(records: list[PatchRecord], path: str | Path) -> None:
    """Write a manifest CSV plus one 16-bit grayscale PNG per record.

    Images land in an `images/` directory next to the manifest; image_path
    entries are relative to the manifest's directory.
    """
    path = Path(path)
    img_dir = path.parent / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in records:
            rel = f"images/{rec.id}.png"
            _image_to_png(rec.image, path.parent / rel)
            writer.writerow(
                [
                    rec.id,
                    rel,
                    rec.lesion_type.value,
                    rec.pathology_tag.value,
                    "" if rec.birads is None else rec.birads,
                ]
            )


def load_manifest(path: str | Path) -> list[PatchRecord]:
    """Read a manifest CSV and its referenced PNGs into validated records."""
    path = Path(path)
    records: list[PatchRecord] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise IngestError(f"manifest {path}: missing column(s) {sorted(missing)}")
        for row in reader:
            rid = row["id"]
            try:
                lesion = LesionType(row["lesion_type"])
            except ValueError:
                raise IngestError(
                    f"record {rid!r}: unknown lesion_type {row['lesion_type']!r}"
                ) from None
            try:
                tag = PathologyTag(row["pathology_tag"])
            except ValueError:
                raise IngestError(
                    f"record {rid!r}: unknown pathology_tag {row['pathology_tag']!r}"
                ) from None
            birads = int(row["birads"]) if row["birads"].strip() else None
            img_path = path.parent / row["image_path"]
            try:
                image = _png_to_image(img_path)
            except FileNotFoundError:
                raise IngestError(f"record {rid!r}: image file not found: {img_path}") from None
            if image.shape != (PATCH_SIZE, PATCH_SIZE):
                raise IngestError(
                    f"record {rid!r}: image is {image.shape}, expected {PATCH_SIZE}x{PATCH_SIZE}"
                )
            try:
                records.append(
                    PatchRecord(id=rid, image=image, lesion_type=lesion, pathology_tag=tag, birads=birads)
                )
            except InputError as exc:
                raise IngestError(str(exc)) from None
    return records
