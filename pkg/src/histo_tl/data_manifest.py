"""Tile manifest ingestion, seeded stratified splitting and per-task label remapping."""

from __future__ import annotations

import csv
import enum
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    IngestionError,
    IntegrityError,
    LabelError,
    SplitError,
    TaskDerivationError,
)

PARTITIONS = ("train", "val", "test")
MANIFEST_COLUMNS = ("tile_id", "image_path", "label")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff"}

CANONICAL_COUNTS = {"NT": 536, "NCT": 263, "VT": 345}
CANONICAL_TILE_SIZE = 1024


class ClassLabel(enum.IntEnum):
    NT = 0
    NCT = 1
    VT = 2

    @classmethod
    def parse(cls, text: str | "ClassLabel") -> "ClassLabel":
        """Case-insensitive label lookup accepting the aliases used by the
        public osteosarcoma release (``Non-Tumor``, ``Viable``,
        ``Non-Viable-Tumor`` ...)."""
        if isinstance(text, ClassLabel):
            return text
        key = re.sub(r"[\s_\-]+", "", str(text).strip().lower())
        try:
            return _LABEL_ALIASES[key]
        except KeyError:
            raise LabelError(f"unknown label {text!r}") from None


_LABEL_ALIASES = {
    "nt": ClassLabel.NT,
    "nontumor": ClassLabel.NT,
    "nontumour": ClassLabel.NT,
    "normal": ClassLabel.NT,
    "nct": ClassLabel.NCT,
    "necrotic": ClassLabel.NCT,
    "necrotictumor": ClassLabel.NCT,
    "necrotictumour": ClassLabel.NCT,
    "nonviabletumor": ClassLabel.NCT,
    "nonviable": ClassLabel.NCT,
    "vt": ClassLabel.VT,
    "viable": ClassLabel.VT,
    "viabletumor": ClassLabel.VT,
    "viabletumour": ClassLabel.VT,
}


@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    image_path: Path
    label: ClassLabel
    width_px: int
    height_px: int
    source_wsi_id: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[TileRecord, ...]
    class_counts: Mapping[ClassLabel, int] = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.tile_id for r in self.records]
        dupes = sorted(k for k, v in Counter(ids).items() if v > 1)
        if dupes:
            raise IntegrityError(f"duplicate tile_id(s): {', '.join(dupes[:5])}")
        counts = Counter(r.label for r in self.records)
        recount = {c: counts.get(c, 0) for c in ClassLabel}
        if self.class_counts and dict(self.class_counts) != recount:
            raise IntegrityError("class_counts disagree with records")
        object.__setattr__(self, "class_counts", recount)

    @classmethod
    def from_records(cls, records: Iterable[TileRecord]) -> "DatasetManifest":
        return cls(tuple(sorted(records, key=lambda r: r.tile_id)))

    def __len__(self):
        return len(self.records)

    @property
    def total(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[str, TileRecord]:
        return {r.tile_id: r for r in self.records}

    def is_canonical(self) -> bool:
        return self.total == 1144 and {
            c.name: n for c, n in self.class_counts.items()
        } == CANONICAL_COUNTS


def _image_size(path: Path) -> tuple[int, int]:
    if not path.is_file():
        raise IngestionError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P", "CMYK", "YCbCr"):
                raise IngestionError(f"{path}: unsupported image mode {im.mode}")
            return im.size
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def _make_record(tile_id, image_path, label, expected_size, wsi=None) -> TileRecord:
    width, height = _image_size(image_path)
    if expected_size is not None and (width, height) != (expected_size, expected_size):
        raise IntegrityError(
            f"{tile_id}: expected {expected_size}x{expected_size} tile, got {width}x{height}"
        )
    return TileRecord(
        tile_id=tile_id,
        image_path=image_path,
        label=ClassLabel.parse(label),
        width_px=width,
        height_px=height,
        source_wsi_id=wsi or None,
    )


def _load_csv(csv_path: Path, expected_size) -> list[TileRecord]:
    base = csv_path.parent
    try:
        fh = csv_path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {csv_path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestionError(f"{csv_path}: missing column(s) {', '.join(missing)}")
        records = []
        for row in reader:
            path = Path(row["image_path"])
            if not path.is_absolute():
                path = base / path
            records.append(
                _make_record(
                    row["tile_id"].strip(),
                    path,
                    row["label"],
                    expected_size,
                    (row.get("source_wsi_id") or "").strip(),
                )
            )
    return records


def _load_folders(root: Path, expected_size) -> list[TileRecord]:
    records = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        label = ClassLabel.parse(sub.name)
        for img in sorted(sub.rglob("*")):
            if img.suffix.lower() in IMAGE_SUFFIXES and img.is_file():
                tile_id = img.relative_to(root).with_suffix("").as_posix()
                records.append(_make_record(tile_id, img, label, expected_size))
    return records


def load_manifest(
    root,
    layout: str = "csv_manifest",
    expected_size: int | None = None,
) -> DatasetManifest:
    """Read a labelled tile corpus.

    ``layout="csv_manifest"``: ``root`` is either the CSV itself or a directory
    holding ``manifest.csv``; image paths are resolved relative to the CSV.
    ``layout="folder_per_class"``: ``root`` holds one subdirectory per class,
    named by any accepted label alias.

    ``expected_size`` asserts square tiles of that edge length (1024 for the
    canonical dataset).
    """
    root = Path(root)
    if not root.exists():
        raise IngestionError(f"dataset root does not exist: {root}")
    if layout == "csv_manifest":
        csv_path = root / "manifest.csv" if root.is_dir() else root
        if not csv_path.is_file():
            if root.is_dir() and not any(root.iterdir()):
                raise IntegrityError("no records found")
            raise IngestionError(f"manifest not found: {csv_path}")
        records = _load_csv(csv_path, expected_size)
    elif layout == "folder_per_class":
        if not root.is_dir():
            raise IngestionError(f"not a directory: {root}")
        records = _load_folders(root, expected_size)
    else:
        raise IngestionError(f"unknown layout {layout!r}")
    if not records:
        raise IntegrityError("no records found")
    return DatasetManifest.from_records(records)


def write_manifest_csv(manifest: DatasetManifest, path) -> Path:
    """Write the manifest as CSV with paths relative to the CSV directory
    where possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with_wsi = any(r.source_wsi_id for r in manifest.records)
    cols = list(MANIFEST_COLUMNS) + (["source_wsi_id"] if with_wsi else [])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in manifest.records:
            p = Path(r.image_path).resolve()
            try:
                rel = p.relative_to(base).as_posix()
            except ValueError:
                rel = p.as_posix()
            row = [r.tile_id, rel, r.label.name]
            if with_wsi:
                row.append(r.source_wsi_id or "")
            writer.writerow(row)
    return path


# --------------------------------------------------------------------------- split


@dataclass(frozen=True)
class SplitAssignment:
    seed: int
    ratios: tuple[float, float, float]
    membership: Mapping[str, str]

    def partition(self, name: str) -> list[str]:
        return sorted(k for k, v in self.membership.items() if v == name)

    def sizes(self) -> dict[str, int]:
        counts = Counter(self.membership.values())
        return {p: counts.get(p, 0) for p in PARTITIONS}

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "membership": dict(sorted(self.membership.items())),
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        doc = json.loads(text)
        bad = {v for v in doc["membership"].values() if v not in PARTITIONS}
        if bad:
            raise SplitError(f"unknown partition name(s) {sorted(bad)}")
        return cls(int(doc["seed"]), tuple(doc["ratios"]), dict(doc["membership"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "SplitAssignment":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _as_fraction(x: float) -> Fraction:
    return Fraction(x).limit_denominator(10**9)


def _apportion(counts: Mapping, ratio: Fraction, room: Mapping, priority=None) -> dict:
    """Give ``floor(total * ratio)`` slots to the strata: every stratum gets
    ``floor(n * ratio)``, leftovers go one each by descending ``priority``
    (default: fractional part of the quota; ties to the lower class index),
    never exceeding ``room``."""
    total = sum(counts.values())
    quota = {c: n * ratio for c, n in counts.items()}
    alloc = {c: min(math.floor(q), room[c]) for c, q in quota.items()}
    leftover = math.floor(total * ratio) - sum(alloc.values())
    if priority is None:
        priority = {c: quota[c] - math.floor(quota[c]) for c in counts}
    for c in sorted(counts, key=lambda c: (-priority[c], c)):
        if leftover <= 0:
            break
        if alloc[c] < room[c]:
            alloc[c] += 1
            leftover -= 1
    return alloc


def partition_sizes(counts: Mapping, ratios: Sequence[float]) -> dict:
    """Per-stratum (train, val, test) sizes for the given stratum counts.

    Partition totals are ``floor(N*r_train)``, ``floor(N*r_val)`` and the
    remainder. Train slots are spread over strata by largest remainder; spare
    val slots go to the strata whose test share would otherwise overshoot
    most. Train and val land within one tile of each stratum's exact share,
    test (which absorbs both rounding residues) within two.
    """
    r_train, r_val, r_test = (_as_fraction(r) for r in ratios)
    train = _apportion(counts, r_train, dict(counts))
    room = {c: counts[c] - train[c] for c in counts}
    overshoot = {c: room[c] - math.floor(counts[c] * r_val) - counts[c] * r_test for c in counts}
    val = _apportion(counts, r_val, room, overshoot)
    return {c: (train[c], val[c], counts[c] - train[c] - val[c]) for c in counts}


def _check_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise SplitError(f"ratios must be three positive fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)!r}")
    return ratios


def split_dataset(
    manifest: DatasetManifest,
    ratios=(0.7, 0.1, 0.2),
    seed: int = 42,
    group_by_wsi: bool = False,
) -> SplitAssignment:
    """Seeded train/val/test split of a manifest.

    The default is a tile-level split stratified by class. With
    ``group_by_wsi`` all tiles of one source slide land in the same
    partition; stratification is then only approximate.
    """
    ratios = _check_ratios(ratios)
    if group_by_wsi:
        return _split_by_wsi(manifest, ratios, seed)
    small = [c.name for c, n in manifest.class_counts.items() if 0 < n < 3]
    if small:
        raise SplitError(f"class(es) {', '.join(small)} have fewer than 3 tiles")
    counts = {c: n for c, n in manifest.class_counts.items() if n > 0}
    sizes = partition_sizes(counts, ratios)
    rng = np.random.Generator(np.random.PCG64(seed))
    membership = {}
    for c in sorted(counts):
        ids = [r.tile_id for r in manifest.records if r.label == c]
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_train, n_val, _ = sizes[c]
        for i, tid in enumerate(ids):
            membership[tid] = (
                "train" if i < n_train else "val" if i < n_train + n_val else "test"
            )
    return SplitAssignment(seed, ratios, membership)


def _split_by_wsi(manifest, ratios, seed) -> SplitAssignment:
    missing = [r.tile_id for r in manifest.records if not r.source_wsi_id]
    if missing:
        raise SplitError(f"group_by_wsi needs source_wsi_id; missing for {missing[0]!r}")
    per_wsi = Counter(r.source_wsi_id for r in manifest.records)
    if len(per_wsi) < 3:
        raise SplitError("group_by_wsi needs at least 3 distinct slides")
    wsis = sorted(per_wsi)
    rng = np.random.Generator(np.random.PCG64(seed))
    wsis = [wsis[i] for i in rng.permutation(len(wsis))]
    total = manifest.total
    train_target = math.floor(total * _as_fraction(ratios[0]))
    val_target = train_target + math.floor(total * _as_fraction(ratios[1]))
    assign, cum = {}, 0
    for w in wsis:
        assign[w] = "train" if cum < train_target else "val" if cum < val_target else "test"
        cum += per_wsi[w]
    # every partition needs at least one slide
    for part in ("val", "test"):
        members = {p: [w for w in wsis if assign[w] == p] for p in PARTITIONS}
        if not members[part]:
            donor = "train" if len(members["train"]) > 1 else "val"
            assign[members[donor][-1]] = part
    membership = {r.tile_id: assign[r.source_wsi_id] for r in manifest.records}
    return SplitAssignment(seed, ratios, membership)


# --------------------------------------------------------------------------- tasks


@dataclass(frozen=True)
class TaskSpec:
    name: str
    label_map: Mapping[ClassLabel, int | None]
    n_classes: int
    positive_class: int | None = 1

    @property
    def class_names(self) -> list[str]:
        """Task-class index -> '+'-joined source labels, e.g. ``['NT', 'NCT+VT']``."""
        names = []
        for k in range(self.n_classes):
            names.append("+".join(c.name for c in ClassLabel if self.label_map.get(c) == k))
        return names

    @property
    def is_binary(self) -> bool:
        return self.n_classes == 2

    @classmethod
    def named(cls, name: str) -> "TaskSpec":
        try:
            return TASKS[name]
        except KeyError:
            raise TaskDerivationError(
                f"unknown task {name!r}; expected one of {', '.join(TASKS)}"
            ) from None


NT, NCT, VT = ClassLabel.NT, ClassLabel.NCT, ClassLabel.VT

TASKS: dict[str, TaskSpec] = {
    "NT_vs_REST": TaskSpec("NT_vs_REST", {NT: 0, NCT: 1, VT: 1}, 2),
    "NCT_vs_NT": TaskSpec("NCT_vs_NT", {NCT: 0, NT: 1, VT: None}, 2),
    "VT_vs_NT": TaskSpec("VT_vs_NT", {NT: 0, VT: 1, NCT: None}, 2),
    "NCT_vs_VT": TaskSpec("NCT_vs_VT", {NCT: 0, VT: 1, NT: None}, 2),
    "MULTICLASS": TaskSpec("MULTICLASS", {NT: 0, NCT: 1, VT: 2}, 3, positive_class=None),
}
BINARY_TASKS = ("NT_vs_REST", "NCT_vs_NT", "VT_vs_NT", "NCT_vs_VT")


@dataclass
class TaskData:
    """Per-partition ``(image_path, task_class)`` lists for one task, plus the
    matching tile ids in the same order."""

    task: TaskSpec
    train: list[tuple[Path, int]]
    val: list[tuple[Path, int]]
    test: list[tuple[Path, int]]
    tile_ids: dict[str, list[str]]

    def partition(self, name: str) -> list[tuple[Path, int]]:
        return getattr(self, name)

    def class_totals(self) -> dict[int, int]:
        counts = Counter(y for p in PARTITIONS for _, y in self.partition(p))
        return {k: counts.get(k, 0) for k in range(self.task.n_classes)}


def derive_task(manifest: DatasetManifest, split: SplitAssignment, task) -> TaskData:
    if isinstance(task, str):
        task = TaskSpec.named(task)
    parts: dict[str, list] = {p: [] for p in PARTITIONS}
    ids: dict[str, list] = {p: [] for p in PARTITIONS}
    for rec in manifest.records:
        try:
            part = split.membership[rec.tile_id]
        except KeyError:
            raise TaskDerivationError(f"tile {rec.tile_id!r} missing from split") from None
        y = task.label_map.get(rec.label)
        if y is None:
            continue
        parts[part].append((rec.image_path, y))
        ids[part].append(rec.tile_id)
    empty = [p for p in PARTITIONS if not parts[p]]
    if empty:
        raise TaskDerivationError(f"task {task.name}: empty partition(s) {', '.join(empty)}")
    return TaskData(task, parts["train"], parts["val"], parts["test"], ids)
