from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from histo_tl.data_manifest import ClassLabel, DatasetManifest, TileRecord

CANONICAL = {ClassLabel.NT: 536, ClassLabel.VT: 345, ClassLabel.NCT: 263}

# one constant colour per class; keeps tiny CLI/estimator fixtures learnable
CLASS_COLOURS = {
    ClassLabel.NT: (205, 50, 50),
    ClassLabel.NCT: (50, 180, 75),
    ClassLabel.VT: (60, 75, 215),
}


def synthetic_manifest(counts=None, with_wsi=False) -> DatasetManifest:
    """Manifest of file-less records (paths are never opened by split/derive)."""
    counts = counts or CANONICAL
    records = []
    for label, n in counts.items():
        for i in range(n):
            records.append(
                TileRecord(
                    tile_id=f"{label.name}_{i:04d}",
                    image_path=Path(f"/nonexistent/{label.name}_{i:04d}.png"),
                    label=label,
                    width_px=1024,
                    height_px=1024,
                    source_wsi_id=f"wsi{i % 12:02d}" if with_wsi else None,
                )
            )
    return DatasetManifest.from_records(records)


@pytest.fixture
def canonical_manifest():
    return synthetic_manifest()


def write_tile(path: Path, colour, size=40, jitter=0):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.empty((size, size, 3), dtype=np.uint8)
    arr[...] = np.clip(np.array(colour) + jitter, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


def make_tile_dataset(root: Path, per_class: int, size=40, csv=True, label_names=None):
    """PNG tiles with a ``manifest.csv``; returns the root directory."""
    label_names = label_names or {c: c.name for c in ClassLabel}
    rows = ["tile_id,image_path,label"]
    for label, colour in CLASS_COLOURS.items():
        for i in range(per_class):
            rel = Path("tiles") / label.name / f"{label.name.lower()}_{i:03d}.png"
            write_tile(root / rel, colour, size, jitter=(i % 5) * 3)
            rows.append(f"{label.name}-{i:03d},{rel.as_posix()},{label_names[label]}")
    if csv:
        (root / "manifest.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return root


@pytest.fixture
def six_tile_root(tmp_path):
    return make_tile_dataset(tmp_path / "data", per_class=2)


# ------------------------------------------------------------------ acceptance lines

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_line(request):
    """``acceptance_line(key, ok, detail)`` records one criterion verdict."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(key, ok, detail=""):
        verdict = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        lines[key] = f"criterion {key}: {verdict}  {detail}".rstrip()

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines, key=str):
            terminalreporter.write_line(lines[key])
