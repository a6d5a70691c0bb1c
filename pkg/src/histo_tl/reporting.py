"""Cross-run comparison tables and plots built from stored ``metrics.json`` files."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .data_manifest import BINARY_TASKS
from .errors import AggregationError
from .metrics import RocCurve, read_metrics_json, tumor_type_aggregate

log = logging.getLogger(__name__)

MISSING = "missing"


@dataclass
class ReportTables:
    multiclass: list[dict] = field(default_factory=list)
    per_class: list[dict] = field(default_factory=list)
    accuracy: list[dict] = field(default_factory=list)
    tumor_type: list[dict] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)

    @property
    def populated_cells(self) -> int:
        return sum(1 for r in self.accuracy if r["accuracy"] != MISSING)


def collect_metrics(results_dir: Path, run_dirs=None) -> dict[tuple[str, str], dict]:
    """``(task, backbone) -> metrics.json`` for every completed run.

    ``run_dirs`` restricts the scan to those directory names."""
    found = {}
    if run_dirs is None:
        paths = sorted(results_dir.glob("*/metrics.json"))
    else:
        paths = [results_dir / d / "metrics.json" for d in run_dirs]
    for mpath in paths:
        if not mpath.is_file():
            continue
        doc = read_metrics_json(mpath)
        doc["_run_dir"] = str(mpath.parent)
        found[(doc["task"], doc["backbone"])] = doc
    return found


def build_tables(
    metrics: dict[tuple[str, str], dict],
    tasks,
    backbones,
    run_id=lambda t, b: f"{t}__{b}",
) -> ReportTables:
    tables = ReportTables()
    for t in tasks:
        for b in backbones:
            doc = metrics.get((t, b))
            if doc is None:
                tables.missing.append(run_id(t, b))
                tables.accuracy.append({"task": t, "backbone": b, "accuracy": MISSING, "auc": MISSING})
                continue
            tables.accuracy.append(
                {"task": t, "backbone": b, "accuracy": doc["accuracy"], "auc": doc.get("auc", "")}
            )
            for cls, m in doc["per_class"].items():
                tables.per_class.append({"task": t, "backbone": b, "class": cls, **m})

    if "MULTICLASS" in tasks:
        for b in backbones:
            doc = metrics.get(("MULTICLASS", b))
            if doc is None:
                tables.multiclass.append(
                    {"backbone": b, "weighted_precision": MISSING, "weighted_recall": MISSING,
                     "weighted_f1": MISSING, "accuracy": MISSING}
                )
            else:
                w = doc["weighted"]
                tables.multiclass.append(
                    {"backbone": b, "weighted_precision": w["precision"], "weighted_recall": w["recall"],
                     "weighted_f1": w["f1"], "accuracy": doc["accuracy"]}
                )

    for b in backbones:
        accs = {t: metrics[(t, b)]["accuracy"] for t in BINARY_TASKS if (t, b) in metrics}
        try:
            agg = tumor_type_aggregate(accs, percent=True)
        except AggregationError:
            agg = {k: MISSING for k in ("NT", "NCT", "VT")}
        tables.tumor_type.append({"backbone": b, **agg})
    return tables


def _write_csv(path: Path, rows: list[dict]) -> Path | None:
    if not rows:
        return None
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def _fmt(v, digits=2) -> str:
    return f"{v:.{digits}f}" if isinstance(v, float) else str(v)


def render_text(tables: ReportTables) -> str:
    out = []
    if tables.multiclass:
        out.append("Multiclass backbone comparison (weighted averages)")
        out.append(f"{'backbone':<14}{'precision':>10}{'recall':>10}{'f1':>10}{'accuracy':>10}")
        for r in tables.multiclass:
            out.append(
                f"{r['backbone']:<14}{_fmt(r['weighted_precision']):>10}{_fmt(r['weighted_recall']):>10}"
                f"{_fmt(r['weighted_f1']):>10}{_fmt(r['accuracy'], 3):>10}"
            )
        out.append("")
    out.append("Per-class metrics")
    out.append(f"{'task':<12}{'backbone':<14}{'class':<10}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}")
    for r in tables.per_class:
        out.append(
            f"{r['task']:<12}{r['backbone']:<14}{r['class']:<10}{_fmt(r['precision']):>10}"
            f"{_fmt(r['recall']):>10}{_fmt(r['f1']):>10}{r['support']:>9}"
        )
    out.append("")
    out.append("Test accuracy / AUC")
    for r in tables.accuracy:
        out.append(f"{r['task']:<12}{r['backbone']:<14}{_fmt(r['accuracy'], 3):>10}{_fmt(r['auc']):>10}")
    out.append("")
    out.append("Tile accuracy by tumour type (%)")
    out.append(f"{'backbone':<14}{'NT':>10}{'NCT':>10}{'VT':>10}")
    for r in tables.tumor_type:
        out.append(f"{r['backbone']:<14}{_fmt(r['NT']):>10}{_fmt(r['NCT']):>10}{_fmt(r['VT']):>10}")
    if tables.missing:
        out.append("")
        out.append("Missing runs: " + ", ".join(tables.missing))
    return "\n".join(out)


def _plots(tables: ReportTables, metrics, out_dir: Path) -> list[Path]:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        import numpy as np
    except ImportError:
        log.warning("matplotlib unavailable; report written as CSV only")
        return []
    written = []
    rows = [r for r in tables.accuracy if r["accuracy"] != MISSING]
    if rows:
        tasks = list(dict.fromkeys(r["task"] for r in tables.accuracy))
        backbones = list(dict.fromkeys(r["backbone"] for r in tables.accuracy))
        x = np.arange(len(tasks))
        width = 0.8 / max(len(backbones), 1)
        fig, ax = plt.subplots(figsize=(8, 4))
        for i, b in enumerate(backbones):
            vals = [
                next((r["accuracy"] for r in rows if r["task"] == t and r["backbone"] == b), 0.0)
                for t in tasks
            ]
            ax.bar(x + i * width, vals, width, label=b)
        ax.set_xticks(x + width * (len(backbones) - 1) / 2, tasks, rotation=20)
        ax.set(ylabel="Test accuracy", ylim=(0, 1))
        ax.legend()
        fig.tight_layout()
        path = out_dir / "accuracy.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    for t in BINARY_TASKS:
        curves = []
        for (task, b), doc in metrics.items():
            roc_csv = Path(doc["_run_dir"]) / "roc.csv"
            if task == t and roc_csv.is_file():
                curves.append((b, RocCurve.from_csv(roc_csv, auc=doc.get("auc"))))
        if not curves:
            continue
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for b, c in sorted(curves, key=lambda bc: bc[0]):
            ax.plot(c.fpr, c.tpr, label=f"{b} (AUC {c.auc:.2f})")
        ax.plot([0, 1], [0, 1], ls="--", c="grey", lw=0.8)
        ax.set(xlabel="False positive rate", ylabel="True positive rate", title=t)
        ax.legend(loc="lower right")
        fig.tight_layout()
        path = out_dir / f"roc_{t}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def write_report(results_dir: Path, tasks=None, backbones=None, run_id=None, plots: bool = True) -> ReportTables:
    """Build every table from ``results_dir`` and write them under
    ``results_dir/report``. Without explicit ``tasks``/``backbones`` the
    matrix is whatever runs exist."""
    run_dirs = None
    if run_id is not None and tasks and backbones:
        run_dirs = [run_id(t, b) for t in tasks for b in backbones]
    metrics = collect_metrics(results_dir, run_dirs)
    tasks = list(tasks) if tasks else sorted({t for t, _ in metrics})
    backbones = list(backbones) if backbones else sorted({b for _, b in metrics})
    tables = build_tables(metrics, tasks, backbones, run_id or (lambda t, b: f"{t}__{b}"))
    out_dir = results_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rows in (
        ("multiclass_comparison.csv", tables.multiclass),
        ("per_class_metrics.csv", tables.per_class),
        ("accuracy.csv", tables.accuracy),
        ("tumor_type_accuracy.csv", tables.tumor_type),
    ):
        p = _write_csv(out_dir / name, rows)
        if p:
            tables.files.append(p)
    (out_dir / "report.txt").write_text(render_text(tables) + "\n")
    tables.files.append(out_dir / "report.txt")
    if plots:
        tables.files.extend(_plots(tables, metrics, out_dir))
    return tables
