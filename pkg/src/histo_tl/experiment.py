"""Prepare and run stages of the task x backbone experiment matrix.

Results layout, one directory per run::

    <results_dir>/manifest.csv
    <results_dir>/split.json
    <results_dir>/<task>__<backbone>__seed<k>/
        run.json  history.csv  checkpoint.pt  metrics.json  confusion.csv
        roc.csv  plots/roc.png          (roc files for binary tasks only)
"""

from __future__ import annotations

import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentPlan
from .data_manifest import (
    PARTITIONS,
    DatasetManifest,
    SplitAssignment,
    TaskSpec,
    derive_task,
    load_manifest,
    split_dataset,
    write_manifest_csv,
)
from .errors import ConfigurationError, IngestionError
from .metrics import confusion, report, roc, write_metrics_json
from .model_zoo import build_model
from .pipeline import BatchStream
from .trainer import TrainRunRecord, predict, train

log = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.csv"
SPLIT_FILE = "split.json"


@dataclass
class PrepareResult:
    manifest: DatasetManifest
    split: SplitAssignment
    manifest_path: Path
    split_path: Path

    def summary(self) -> str:
        counts = self.manifest.class_counts
        sizes = self.split.sizes()
        lines = [
            f"tiles: {self.manifest.total}",
            "classes: " + ", ".join(f"{c.name}={n}" for c, n in counts.items()),
            "partitions: " + ", ".join(f"{p}={sizes[p]}" for p in PARTITIONS),
            f"manifest: {self.manifest_path}",
            f"split: {self.split_path}",
        ]
        return "\n".join(lines)


def prepare(plan: ExperimentPlan, results_dir: Path) -> PrepareResult:
    root = plan.dataset_path()
    if not root.exists():
        raise IngestionError(f"dataset root does not exist: {root}")
    manifest = load_manifest(root, plan.layout, plan.expected_tile_size)
    split = split_dataset(manifest, plan.ratios, plan.split_seed, plan.group_by_wsi)
    results_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = write_manifest_csv(manifest, results_dir / MANIFEST_FILE)
    split_path = split.save(results_dir / SPLIT_FILE)
    return PrepareResult(manifest, split, manifest_path, split_path)


def load_prepared(plan: ExperimentPlan, results_dir: Path) -> tuple[DatasetManifest, SplitAssignment]:
    mpath, spath = results_dir / MANIFEST_FILE, results_dir / SPLIT_FILE
    if not mpath.is_file() or not spath.is_file():
        raise IngestionError(f"{results_dir} has no {MANIFEST_FILE}/{SPLIT_FILE}; run 'prepare' first")
    manifest = load_manifest(mpath, "csv_manifest", plan.expected_tile_size)
    return manifest, SplitAssignment.load(spath)


def is_complete(run_dir: Path) -> bool:
    run_json = run_dir / "run.json"
    if not run_json.is_file() or not (run_dir / "metrics.json").is_file():
        return False
    try:
        return json.loads(run_json.read_text()).get("stop_reason") in ("early_stop", "max_epochs")
    except (OSError, ValueError):
        return False


def _plot_roc(curve, title: str, path: Path) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib unavailable; skipping %s", path)
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(curve.fpr, curve.tpr, label=f"AUC = {curve.auc:.2f}")
    ax.plot([0, 1], [0, 1], ls="--", c="grey", lw=0.8)
    ax.set(xlabel="False positive rate", ylabel="True positive rate", title=title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def execute_run(
    plan: ExperimentPlan,
    manifest: DatasetManifest,
    split: SplitAssignment,
    task_name: str,
    backbone: str,
    results_dir: Path,
) -> TrainRunRecord:
    """Train and evaluate one matrix cell, writing every artefact to its run dir."""
    run_id = plan.run_id(task_name, backbone)
    run_dir = results_dir / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    task = TaskSpec.named(task_name)
    data = derive_task(manifest, split, task)
    model_cfg = plan.model_config(task_name, backbone)
    size = model_cfg.input_size[0]
    bs = plan.train.batch_sizes
    streams = {
        "train": BatchStream(data.train, bs["train"], "train", plan.augment, size, task.n_classes, plan.cache_images),
        "val": BatchStream(data.val, bs["val"], "eval", None, size, task.n_classes, plan.cache_images),
        "test": BatchStream(data.test, bs["test"], "eval", None, size, task.n_classes),
    }
    model = build_model(model_cfg, seed=plan.train.seed)
    record = train(model, streams["train"], streams["val"], plan.train, run_id, task_name, run_dir)
    if record.stop_reason == "error":
        return record

    probs, pred, true = predict(model, streams["test"])
    cm = confusion(true, pred, task.n_classes, task.class_names)
    rep = report(cm)
    extra = {
        "run_id": run_id,
        "task": task_name,
        "backbone": backbone,
        "class_names": task.class_names,
        "split_sizes": {p: len(data.partition(p)) for p in PARTITIONS},
    }
    cm.to_csv(run_dir / "confusion.csv")
    if task.is_binary:
        curve = roc(probs[:, task.positive_class], true, task.positive_class)
        curve.to_csv(run_dir / "roc.csv")
        extra["auc"] = curve.auc
        extra["roc_positive_class"] = task.positive_class
        _plot_roc(curve, f"{task_name} ({backbone})", run_dir / "plots" / "roc.png")
    write_metrics_json(run_dir / "metrics.json", rep, extra)
    return record


def _error_record(plan, task_name, backbone, results_dir, exc) -> TrainRunRecord:
    run_id = plan.run_id(task_name, backbone)
    model_cfg = plan.model_config(task_name, backbone)
    record = TrainRunRecord(
        run_id=run_id,
        task=task_name,
        model_config=model_cfg.to_dict(),
        train_config=plan.train.to_dict(),
        augment_config=plan.augment.to_dict(),
        epoch_history=[],
        stop_reason="error",
        checkpoint_path=None,
        wall_clock_seconds=0.0,
        error=f"{type(exc).__name__}: {exc}",
    )
    record.save(results_dir / run_id)
    return record


def _run_cell(plan, task_name, backbone, results_dir) -> tuple[str, str]:
    """Worker entry point; never raises."""
    run_id = plan.run_id(task_name, backbone)
    try:
        manifest, split = load_prepared(plan, results_dir)
        rec = execute_run(plan, manifest, split, task_name, backbone, results_dir)
        return run_id, rec.stop_reason
    except Exception as exc:  # noqa: BLE001 - one failed cell must not stop the matrix
        log.error("run %s failed: %s\n%s", run_id, exc, traceback.format_exc())
        try:
            _error_record(plan, task_name, backbone, results_dir, exc)
        except Exception:  # noqa: BLE001
            pass
        return run_id, "error"


@dataclass
class RunSummary:
    trained: list[str]
    skipped: list[str]
    failed: list[str]

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


def run_matrix(
    plan: ExperimentPlan,
    results_dir: Path,
    tasks=None,
    backbones=None,
    force: bool = False,
    parallel: int = 1,
) -> RunSummary:
    # fail fast (exit 2) when prepare has not been run
    load_prepared(plan, results_dir)
    cells = [
        (t, b)
        for t, b in plan.cells()
        if (not tasks or t in tasks) and (not backbones or b in backbones)
    ]
    todo, skipped = [], []
    for t, b in cells:
        if not force and is_complete(results_dir / plan.run_id(t, b)):
            skipped.append(plan.run_id(t, b))
        else:
            todo.append((t, b))

    outcomes: list[tuple[str, str]] = []
    if parallel > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_run_cell, plan, t, b, results_dir) for t, b in todo]
            outcomes = [f.result() for f in futures]
    else:
        for t, b in todo:
            start = time.perf_counter()
            outcomes.append(_run_cell(plan, t, b, results_dir))
            log.info("%s finished in %.1fs", outcomes[-1][0], time.perf_counter() - start)
    failed = [rid for rid, reason in outcomes if reason == "error"]
    trained = [rid for rid, reason in outcomes if reason != "error"]
    return RunSummary(trained, skipped, failed)


def select_cells(plan: ExperimentPlan, tasks, backbones) -> None:
    unknown = [t for t in tasks or () if t not in plan.tasks]
    if unknown:
        raise ConfigurationError(f"task(s) not in plan: {', '.join(unknown)}")
    unknown = [b for b in backbones or () if b not in plan.backbones]
    if unknown:
        raise ConfigurationError(f"backbone(s) not in plan: {', '.join(unknown)}")
