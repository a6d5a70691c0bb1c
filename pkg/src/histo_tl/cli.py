"""``histo-tl`` command line: prepare / run / report / inspect.

Exit status: 0 success, 1 some runs failed or are missing, 2 configuration
or dataset error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import RESULTS_ENV, ExperimentPlan
from .errors import ConfigurationError, HistoTLError
from .experiment import prepare, run_matrix, select_cells
from .reporting import write_report

log = logging.getLogger("histo_tl")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="experiment INI file")
    parser.add_argument("--results-dir", default=default, help=f"results directory (fallback: ${RESULTS_ENV})")
    parser.add_argument("--seed", type=int, default=default, help="override the training/augmentation seed")
    parser.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="retrain runs that already completed")
    parser.add_argument("--parallel", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="number of runs executed concurrently")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histo-tl", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build manifest.csv and split.json")
    _global_flags(p, suppress=True)

    p = sub.add_parser("run", help="train and evaluate the task x backbone matrix")
    _global_flags(p, suppress=True)
    p.add_argument("--task", default="", help="comma-separated task filter")
    p.add_argument("--model", default="", help="comma-separated backbone filter")

    p = sub.add_parser("report", help="comparison tables and plots from finished runs")
    _global_flags(p, suppress=True)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("inspect", help="summarise one run")
    _global_flags(p, suppress=True)
    p.add_argument("run_id")
    return parser


def _load_plan(args) -> ExperimentPlan:
    if not args.config:
        raise ConfigurationError("--config is required for this command")
    plan = ExperimentPlan.load(args.config)
    if args.seed is not None:
        plan = plan.with_seed(args.seed)
    return plan


def _results_dir(args, plan: ExperimentPlan | None) -> Path:
    if plan is not None:
        return plan.resolve_results_dir(args.results_dir)
    return Path(args.results_dir or os.environ.get(RESULTS_ENV) or "results")


def cmd_prepare(args) -> int:
    plan = _load_plan(args)
    result = prepare(plan, _results_dir(args, plan))
    print(result.summary())
    return EXIT_OK


def cmd_run(args) -> int:
    plan = _load_plan(args)
    tasks = [t.strip() for t in args.task.split(",") if t.strip()]
    models = [m.strip() for m in args.model.split(",") if m.strip()]
    select_cells(plan, tasks, models)
    summary = run_matrix(plan, _results_dir(args, plan), tasks, models, args.force, args.parallel)
    print(f"trained: {len(summary.trained)}  skipped: {len(summary.skipped)}  failed: {len(summary.failed)}")
    for rid in summary.trained:
        print(f"  done     {rid}")
    for rid in summary.skipped:
        print(f"  skipped  {rid}")
    for rid in summary.failed:
        print(f"  FAILED   {rid}")
    return summary.exit_code


def cmd_report(args) -> int:
    plan = _load_plan(args) if args.config else None
    results_dir = _results_dir(args, plan)
    if not results_dir.is_dir():
        raise ConfigurationError(f"results directory not found: {results_dir}")
    if plan is not None:
        tables = write_report(results_dir, plan.tasks, plan.backbones, plan.run_id, plots=not args.no_plots)
    else:
        tables = write_report(results_dir, plots=not args.no_plots)
    if tables.populated_cells == 0:
        print(f"no completed runs in {results_dir}", file=sys.stderr)
        return EXIT_CONFIG
    from .reporting import render_text

    print(render_text(tables))
    print(f"\nwrote {len(tables.files)} file(s) to {results_dir / 'report'}")
    return EXIT_PARTIAL if tables.missing else EXIT_OK


def cmd_inspect(args) -> int:
    plan = _load_plan(args) if args.config else None
    run_dir = _results_dir(args, plan) / args.run_id
    run_json = run_dir / "run.json"
    if not run_json.is_file():
        raise ConfigurationError(f"no run.json for {args.run_id} in {run_dir.parent}")
    rec = json.loads(run_json.read_text())
    hist = rec.get("epoch_history", [])
    print(f"run:          {rec['run_id']}")
    print(f"task:         {rec['task']}")
    print(f"backbone:     {rec['model_config']['backbone']}")
    print(f"stop reason:  {rec['stop_reason']}" + (f" ({rec['error']})" if rec.get("error") else ""))
    print(f"epochs:       {len(hist)}")
    if hist:
        last = hist[-1]
        print(f"last epoch:   train_acc={last['train_acc']:.4f} val_acc={last['val_acc']:.4f}")
    if rec.get("best_epoch"):
        print(f"best epoch:   {rec['best_epoch']} (val_acc={rec['best_val_acc']:.4f})")
    print(f"wall clock:   {rec['wall_clock_seconds']:.1f}s")
    mpath = run_dir / "metrics.json"
    if mpath.is_file():
        m = json.loads(mpath.read_text())
        w = m["weighted"]
        print(f"test acc:     {m['accuracy']:.4f}")
        print(f"weighted:     P={w['precision']:.2f} R={w['recall']:.2f} F1={w['f1']:.2f}")
        if "auc" in m:
            print(f"AUC:          {m['auc']:.4f}")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "run": cmd_run, "report": cmd_report, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except HistoTLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
