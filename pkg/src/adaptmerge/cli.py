"""``adaptmerge`` command line: run | flops | plot | eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .metrics import (SpecError, dynamic_inference_cost, flops_of, load_arch, parse_input_size,
                      read_confusion_csv, read_metrics_csv, write_flops_report)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
OUT_ENV = "ADAPTMERGE_OUT"

log = logging.getLogger("adaptmerge")


class UsageError(Exception):
    pass


def _default_out(stem: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / stem


def _check_out(out: Path, overwrite: bool):
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not overwrite:
        raise UsageError(f"{out} exists and is not empty; pass --overwrite to replace its contents")


# --- run ------------------------------------------------------------------

def cmd_run(args) -> int:
    from .pipeline import run_experiment

    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = load_config(path)
        if args.seed is not None:
            cfg.seed = args.seed
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out) if args.out else _default_out(f"{path.stem}-seed{cfg.seed}")
    _check_out(out, args.overwrite)
    report = run_experiment(cfg, out, overwrite=True)
    print(f"{cfg.method} ({cfg.order}) seed {cfg.seed}: average accuracy {report.average_accuracy:.2f}, "
          f"last {report.last_accuracy:.2f}")
    print(f"run directory: {out}")
    return EXIT_OK


# --- flops ----------------------------------------------------------------

def format_flops_table(report) -> str:
    rows = [f"{'#':>3}  {'layer':<22} {'kind':<7} {'output':<16} {'MACs':>15} {'params':>11}"]
    for r in report.layers:
        shape = "x".join(str(s) for s in r.output_shape)
        rows.append(f"{r.index:>3}  {r.name:<22} {r.kind:<7} {shape:<16} {r.macs:>15,} {r.params:>11,}")
    rows.append(f"total FLOPs (1 MAC = 1 FLOP): {report.total_flops:,} ({report.total_flops / 1e9:.3f} G)")
    rows.append(f"parameters: {report.total_params:,}")
    return "\n".join(rows)


def cmd_flops(args) -> int:
    try:
        specs = load_arch(args.arch)
        h, w = parse_input_size(args.input_size)
    except FileNotFoundError:
        raise UsageError(f"architecture file not found: {args.arch}") from None
    except (SpecError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if args.tasks is not None and args.tasks < 1:
        raise UsageError("--tasks must be >= 1")
    channels = args.in_channels if args.in_channels else (specs[0].in_channels or 1)
    try:
        report = flops_of(specs, (channels, h, w))
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out) if args.out else _default_out(f"flops-{Path(args.arch).stem}")
    if out.suffix != ".json":
        out = out / "flops_report.json"
    if out.exists() and not args.overwrite:
        raise UsageError(f"{out} exists; pass --overwrite to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    print(format_flops_table(report))
    if args.tasks:
        multi = dynamic_inference_cost(report, args.tasks)
        print(f"multi-pass dynamic cost after {args.tasks} tasks: {multi:,} ({multi / 1e9:.3f} G); "
              f"merged single pass: {report.total_flops:,}")
    write_flops_report(out, report, args.tasks)
    print(f"wrote {out}")
    return EXIT_OK


# --- plot -----------------------------------------------------------------

def missing_run_files(run: Path) -> list[str]:
    if not (run / "metrics.csv").is_file():
        return ["metrics.csv"]
    n = len(read_metrics_csv(run / "metrics.csv"))
    return [f"confusion_{t}.csv" for t in range(1, n + 1) if not (run / f"confusion_{t}.csv").is_file()]


def _run_label(run: Path) -> str:
    report = run / "report.json"
    if report.is_file():
        d = json.loads(report.read_text())
        label = d.get("method", run.name)
        if label == "merged-adapters":
            label += f" {d.get('order', '')}"
        return f"{label} (seed {d.get('seed', '?')})"
    return run.name


def plot_curves(runs):
    """Accuracy after each task, one line per run; values straight from metrics.csv."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for run in runs:
        rows = read_metrics_csv(Path(run) / "metrics.csv")
        ax.plot([r["task_id"] for r in rows], [r["A_i"] for r in rows], marker="o", label=_run_label(Path(run)))
    ax.set_xlabel("task")
    ax.set_ylabel("accuracy on seen classes (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def plot_confusion(path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matrix, class_ids = read_confusion_csv(path)
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(class_ids)), [str(c) for c in class_ids])
    ax.set_yticks(range(len(class_ids)), [str(c) for c in class_ids])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return fig


def cmd_plot(args) -> int:
    import matplotlib.pyplot as plt

    runs = [Path(r) for r in args.report]
    problems = []
    for run in runs:
        problems += [f"{run}: missing {name}" for name in missing_run_files(run)]
    if problems:
        raise UsageError("incomplete run directory:\n  " + "\n  ".join(problems))
    out = Path(args.out) if args.out else _default_out("plots") / "accuracy.svg"
    if out.suffix.lower() not in (".svg", ".pdf", ".eps"):
        raise UsageError("--out must name a vector file (.svg, .pdf or .eps)")
    targets = [out]
    for run in runs:
        n = len(read_metrics_csv(run / "metrics.csv"))
        prefix = f"{run.name}_" if len(runs) > 1 else ""
        targets += [out.with_name(f"{out.stem}_{prefix}confusion_{t}{out.suffix}") for t in range(1, n + 1)]
    clash = [str(p) for p in targets if p.exists()]
    if clash and not args.overwrite:
        raise UsageError(f"refusing to overwrite {', '.join(clash)}; pass --overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)

    fig = plot_curves(runs)
    fig.savefig(out)
    plt.close(fig)
    written = iter(targets[1:])
    for run in runs:
        for t in range(1, len(read_metrics_csv(run / "metrics.csv")) + 1):
            fig = plot_confusion(run / f"confusion_{t}.csv")
            fig.savefig(next(written))
            plt.close(fig)
    print(f"wrote {len(targets)} figure(s): {targets[0]} and {len(targets) - 1} confusion heatmap(s)")
    return EXIT_OK


# --- eval -----------------------------------------------------------------

def summarize_run(run: Path) -> dict:
    """Metrics of a finished run, cross-checked against its confusion matrices."""
    missing = missing_run_files(run)
    if missing:
        raise UsageError(f"{run}: missing {', '.join(missing)}")
    rows = read_metrics_csv(run / "metrics.csv")
    checks = []
    for r in rows:
        matrix, _ = read_confusion_csv(run / f"confusion_{r['task_id']}.csv")
        trace_acc = 100.0 * matrix.trace() / matrix.sum()
        checks.append(abs(trace_acc - r["A_i"]) < 1e-4)
    summary = {"run": str(run), "tasks": len(rows), "A": [r["A_i"] for r in rows],
               "average_accuracy": rows[-1]["avg_acc_so_far"], "last_accuracy": rows[-1]["A_i"],
               "confusion_consistent": all(checks)}
    flops = run / "flops_report.json"
    if flops.is_file():
        summary["single_pass_flops"] = json.loads(flops.read_text())["total_flops"]
    return summary


def cmd_eval(args) -> int:
    status = EXIT_OK
    for run in args.run:
        s = summarize_run(Path(run))
        if args.json:
            print(json.dumps(s, sort_keys=True))
        else:
            print(f"{s['run']}: {s['tasks']} tasks, average accuracy {s['average_accuracy']:.2f}, "
                  f"last {s['last_accuracy']:.2f}, confusion matrices consistent: {s['confusion_consistent']}")
        if not s["confusion_consistent"]:
            status = EXIT_FAILURE
    return status


# --- entry ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptmerge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"run directory (default ${OUT_ENV}/<config>-seed<N>)")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("flops", help="static FLOPs of an architecture file")
    p.add_argument("--arch", required=True)
    p.add_argument("--input-size", required=True, help="HxW, e.g. 224x224")
    p.add_argument("--in-channels", type=int)
    p.add_argument("--tasks", type=int, help="also report the multi-pass cost after N tasks")
    p.add_argument("--out", help="directory or .json path for flops_report.json")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("plot", help="accuracy curves and confusion heatmaps from run directories")
    p.add_argument("--report", nargs="+", required=True, metavar="DIR")
    p.add_argument("--out", help="curve figure path (.svg/.pdf/.eps)")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("eval", help="summarize and cross-check finished run directories")
    p.add_argument("--run", nargs="+", required=True, metavar="DIR")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"adaptmerge {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"adaptmerge {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
