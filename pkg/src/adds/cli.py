"""Command line entry point: ``run``, ``compare`` and ``validate``.

Log verbosity comes from the ``ADDS_LOG_LEVEL`` environment variable
(default ``WARNING``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, serialize
from .errors import ConfigError, InvalidInputError
from .server import Experiment, RoundReport

log = logging.getLogger("adds")

FIXED_COLUMNS = ["round", "global_acc", "global_loss", "mean_local_acc", "std_local_acc", "mean_params_ratio", "mean_flops_ratio"]
SUMMARY_METRICS = ["global_acc", "mean_local_acc", "mean_params_ratio", "mean_flops_ratio"]


def metrics_header(num_layers: int) -> list[str]:
    return FIXED_COLUMNS + [f"mean_alpha_l{k + 1}" for k in range(num_layers)] + ["epsilon", "participants"]


def _num(x: float) -> str:
    return format(float(x), ".10g")


def metrics_row(report: RoundReport) -> list[str]:
    return (
        [str(report.round)]
        + [_num(getattr(report, c)) for c in FIXED_COLUMNS[1:]]
        + [_num(a) for a in report.mean_alpha]
        + [_num(report.epsilon), " ".join(str(i) for i in report.participants)]
    )


def run(cfg: ExperimentConfig, out_dir) -> dict:
    """Run an experiment, writing ``metrics.csv``, ``config.ini`` and ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize(cfg), encoding="utf-8")
    ex = Experiment(cfg)
    last = None
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(len(cfg.model.hidden)))
        for report in ex.run():
            writer.writerow(metrics_row(report))
            fh.flush()
            last = report
    summary = {
        "algorithm": cfg.algorithm,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "final": None if last is None else {m: getattr(last, m) for m in SUMMARY_METRICS},
        "clients": {
            str(cid): {
                "jsd": state.jsd,
                "lambda": state.lam,
                "train_samples": len(state.train),
                **({k: ex.last_update[cid][k] for k in ("alpha", "params_ratio", "flops_ratio", "local_acc", "round")} if cid in ex.last_update else {}),
            }
            for cid, state in sorted(ex.fed.clients.items())
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def read_metrics(path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path}: empty metrics file")
        header = list(reader.fieldnames)
        missing = [c for c in FIXED_COLUMNS if c not in header]
        if missing:
            raise ConfigError(f"{path}: missing columns {', '.join(missing)}")
        return header, list(reader)


def rounds_to_target(rows, target: float, metric: str = "global_acc"):
    """First round whose ``metric`` reaches ``target``, or None."""
    for row in rows:
        if float(row[metric]) >= target:
            return int(row["round"])
    return None


def compare(path_a, path_b, targets=(), metric: str = "global_acc") -> str:
    header_a, rows_a = read_metrics(path_a)
    header_b, rows_b = read_metrics(path_b)
    if header_a != header_b:
        raise ConfigError(f"schema mismatch between {path_a} and {path_b}")
    if not rows_a or not rows_b:
        raise ConfigError("metrics file has no rounds")
    lines = [f"{'metric':<22}{'A':>12}{'B':>12}{'B - A':>12}"]
    for m in SUMMARY_METRICS:
        a, b = float(rows_a[-1][m]), float(rows_b[-1][m])
        lines.append(f"{m:<22}{a:>12.4f}{b:>12.4f}{b - a:>+12.4f}")
    if targets:
        lines.append("")
        lines.append(f"{'target ' + metric:<22}{'A':>12}{'B':>12}{'speedup':>12}")
        for t in targets:
            ra, rb = rounds_to_target(rows_a, t, metric), rounds_to_target(rows_b, t, metric)
            speed = f"{ra / rb:.2f}x" if ra and rb else "n/a"
            fmt = lambda r: "not reached" if r is None else str(r)
            lines.append(f"{t:<22g}{fmt(ra):>12}{fmt(rb):>12}{speed:>12}")
    return "\n".join(lines)


def _parse_targets(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad target list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adds", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--out", help="output directory (default: [output] dir)")

    p = sub.add_parser("compare", help="compare two metrics CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--targets", type=_parse_targets, default=[])
    p.add_argument("--metric", default="global_acc")

    p = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    p.add_argument("config")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("ADDS_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            print(serialize(load_config(args.config)), end="")
        elif args.command == "compare":
            print(compare(args.a, args.b, args.targets, args.metric))
        else:
            cfg = load_config(args.config)
            overrides = {k: v for k, v in (("seed", args.seed), ("rounds", args.rounds)) if v is not None}
            if overrides:
                cfg = cfg.replace(experiment=overrides)
            out = args.out or cfg.output.dir
            summary = run(cfg, out)
            final = summary["final"]
            if final:
                print(" ".join(f"{k}={v:.4f}" for k, v in final.items()))
            print(f"wrote {Path(out) / 'metrics.csv'}")
    except (ConfigError, InvalidInputError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
