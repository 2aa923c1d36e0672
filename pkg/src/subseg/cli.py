"""``subseg`` command-line driver.

Exit status: 0 success, 1 validation error (arguments, config), 2 data error
(missing or malformed inputs).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from subseg import pipeline
from subseg.config import PipelineConfig, parse_config
from subseg.errors import SubsegError, ValidationError
from subseg.metrics import compare_runs, report_text

COMMANDS = ("convert", "subtract", "slice", "split", "predict", "fuse", "evaluate", "compare", "phantom", "run")
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="subseg", description="Image-subtraction tumour segmentation pipeline.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("runs", nargs="*", help="compare: two run directories or report files")
    parser.add_argument("--config", type=Path, help="key = value configuration file")
    parser.add_argument("--dataset", type=Path, help="override dataset_root")
    parser.add_argument("--out", type=Path, help="override output_root")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int, help="worker count, 0 = all cores")
    parser.add_argument("--skip-empty", action="store_true", help="drop tumour-free slices when slicing")
    parser.add_argument("--group-by-case", action="store_true", help="split by case instead of by slice")
    parser.add_argument("--stream", default="fused", choices=("t1", "t2", "fused"), help="evaluate/compare stream")
    parser.add_argument("--labels", nargs=2, metavar=("A", "B"), help="compare: row labels")
    parser.add_argument("--cases", type=int, help="phantom: number of cases")
    return parser


def load_config(args) -> PipelineConfig:
    cfg = parse_config(args.config) if args.config else PipelineConfig()
    updates = {}
    if args.dataset is not None:
        updates["dataset_root"] = args.dataset.resolve()
    if args.out is not None:
        updates["output_root"] = args.out.resolve()
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.threads is not None:
        updates["threads"] = args.threads
    if args.skip_empty:
        updates["skip_empty"] = True
    if args.group_by_case:
        updates["group_by_case"] = True
    if args.cases is not None:
        updates["phantom_cases"] = args.cases
    return dataclasses.replace(cfg, **updates).validate()


def _summary(report) -> str:
    return report_text(report, per_slice=False)


def run_command(command: str, cfg: PipelineConfig, args) -> int:
    if command == "convert":
        print(f"converted {len(pipeline.run_convert(cfg))} cases")
    elif command == "subtract":
        print(f"built streams for {len(pipeline.run_subtract(cfg))} cases ({cfg.source})")
    elif command == "slice":
        print(f"{pipeline.run_slice(cfg)} slices")
    elif command == "split":
        sizes = pipeline.run_split(cfg).sizes()
        print(" ".join(f"{k.value}={v}" for k, v in sizes.items()))
    elif command == "predict":
        print(f"{pipeline.run_predict(cfg)} predictions")
    elif command == "fuse":
        print(f"{pipeline.run_fuse(cfg)} fused slices ({cfg.fusion.kind})")
    elif command == "evaluate":
        sys.stdout.write(_summary(pipeline.run_evaluate(cfg, args.stream)))
    elif command == "compare":
        if len(args.runs) != 2:
            raise ValidationError("compare needs exactly two runs")
        a, b = (pipeline.load_run_report(r, args.stream) for r in args.runs)
        labels = args.labels or [Path(r).name for r in args.runs]
        sys.stdout.write(compare_runs(a, b, labels).format())
    elif command == "phantom":
        ids = pipeline.run_phantom(cfg)
        print(f"wrote {len(ids)} phantom cases to {cfg.dataset_root}")
    elif command == "run":
        sys.stdout.write(_summary(pipeline.run_all(cfg)))
    return 0


def main(argv=None) -> int:
    level = LOG_LEVELS.get(os.environ.get("SUBSEG_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.runs and args.command != "compare":
        parser.error(f"unexpected arguments: {' '.join(args.runs)}")
    try:
        cfg = load_config(args)
        return run_command(args.command, cfg, args)
    except SubsegError as exc:
        print(f"subseg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"subseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
