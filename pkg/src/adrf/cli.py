"""Command-line entry point: ``adrf <stage> [--config PATH] [--seed N] [--out DIR] [--scale desk|paper]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from adrf import stages
from adrf.config import SCALES, ConfigError, load_config

DESCRIPTIONS = {
    "datagen": "generate the synthetic corpus under OUT/corpus",
    "train-imu": "train the IMU autoencoder and forecaster",
    "train-vision": "pretrain the codec, train the forecaster, run adversarial fine-tuning",
    "calibrate": "fit error distributions on held-out normals and write the five thresholds",
    "infer": "stream the test scenarios through the detectors and write flag events",
    "eval": "score the flag events against ground truth",
    "report": "evaluation table, CSV, error histograms and annotations under OUT/report",
    "all": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="INI file overriding the scale defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("adrf-run"), help="artifact directory")
    common.add_argument("--scale", choices=SCALES, default="desk")
    common.add_argument("-v", "--verbose", action="count", default=0)
    parser = argparse.ArgumentParser(prog="adrf", description="IMU and camera anomaly detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, text in DESCRIPTIONS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.scale)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "all":
            result = stages.run_all(cfg, args.seed, args.out)
        else:
            result = stages.RUNNERS[args.command](cfg, args.seed, args.out)
    except ConfigError as exc:
        print(f"adrf: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # every module error maps to a nonzero exit
        if args.verbose:
            raise
        print(f"adrf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if args.command in ("report", "all"):
        report_dir = args.out / "report"
        print((report_dir / "report.txt").read_text())
    elif args.command == "eval":
        print(stages.pipeline.report_table(result["final"]), end="")
    elif args.command == "calibrate":
        for row in stages.read_calibration(args.out):
            print(f"{row['key']} = {row['threshold']!r}  ({row['family']})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
