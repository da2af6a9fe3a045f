"""Command-line driver: ``hdprior [--config PATH] [--seed N] [--out DIR] <command>``."""

import argparse
import dataclasses
import logging
import sys

from . import pipeline
from .config import PipelineConfig
from .errors import FormatError, ParameterError, StateError, TrainingError

COMMANDS = ("synth", "estimate", "partition", "train", "finetune", "analyze", "sweep")

logger = logging.getLogger("hdprior")


def build_parser():
    ap = argparse.ArgumentParser(prog="hdprior", description=__doc__.split("\n")[0])
    ap.add_argument("--config", metavar="PATH", help="key = value config file")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--out", metavar="DIR", default="run", help="workspace directory (default: run)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "estimate":
            p.add_argument("--input", metavar="DIR",
                           help="directory of .ppm images (default: OUT/corpus/degraded)")
        if name == "sweep":
            p.add_argument("--thresholds", help="comma-separated T values overriding the config")
    return ap


def load_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "thresholds", None):
        ts = tuple(float(t) for t in args.thresholds.split(",") if t.strip())
        cfg = dataclasses.replace(cfg, sweep=dataclasses.replace(cfg.sweep, thresholds=ts))
    return cfg


def _report(command, result):
    if command == "synth":
        print(f"synth: {result} images")
    elif command == "partition":
        print("partition: " + " ".join(f"{k}={v}" for k, v in result.items()))
    elif command == "train":
        m = result.metrics
        print(f"train: smoothed loss {m['smoothed_initial']:.4g} -> {m['smoothed_final']:.4g}")
    elif command == "finetune":
        for r, (a, b, _, _) in enumerate(result):
            print(f"finetune rep {r}: held-out accuracy {a.metrics['held_out_accuracy']:.3f} "
                  f"(zero-residual control {b.metrics['held_out_accuracy']:.3f})")
    elif command == "analyze":
        gap, null95 = result
        print(f"analyze: MMD HD_u-HD_f {gap.mmd_hd_u_f:.4g}, HD_tu-HD_f {gap.mmd_hd_tu_f:.4g}, "
              f"gap reduced {'yes' if gap.gap_reduced else 'no'}, null95 {null95:.4g}")
    elif command == "sweep":
        print(pipeline.format_sweep(result), end="")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        fn = getattr(pipeline, f"cmd_{args.command}")
        if args.command == "estimate":
            errors = fn(cfg, args.out, args.input)
            for name, msg in errors:
                print(f"error: {name}: {msg}", file=sys.stderr)
            print(f"estimate: {len(errors)} file(s) failed" if errors else "estimate: ok")
            return 1 if errors else 0
        _report(args.command, fn(cfg, args.out))
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParameterError, FormatError, StateError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
