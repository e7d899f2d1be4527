"""Command-line entry point: ``backdoor-excl {train,excl,nc,strip,eval,report}``."""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError
from .exclusivity import ObjectiveMode
from .experiment import ExperimentConfig, stage_eval, stage_excl, stage_nc, stage_strip, stage_train
from .report import build_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="backdoor-excl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", help="experiment config (YAML or JSON); desk defaults if omitted")
        sp.add_argument("--out", help="output directory (overrides config and environment)")
        sp.add_argument("--seed", type=int, help="override the global seed")
        if checkpoint:
            sp.add_argument("--checkpoint", help="model checkpoint; defaults to <out>/checkpoint.npz")

    common(sub.add_parser("train", help="build the poisoned set and train a model"), checkpoint=False)
    sp = sub.add_parser("excl", help="measure backdoor exclusivity")
    common(sp)
    sp.add_argument("--mode", choices=[m.value for m in ObjectiveMode], help="objective mode")
    common(sub.add_parser("nc", help="Neural Cleanse scan"))
    common(sub.add_parser("strip", help="STRIP entropy scan"))
    common(sub.add_parser("eval", help="clean accuracy and attack success rate"))
    sp = sub.add_parser("report", help="merge run directories into tables and plots")
    sp.add_argument("runs", nargs="*", help="run directories holding run.json")
    sp.add_argument("--out", required=True, help="directory for report files")
    return p


def _config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _print(doc):
    print(json.dumps(doc, indent=1, sort_keys=True, default=str))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            table = build_report(args.runs, args.out)
            _print({"runs": len(table), "out": args.out})
            return EXIT_OK
        cfg = _config(args)
        out = args.out or cfg.output_dir
        if args.command == "train":
            rec, _, _ = stage_train(cfg, out)
        elif args.command == "eval":
            rec, _ = stage_eval(cfg, args.checkpoint, out)
        elif args.command == "excl":
            rec, _ = stage_excl(cfg, args.checkpoint, out, args.mode)
        elif args.command == "nc":
            rec, _ = stage_nc(cfg, args.checkpoint, out)
        else:
            rec, _ = stage_strip(cfg, args.checkpoint, out)
        _print(rec.summary())
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
