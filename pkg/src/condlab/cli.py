"""``condlab`` command line entry point."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .errors import CondlabError
from .runner import DEFAULT_PERCENTS, csv_header, load_config, probe_checkpoint, run_experiment, sweep, trace_rows
from .verify import SUITES, run_suite


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condlab", description="Layer-wise conditioning probes for MLPs.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and probe per a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)

    sw = sub.add_parser("sweep", help="run a config over several learning rates")
    sw.add_argument("--config", required=True)
    sw.add_argument("--lrs", type=_floats, default=[0.05, 0.1, 0.5, 1.0])
    sw.add_argument("--out", default=None, help="directory for per-rate traces and sweep.json")

    ver = sub.add_parser("verify", help="run a numerical self-check suite")
    ver.add_argument("--suite", required=True, choices=sorted(SUITES))

    pr = sub.add_parser("probe", help="probe a saved checkpoint on MNIST IDX data")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--kappa-p", type=_floats, default=list(DEFAULT_PERCENTS))
    pr.add_argument("--probe-batch", type=int, default=1024)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            res = run_experiment(load_config(args.config), args.out)
            print(json.dumps({"out": str(Path(args.out)), "records": len(res.records),
                              "train_loss": res.final["train_loss"], "train_error": res.final["train_error"]}))
        elif args.command == "sweep":
            summary = sweep(load_config(args.config), args.lrs, args.out)
            print(json.dumps(summary, indent=1))
            if summary["best_lr"] is None:
                return 1
        elif args.command == "verify":
            checks = run_suite(args.suite)
            for c in checks:
                print(c.line())
            return 0 if all(c.passed for c in checks) else 1
        else:
            rec = probe_checkpoint(args.checkpoint, args.data, args.kappa_p, args.probe_batch)
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(csv_header(args.kappa_p))
            w.writerows(trace_rows([rec], args.kappa_p))
            sys.stdout.write(buf.getvalue())
    except (CondlabError, FileNotFoundError) as exc:
        print(f"condlab: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
