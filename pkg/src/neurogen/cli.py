"""Command line entry point: ``neurogen train | sweep | analyze``.

``NEUROGEN_THREADS`` caps the BLAS thread pool; it must be read before numpy
loads, so the heavy imports happen inside :func:`main`.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")


def apply_thread_limit(environ=os.environ) -> None:
    threads = environ.get("NEUROGEN_THREADS")
    if not threads:
        return
    if not threads.isdigit() or int(threads) < 1:
        raise SystemExit(f"NEUROGEN_THREADS must be a positive integer, got {threads!r}")
    for var in THREAD_VARS:
        environ[var] = threads


def parse_values(text: str) -> list:
    """Comma-separated values, each parsed as JSON when possible (so ``1,2`` are ints and ``a,b`` strings)."""
    text = text.strip()
    if text.startswith("["):
        return json.loads(text)
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            out.append(json.loads(item))
        except json.JSONDecodeError:
            out.append(item)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neurogen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log growth progress")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train every seed of a config")
    train.add_argument("--config", required=True, help="JSON experiment config")
    train.add_argument("--seed", type=int, help="run only this seed")
    train.add_argument("--out", help="output directory (default: config 'out')")
    train.add_argument("--unsafe-pairing", action="store_true", help="allow non-default trigger/initializer pairs")

    sweep = sub.add_parser("sweep", help="train once per value of one config key")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--param", required=True, help="config key, dotted for nested keys (dataset.n_features)")
    sweep.add_argument("--values", required=True, help="comma-separated list or JSON array")
    sweep.add_argument("--out", help="parent output directory")
    sweep.add_argument("--unsafe-pairing", action="store_true")

    analyze = sub.add_parser("analyze", help="aggregate summary.json files into comparison.csv")
    analyze.add_argument("dir")
    return parser


def _load_raw(path: str, unsafe: bool) -> dict:
    with open(path) as fh:
        raw = json.load(fh)
    if unsafe:
        raw["unsafe_pairing"] = True
    return raw


def main(argv=None) -> int:
    apply_thread_limit()
    from neurogen import harness

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "train":
            raw = _load_raw(args.config, args.unsafe_pairing)
            if args.seed is not None:
                raw["seeds"] = [args.seed]
            cfg = harness.ExperimentConfig.from_dict(raw)
            out = args.out or cfg.out
            for r in harness.run_experiment(cfg, out):
                print(f"seed {r.seed}: test accuracy {r.test_accuracy:.4f} widths {r.final_widths} "
                      f"params {r.parameter_count} {r.train_seconds:.1f}s")
            print(f"wrote {out}")
        elif args.command == "sweep":
            base = _load_raw(args.config, args.unsafe_pairing)
            parent = args.out or base.get("out", "runs")
            for value in parse_values(args.values):
                raw = harness.set_path(base, args.param, value)
                cfg = harness.ExperimentConfig.from_dict(raw)
                out = os.path.join(parent, f"{args.param}={json.dumps(value).strip(chr(34))}")
                results = harness.run_experiment(cfg, out)
                mean = sum(r.test_accuracy for r in results) / len(results)
                print(f"{args.param}={value}: mean test accuracy {mean:.4f} over {len(results)} seeds")
            print(f"wrote {parent}")
        else:
            rows = harness.analyze(args.dir)
            print(f"{'run':40s} {'strategy':14s} {'trigger':15s} seeds  accuracy          params     seconds")
            for g in harness.aggregate(rows):
                print(f"{g['run']:40s} {g['strategy']:14s} {g['trigger']:15s} {g['seeds']:5d}  "
                      f"{g['accuracy_mean']:.4f}±{g['accuracy_std']:.4f}  {g['parameters_mean']:9.0f}  "
                      f"{g['seconds_mean']:8.1f}")
            print(f"wrote {os.path.join(args.dir, 'comparison.csv')}")
    except (harness.ConfigError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
