"""``ima-bss`` command line: run, validate and list experiments."""
from __future__ import annotations

import argparse
import sys

from .errors import ConfigError
from .harness import ExperimentFailed, list_experiments, load_config, run_experiment, validate

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers, e.g. 0,1,2") from None


def _describe(path, exc: ConfigError) -> str:
    where = f"{path}:{exc.line}" if exc.line is not None else str(path)
    return f"{where}: error: {exc}"


def _load(path, seeds=None):
    raw, text = load_config(path)
    if seeds is not None:
        raw["seeds"] = seeds
    return validate(raw, text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ima-bss", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("path")
    r.add_argument("--out", default=None, help="output directory (default: config output_dir or ./results)")
    r.add_argument("--seeds-override", type=_seeds, default=None, metavar="S1,S2,...")
    r.add_argument("--threads", type=int, default=None, help="worker threads (default: $IMA_BSS_THREADS or 1)")

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("path")

    sub.add_parser("list-experiments", help="list the available experiment kinds")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-experiments":
        print(list_experiments())
        return EXIT_OK
    try:
        cfg = _load(args.path, getattr(args, "seeds_override", None))
    except ConfigError as exc:
        print(_describe(args.path, exc), file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"{args.path}: ok ({cfg['kind']}, {len(cfg['seeds'])} seed(s))")
        return EXIT_OK

    out = args.out or cfg.get("output_dir") or "results"
    try:
        report = run_experiment(cfg, out, args.threads)
    except ExperimentFailed as exc:
        done = exc.report["n_completed"]
        print(f"run failed after {done}/{exc.report['n_tasks']} task(s): {exc}; partial results in {out}",
              file=sys.stderr)
        return EXIT_FAILED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{cfg['kind']}: {report['n_completed']} task(s) in {report['wall_clock_seconds']:.1f}s -> {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
