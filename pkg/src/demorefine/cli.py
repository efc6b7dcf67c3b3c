"""Command-line entry point: ``demorefine <command> [options]``.

Exit codes: 0 success, 2 bad config or arguments, 3 artifact mismatch,
4 runtime failure (missing artifacts, divergence, expert failure).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import harness
from .demonstrator import ExpertFailure
from .policy import PolicyError, TrainingDiverged
from .tinynet import NetError

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("demorefine")


def _r_arg(text: str):
    if text == "auto":
        return "auto"
    try:
        r = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--r expects a number in [0, 1] or 'auto', got {text!r}") from None
    if not (0.0 <= r <= 1.0):
        raise argparse.ArgumentTypeError(f"--r must lie in [0, 1], got {r}")
    return r


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demorefine", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", type=Path, help="YAML config (defaults used when omitted)")
        sp.add_argument("--seed", type=int, help="override the root seed")
        if out:
            sp.add_argument("--out", type=Path, default=Path("runs/default"), help="artifact directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("gen-data", help="generate the robot expert dataset"))
    common(sub.add_parser("train", help="train the diffusion policy"))
    common(sub.add_parser("demo", help="generate evaluation hand demonstrations"))
    ev = common(sub.add_parser("eval", help="evaluate one noise level"))
    ev.add_argument("--r", type=_r_arg, default=0.2, help="noise level in [0, 1] or 'auto'")
    for name, text in (("sweep", "evaluate every r in r_grid"), ("ablate", "robustness ablations")):
        sp = common(sub.add_parser(name, help=text))
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    ev.add_argument("--jobs", type=int, default=1, help="worker processes")
    pd = common(sub.add_parser("plot-data", help="extract task,r,mean,std from a sweep CSV"), out=False)
    pd.add_argument("csv", type=Path)
    pd.add_argument("--out", type=Path, help="write here instead of stdout")
    return p


def _load(args) -> harness.BenchmarkConfig:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _emit(rows, dest: Path | None, header):
    if dest is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    else:
        dest.parent.mkdir(parents=True, exist_ok=True)
        with open(dest, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


def run(args) -> int:
    if args.command == "plot-data":
        rows = harness.plot_data(args.csv)
        _emit(rows, args.out, ["task", "r", "mean", "std"])
        return EXIT_OK
    cfg = _load(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    jobs = getattr(args, "jobs", 1)
    if jobs < 1:
        raise harness.ConfigError("--jobs must be >= 1")
    results = out / cfg.paths.results
    if args.command == "gen-data":
        print(harness.gen_data(cfg, out))
    elif args.command == "train":
        print(harness.train(cfg, out, progress=lambda it, loss: log.info("iter %d loss %.4f", it, loss)))
    elif args.command == "demo":
        print(harness.make_demos(cfg, out))
    elif args.command == "eval":
        rows = harness.evaluate(cfg, out, args.r, jobs)
        tag = "auto" if args.r == "auto" else harness.fmt_r(args.r)
        path = results / f"eval_r{tag}.csv"
        harness.write_csv(path, rows)
        print(path)
    elif args.command == "sweep":
        path = results / "sweep.csv"
        harness.write_csv(path, harness.sweep(cfg, out, jobs))
        print(path)
    elif args.command == "ablate":
        path = results / "ablation.csv"
        harness.write_csv(path, harness.ablate(cfg, out, jobs))
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (harness.ArtifactMismatch, NetError) as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FileNotFoundError, PolicyError, TrainingDiverged, ExpertFailure, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
