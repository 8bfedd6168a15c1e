"""Command-line entry point: ``wdtmd <subcommand> [options] [--section.key=value ...]``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Failures print one line ``error: <category>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import PRESETS, build_config, parse_value
from .errors import ConfigError, WDTError

log = logging.getLogger("wdtmd")

SUBCOMMANDS = ("synth", "synth-targets", "train", "infer", "eval", "report")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"time": round(record.created, 3), "level": record.levelname,
                           "logger": record.name, "msg": record.getMessage()})


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS),
                        help="base configuration (default: desk)")
    common.add_argument("--config", action="append", default=[], metavar="FILE",
                        help="config file of 'section.key = value' lines; repeatable, later files win")
    common.add_argument("--workers", type=int, default=None, help="parallel workers for loading and scoring")
    common.add_argument("--run-name", dest="run_name", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="wdtmd", description="Wavelet diffusion microaneurysm detection.",
                     epilog="Any config key can be set as --section.key=value, e.g. --train.epochs=10.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--out", default=None, help="output directory (default: data.root)")
    sub.add_parser("synth-targets", parents=[common], help="inpaint pseudo-normal training targets")
    sub.add_parser("train", parents=[common], help="train the denoiser")
    p = sub.add_parser("infer", parents=[common], help="reconstruct a split with the best checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    sub.add_parser("eval", parents=[common], help="detection metrics on the test split")
    p = sub.add_parser("report", parents=[common], help="figures and summary for a run")
    p.add_argument("--sweep", nargs="*", default=None, metavar="RUN_DIR",
                   help="extra run directories for the delta_max sweep (default: siblings of the run)")
    return parser


def split_overrides(rest: list[str]) -> dict:
    out = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise _UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(rest) or rest[i + 1].startswith("--"):
                raise _UsageError(f"missing value for --{key}")
            i += 1
            val = rest[i]
        out[key.replace("-", "_") if "." not in key else key] = parse_value(val)
        i += 1
    return out


def _setup_logging(run_dir: Path | None, verbose: bool):
    root = logging.getLogger("wdtmd")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.INFO if verbose else logging.WARNING)
    err.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(err)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(run_dir / "log.jsonl")
        fh.setFormatter(_JsonFormatter())
        root.addHandler(fh)


def _dispatch(args, cfg) -> int:
    from . import pipeline
    from .report import report

    run_dir = cfg.run_dir()
    _setup_logging(run_dir, args.verbose)
    with pipeline.RunLock(run_dir):
        t0 = time.time()
        log.info("%s: run directory %s", args.command, run_dir)
        if args.command == "synth":
            out = Path(args.out) if args.out else None
            if out is not None:
                cfg.data.root = str(out)
            manifest = pipeline.make_corpus(cfg, out)
            print(manifest)
        elif args.command == "synth-targets":
            ids = pipeline.make_targets(cfg)
            print(f"{len(ids)} pseudo-normal targets written")
        elif args.command == "train":
            res = pipeline.train_run(cfg, run_dir)
            print(f"best epoch {res.best_epoch}, validation pixel AUC {res.best_auc}")
        elif args.command == "infer":
            ids = pipeline.infer_run(cfg, run_dir, args.split)
            print(f"{len(ids)} reconstructions written to {run_dir / 'recon'}")
        elif args.command == "eval":
            m = pipeline.eval_run(cfg, run_dir)
            print(f"pixel AUC {m['pixel']['auc']}, image AUC {m['image']['auc']}")
        elif args.command == "report":
            sweep = [Path(p) for p in args.sweep] if args.sweep is not None else None
            for path in report(run_dir, sweep):
                print(path)
        pipeline.write_run_records(cfg, run_dir)
        log.info("%s finished in %.1fs", args.command, time.time() - t0)
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_help()
            return 2
        overrides = split_overrides(rest)
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.run_name is not None:
            overrides["run_name"] = args.run_name
        cfg = build_config(args.preset, args.config, overrides)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except _UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    try:
        return _dispatch(args, cfg)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except WDTError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
