"""Command-line entry point.

Every configuration key is also a flag: ``fed.rounds`` becomes
``--fed-rounds``. A few frequent ones have short aliases (``--mode``,
``--alpha``, ``--rounds``, ``--lr``, ``--rank``).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .errors import ConfigError, DataError, FederaError

ALIASES = {
    "adapter.mode": ["--mode"],
    "adapter.rank": ["--rank"],
    "partition.alpha": ["--alpha"],
    "fed.rounds": ["--rounds"],
    "fed.lr": ["--lr"],
}
GLOBAL_KEYS = ("seed", "out", "threads")


def flag_for(path: str) -> str:
    return "--" + path.replace(".", "-").replace("_", "-")


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides (kebab-case key paths)")
    for path, default in ex.key_paths().items():
        if path in GLOBAL_KEYS:
            continue
        shown = ",".join(map(str, default)) if isinstance(default, list) else default
        group.add_argument(flag_for(path), *ALIASES.get(path, []), dest="set:" + path, metavar="VALUE",
                           default=None, help=f"default: {shown}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config")
    common.add_argument("--seed", type=int, help="master seed (u64)")
    common.add_argument("--out", help="output root directory")
    common.add_argument("--threads", type=int, help="client worker threads per round")
    common.add_argument("-v", "--verbose", action="count", default=0)
    _add_overrides(common)

    parser = argparse.ArgumentParser(prog="federa", description="Federated PEFT simulator with SVD-initialized low-rank adapters.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the dataset")
    sub.add_parser("pretrain", parents=[common], help="centralized pretraining checkpoint")
    sub.add_parser("partition", parents=[common], help="Dirichlet client shards and JS heterogeneity")
    sub.add_parser("run", parents=[common], help="one federated run")
    p = sub.add_parser("drift", parents=[common], help="magnitude/direction drift from run snapshots")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--tensor", action="append", dest="tensors", help="tensor name (repeatable); default: all adapter tensors")
    p.add_argument("--effective", action="store_true", help="also track effective weights W0 + scale * b a")
    p = sub.add_parser("report", parents=[common], help="merge run directories into comparison tables")
    p.add_argument("run_dirs", nargs="+", type=Path)
    sub.add_parser("sweep", parents=[common], help="all modes x alphas x seeds, then a report")
    return parser


def resolve_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    defaults = ex.key_paths()
    overrides = {}
    for key in GLOBAL_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    for name, text in vars(args).items():
        if name.startswith("set:") and text is not None:
            path = name[4:]
            overrides[path] = ex.parse_override(path, text, defaults[path])
    return ex.apply_overrides(cfg, overrides).validate()


def dispatch(args: argparse.Namespace) -> Path:
    cfg = resolve_config(args)
    if args.command == "generate":
        return ex.cmd_generate(cfg)
    if args.command == "pretrain":
        return ex.cmd_pretrain(cfg)
    if args.command == "partition":
        return ex.cmd_partition(cfg)
    if args.command == "run":
        return ex.cmd_run(cfg)
    if args.command == "drift":
        written = ex.cmd_drift(args.run_dir, args.tensors, args.effective or cfg.drift.effective)
        return written[-1]
    if args.command == "report":
        return ex.cmd_report(args.run_dirs, Path(cfg.out) / "report")
    if args.command == "sweep":
        return ex.cmd_sweep(cfg)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = dispatch(args)
    except FederaError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        err = DataError(f"I/O failure on {exc.filename or '?'}: {exc.strerror or exc}")
        print(f"error [DataError]: {err}", file=sys.stderr)
        return err.exit_code
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
