"""``cu-lab`` command line.

Exit codes: 0 success, 1 user error (bad flag, config or input file),
2 numeric failure during a run.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import datagen, metrics, nets
from .errors import (ConfigError, ContractError, DefinitenessError, DimensionError, DomainError,
                     NumericError, ParseError, ValidationError)
from .harness import ablate, report
from .harness.config import load_config
from .harness.train import data_hash, evaluate, make_splits, train

USER_ERRORS = (ConfigError, ParseError, ValidationError, DimensionError, ContractError,
               FileNotFoundError, IsADirectoryError)
NUMERIC_ERRORS = (NumericError, DefinitenessError, DomainError, FloatingPointError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config_args(p, required=True):
    p.add_argument("--config", "--preset", dest="config", required=required,
                   help="config file path or preset name (toy, scenes)")
    p.add_argument("--seed", type=int, help="overrides [run] seed and CU_LAB_SEED")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="cu-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", help="generate and save the train/val/test splits")
    _config_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model and evaluate it")
    _config_args(p)
    p.add_argument("--data", help="directory of saved splits (default: generate from the config)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on saved or generated data")
    _config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train a grid of configurations and report")
    _config_args(p)
    p.add_argument("--grid", required=True, help='axes such as "estimator x interaction"')
    p.add_argument("--seeds", default="0,1,2", help="values of the seed axis")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="aggregate run directories into CSV/JSON")
    p.add_argument("--runs", required=True)
    p.add_argument("--out")
    return parser


def _load(args):
    cfg = load_config(args.config, args.seed)
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg = cfg.override(section.strip(), name.strip(), value)
    if getattr(args, "data", None):
        cfg = replace(cfg, data_path=args.data)
    return cfg


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(args):
    cfg = _load(args)
    splits = make_splits(cfg)
    paths = datagen.save_splits(splits, args.out)
    for name, path in paths.items():
        print(f"{name}: {len(splits[name])} instances -> {path}")
    print(f"data hash {data_hash(splits)}")


def cmd_train(args):
    cfg = _load(args)
    out = Path(args.out)
    try:
        _, record = train(cfg, out_dir=out, log=_log)
    except NUMERIC_ERRORS as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    (out / "FAILED").unlink(missing_ok=True)
    for r in record.reports:
        print(r.split, json.dumps(r.values, sort_keys=True, default=float))


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_eval(args):
    cfg = _load(args)
    before = _file_hash(args.checkpoint)
    model, _ = nets.load_checkpoint(args.checkpoint)
    mc = model.config
    if (mc.m, mc.t_minus, mc.t_plus) != (cfg.model.m, cfg.model.t_minus, cfg.model.t_plus):
        raise ConfigError("checkpoint extents do not match the data in the config")
    splits = make_splits(cfg)
    if args.split not in splits:
        raise ConfigError(f"no split {args.split!r}")
    meta = {"config_hash": nets.config_hash(model.config.to_dict()), "data_hash": data_hash(splits),
            "checkpoint": before[:16], "seed": str(cfg.seed), "estimator": model.config.estimator,
            "interaction": model.config.interaction}
    rep, curve = evaluate(model, splits[args.split], cfg, args.split, meta)
    if _file_hash(args.checkpoint) != before:
        raise ContractError("checkpoint changed during evaluation")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics.reports_to_csv([rep]))
    (out / "metrics.json").write_text(metrics.reports_to_json([rep]))
    print(json.dumps(rep.values, sort_keys=True, default=float))


def cmd_ablate(args):
    cfg = _load(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    results = ablate.run_grid(cfg, args.grid, args.out, seeds, log=_log)
    paths = report.write_report(args.out)
    print(f"{len(results)} runs; reports: {', '.join(str(p) for p in paths.values())}")


def cmd_report(args):
    if not Path(args.runs).is_dir():
        raise FileNotFoundError(f"no such directory: {args.runs}")
    if not report.find_records(args.runs):
        raise ConfigError(f"no run records under {args.runs}")
    paths = report.write_report(args.runs, args.out)
    for p in paths.values():
        print(p)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except NUMERIC_ERRORS as exc:
        print(f"cu-lab: numeric failure: {exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"cu-lab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
