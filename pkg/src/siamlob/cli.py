"""``siamlob`` command line.

Exit codes: 0 success, 1 usage/config error, 2 data or validation error,
3 numerical failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from typing import Sequence

from . import grid
from .config import ConfigError, ExperimentConfig, load_config
from .evaluation import IncompleteGridError
from .features import FeatureKind
from .lob import LobError
from .models import Architecture

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "SIAMLOB_LOG_LEVEL"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment config (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="global seed override")
    p.add_argument("--out", help="output directory override")
    p.add_argument("--horizon", type=_csv_list, help="comma-separated horizons, e.g. 10,20")
    p.add_argument("--arch", type=_csv_list, help="comma-separated architectures")
    p.add_argument("--feature", type=_csv_list, help="LOB, OFI or both")
    p.add_argument("--siamese", choices=["on", "off", "both"], help="restrict the Siamese axis")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="siamlob", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    helps = {
        "synth": "write synthetic level-II CSVs for every configured instrument",
        "featurize": "cache windows/labels for every split as binary + JSON manifest",
        "train": "train every missing grid cell and save checkpoints",
        "evaluate": "evaluate trained cells on their test week",
        "report": "aggregate cell results into the report directory",
        "grid": "train, evaluate and report in one go (resumable)",
        "gradcheck": "finite-difference check of every primitive and architecture",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _add_common(p)
        if name == "synth":
            p.add_argument("--force", action="store_true", help="overwrite existing CSVs")
        if name in ("report", "grid"):
            p.add_argument("--allow-partial", action="store_true", help="report whatever cells finished")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates: dict = {}
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["train"] = dataclasses.replace(cfg.train, seed=args.seed)
    if args.out:
        updates["out"] = args.out
    if args.horizon:
        try:
            updates["horizons"] = tuple(int(h) for h in args.horizon)
        except ValueError:
            raise ConfigError(f"bad --horizon {args.horizon}") from None
    try:
        if args.arch:
            updates["architectures"] = tuple(Architecture.parse(a).value for a in args.arch)
        if args.feature:
            updates["features"] = tuple(FeatureKind.parse(f).value for f in args.feature)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.siamese:
        updates["siamese"] = {"on": (True,), "off": (False,), "both": (False, True)}[args.siamese]
    try:
        return dataclasses.replace(cfg, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _gradcheck() -> int:
    from .gradcheck import MODEL_TOL, PRIMITIVE_TOL, check_architectures, check_primitives

    ok = True
    t0 = time.perf_counter()
    prims = check_primitives()
    worst = max(prims.values())
    ok &= worst < PRIMITIVE_TOL
    print(f"primitives max_rel_error={worst:.3e} tol={PRIMITIVE_TOL:.0e} {'ok' if worst < PRIMITIVE_TOL else 'FAIL'}")
    for arch, err in check_architectures().items():
        good = err < MODEL_TOL
        ok &= good
        print(f"{arch} max_rel_error={err:.3e} tol={MODEL_TOL:.0e} {'ok' if good else 'FAIL'}")
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "gradcheck":
        return _gradcheck()
    cfg = resolve_config(args)
    if args.command == "synth":
        grid.write_manifest(cfg)
        for p in grid.generate_data(cfg, force=args.force):
            print(p)
        return EXIT_OK
    if args.command == "featurize":
        grid.write_manifest(cfg)
        print(f"wrote {len(grid.featurize(cfg))} sample sets")
        return EXIT_OK
    if args.command == "grid":
        out = grid.run_grid(cfg, allow_partial=args.allow_partial)
        print(out)
        return EXIT_OK
    cells = grid.grid_cells(cfg, grid.split_counts(cfg))
    if args.command in ("train", "evaluate"):
        grid.write_manifest(cfg)
        failures = grid.run_cells(cfg, cells, ("train",) if args.command == "train" else ("evaluate",))
        if failures:
            raise grid.GridFailure(failures)
        print(f"{len(cells)} cells {args.command}ed")
        return EXIT_OK
    if args.command == "report":
        print(grid.report(cfg, cells, allow_partial=args.allow_partial))
        return EXIT_OK
    raise UsageError(f"unknown command {args.command}")


def run(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except UsageError as exc:
        print(f"siamlob: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"siamlob: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except grid.GridFailure as exc:
        print(f"siamlob: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if exc.numerical else EXIT_DATA
    except ArithmeticError as exc:
        print(f"siamlob: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LobError, IncompleteGridError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"siamlob: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
