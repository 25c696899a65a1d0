"""``specdraft`` command line: run | sweep | compare | report."""

from __future__ import annotations

import argparse
import logging
import sys

from .bandit import parse_arm_set
from .bench import (
    FORMATS,
    ExperimentSpec,
    compare_fixed_vs_bandit,
    emit_report,
    load_record,
    run_experiment,
    sweep_tree_configs,
)
from .engine import Strategy
from .errors import InvalidConfigError, InvalidInputError, ModelFormatError, SpecDraftError
from .tree import TreeConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MODEL = 3
EXIT_RUNTIME = 4

log = logging.getLogger("specdraft")


def _lambda_gamma(text: str):
    if text == "auto":
        return "auto"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number or 'auto'") from None
    if value < 0:
        raise argparse.ArgumentTypeError("lambda-gamma must be >= 0")
    return value


def _common(p: argparse.ArgumentParser, needs_models: bool = True) -> None:
    if needs_models:
        p.add_argument("--target", required=True, help="target model file")
        p.add_argument("--drafter", required=True, help="drafter model file")
        p.add_argument("--mode", choices=("greedy", "sample"), default="sample")
        p.add_argument("--lambda-ucb", type=float, default=1.0)
        p.add_argument("--lambda-gamma", type=_lambda_gamma, default="auto")
        p.add_argument("--max-new-tokens", type=int, default=64)
        p.add_argument("--stop", type=int, action="append", default=[], help="stop token id (repeatable)")
        p.add_argument("--prompts", default="synthetic:0:8:16", help="PATH or synthetic:SEED:COUNT:LEN")
        p.add_argument("--reps", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--id", dest="experiment_id", default="exp")
        p.add_argument("--no-timing", action="store_true", help="zero timing columns for golden files")
        p.add_argument(
            "--carry-bandit", action="store_true", help="keep bandit statistics across queries instead of resetting"
        )
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=FORMATS, default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specdraft", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one or more strategies")
    _common(run)
    run.add_argument(
        "--strategy",
        action="append",
        default=[],
        help='seq:5 | tree:3,2,2,1,1 | bandit:"3,3,2,1;3,2,2,1,1" (repeatable)',
    )

    sweep = sub.add_parser("sweep", help="one fixed-tree row per config")
    _common(sweep)
    sweep.add_argument("--configs", required=True, help='e.g. "3,3,2,1;3,2,2,1,1;2,2,2,1,1,1"')

    compare = sub.add_parser("compare", help="fixed tree vs bandit tree search")
    _common(compare)
    compare.add_argument("--fixed", required=True, help="e.g. 3,2,2,1")
    compare.add_argument("--arms", required=True, help='e.g. "3,3,2,1;3,2,2,1,1;2,2,2,1,1,1"')

    report = sub.add_parser("report", help="re-emit a json result record in another format")
    report.add_argument("--in", dest="record", required=True)
    _common(report, needs_models=False)
    return parser


def _spec(args, strategies) -> ExperimentSpec:
    return ExperimentSpec(
        target=args.target,
        drafter=args.drafter,
        prompts=args.prompts,
        strategies=strategies,
        mode=args.mode,
        max_new_tokens=args.max_new_tokens,
        stop_tokens=tuple(args.stop),
        repetitions=args.reps,
        seed=args.seed,
        experiment_id=args.experiment_id,
        no_timing=args.no_timing,
        carry_bandit=args.carry_bandit,
    )


def _execute(args) -> int:
    if args.command == "report":
        record = load_record(args.record)
        emit_report(record, args.format, args.out)
        return EXIT_OK

    if args.command == "run":
        texts = args.strategy or ["seq:5"]
        strategies = [Strategy.parse(t, args.lambda_ucb, args.lambda_gamma) for t in texts]
        record = run_experiment(_spec(args, strategies))
    elif args.command == "sweep":
        configs = [TreeConfig.parse(c) for c in args.configs.split(";") if c.strip()]
        record = sweep_tree_configs(_spec(args, []), configs)
    else:
        record = compare_fixed_vs_bandit(
            _spec(args, []),
            TreeConfig.parse(args.fixed),
            parse_arm_set(args.arms),
            args.lambda_ucb,
            args.lambda_gamma,
        )

    failed = record.errored
    if failed and args.command != "sweep":
        for row in failed:
            log.error("strategy %s failed: %s", row.strategy, row.error)
        return EXIT_RUNTIME
    for row in failed:
        log.warning("sweep row %s errored: %s", row.strategy, row.error)
    emit_report(record, args.format, args.out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _execute(args)
    except ModelFormatError as exc:
        log.error("%s", exc)
        return EXIT_MODEL
    except (InvalidConfigError, InvalidInputError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (SpecDraftError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
