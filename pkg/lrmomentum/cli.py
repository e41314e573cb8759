"""Command-line interface.

    lrmomentum train   [--config PATH] [overrides...]
    lrmomentum compare [--config PATH] [--optimizers hb,lr-adam] [...]
    lrmomentum flow    [--study NAME] [--seed N] [--out-dir PATH]
    lrmomentum verify  [--check NAME ...] [--seed N]

Exit codes: 0 success, 1 other failure, 2 invalid configuration,
3 numeric failure, 4 failed verification.
"""

from __future__ import annotations

import argparse
import logging
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

from lrmomentum import LOGGER_NAME
from lrmomentum.config import ExperimentConfig, load_config
from lrmomentum.exceptions import LowRankError, VerificationError
from lrmomentum.harness import (
    FLOW_STUDIES,
    compare,
    run_experiment,
    run_flow_study,
)
from lrmomentum.report import CheckReport, failures
from lrmomentum.status import ExitCode, exit_code_for
from lrmomentum.verify import CHECKS, run_verification

# flags that override configuration fields; values are validated by the
# configuration parser, not by argparse
OVERRIDES = [
    ("--seed", "seed"),
    ("--out-dir", "out_dir"),
    ("--optimizer", "optimizer"),
    ("--lr", "lr"),
    ("--gamma", "gamma"),
    ("--beta1", "beta1"),
    ("--beta2", "beta2"),
    ("--eps", "eps"),
    ("--tau", "tau"),
    ("--init-rank", "init_rank"),
    ("--max-steps", "max_steps"),
]

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON configuration file")
    for flag, name in OVERRIDES:
        parser.add_argument(flag, dest=name, metavar=name.upper())


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrmomentum",
        description="Momentum methods for rank-adaptive low-rank training.",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument(
        "-v", "--verbose", action="store_true", help="log every step"
    )
    verbosity.add_argument(
        "-q", "--quiet", action="store_true", help="log warnings only"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one experiment")
    _add_config_arguments(train)

    cmp = sub.add_parser("compare", help="run several optimizers")
    _add_config_arguments(cmp)
    cmp.add_argument(
        "--optimizers", help="comma-separated optimizers to compare"
    )

    flow = sub.add_parser("flow", help="run continuous-time flow studies")
    flow.add_argument(
        "--study", choices=["all"] + sorted(FLOW_STUDIES), default="all"
    )
    flow.add_argument("--seed", type=int, default=0)
    flow.add_argument("--out-dir", type=Path, default=Path("runs/flow"))

    verify = sub.add_parser("verify", help="run the property suite")
    verify.add_argument(
        "--check",
        action="append",
        choices=list(CHECKS),
        help="run only this check (repeatable)",
    )
    verify.add_argument("--seed", type=int, default=0)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    else:
        level = logging.INFO
    logging.basicConfig(format=LOG_FORMAT)
    logging.getLogger(LOGGER_NAME).setLevel(level)


def _config_from(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict[str, Any] = {
        name: getattr(args, name) for _, name in OVERRIDES
    }
    if getattr(args, "optimizers", None):
        overrides["optimizers"] = [
            name.strip() for name in args.optimizers.split(",")
        ]
    config_path = Path(args.config) if args.config else None
    return load_config(config_path, overrides)


def _print_reports(reports: Sequence[CheckReport]) -> None:
    for report in reports:
        print(report.summary())


def _train(args: argparse.Namespace) -> None:
    row = run_experiment(_config_from(args))
    print(
        " ".join(
            "{}={}".format(key, value) for key, value in row.as_dict().items()
        )
    )


def _compare(args: argparse.Namespace) -> None:
    print(compare(_config_from(args)))


def _flow(args: argparse.Namespace) -> None:
    reports = run_flow_study(args.study, args.out_dir, args.seed)
    _print_reports(reports)
    failed = failures(reports)
    if failed:
        raise VerificationError(failed)


def _verify(args: argparse.Namespace) -> None:
    _print_reports(run_verification(args.check, args.seed))


_COMMANDS: dict[str, Callable[[argparse.Namespace], None]] = {
    "train": _train,
    "compare": _compare,
    "flow": _flow,
    "verify": _verify,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    _configure_logging(args)
    logger = logging.getLogger(LOGGER_NAME)
    try:
        _COMMANDS[args.command](args)
    except (LowRankError, OSError) as exc:
        logger.error("%s", exc)
        return int(exit_code_for(exc))
    except Exception as exc:
        logger.exception("unexpected error")
        return int(exit_code_for(exc))
    return int(ExitCode.SUCCESS)
