import argparse
import logging
import sys
from dotenv import load_dotenv
load_dotenv()

from pydantic import ValidationError

from exceptions import DegenerateDataError, NotConvergedError, RatingError
from ingest import COLLAPSE_TARGETS
from model_core import BUILTIN_SYSTEMS
from report_cli import cmd_fit, cmd_predict, cmd_report, cmd_sample
from utils import get_setting

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_DEGENERATE = 2
EXIT_NOT_CONVERGED = 3


def _add_data_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--model", required=True,
                        help=f"outcome system: {', '.join(BUILTIN_SYSTEMS)} or custom:<outcomes.json>")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--games", help="games CSV with header team_i,team_j,outcome[,date]")
    source.add_argument("--counts", help="counts JSON")
    parser.add_argument("--collapse", choices=sorted(COLLAPSE_TARGETS),
                        help="collapse the input onto win/loss or win/tie/loss outcomes")
    parser.add_argument("--source-model", default="four-outcome",
                        help="outcome system of a games CSV that is collapsed (default: four-outcome)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Multi-outcome Bradley-Terry ratings from game results")
    parser.add_argument("--log-level", default=None, help="logging level (default: MOBT_LOG_LEVEL or WARNING)")
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", help="maximum-likelihood fit with Gaussian uncertainties")
    _add_data_arguments(fit)
    fit.add_argument("--out", help="write the fitted model JSON here")
    fit.add_argument("--tol", type=float, default=1e-10)
    fit.add_argument("--max-iter", type=int, default=10000)
    fit.add_argument("--damping", type=float, default=1.0)
    fit.set_defaults(func=cmd_fit)

    sample = commands.add_parser("sample", help="posterior draws as CSV")
    _add_data_arguments(sample)
    sample.add_argument("--method", choices=["gaussian", "hmc"], required=True)
    sample.add_argument("--draws", type=int, required=True, help="total draws (gaussian) or draws per chain (hmc)")
    sample.add_argument("--seed", type=int, required=True)
    sample.add_argument("--chains", type=int, default=4)
    sample.add_argument("--warmup", type=int, default=1000)
    sample.add_argument("--leapfrog-steps", type=int, default=32)
    sample.add_argument("--target-accept", type=float, default=0.8)
    sample.add_argument("--out", help="samples CSV (default: stdout)")
    sample.add_argument("--diagnostics", help="HMC diagnostics JSON (default: next to --out)")
    sample.set_defaults(func=cmd_sample)

    predict = commands.add_parser("predict", help="outcome probabilities for team pairs")
    predict.add_argument("--fitted", required=True, help="fitted model JSON from 'fit --out'")
    predict.add_argument("--pairs", action="append", help="'all' or 'TeamA,TeamB'; repeatable")
    predict.add_argument("--playoff", action="store_true", help="add the no-overtime win probability")
    predict.add_argument("--posterior", help="samples CSV; report posterior-mean probabilities")
    predict.add_argument("--out", help="write the table as CSV")
    predict.set_defaults(func=cmd_predict)

    report = commands.add_parser("report", help="posterior summaries and density grids")
    report.add_argument("--fitted", required=True)
    report.add_argument("--samples", required=True)
    report.add_argument("--pairs", action="append", help="'all' or 'TeamA,TeamB'; repeatable")
    report.add_argument("--out-dir", required=True)
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    """Parses arguments, runs the subcommand and maps failures onto exit codes."""
    args = build_parser().parse_args(argv)
    level = args.log_level or get_setting("MOBT_LOG_LEVEL", "WARNING")
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s")

    try:
        return args.func(args)
    except DegenerateDataError as e:
        print(f" >> Degenerate data: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except NotConvergedError as e:
        print(f" >> Not converged: {e}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (RatingError, ValidationError, ValueError, OSError) as e:
        print(f" >> {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
