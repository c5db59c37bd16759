"""Command-line workflows: ``choicecdm <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
JSON reports go to ``--output`` (default stdout); nothing in them depends on
wall-clock time, so identical inputs give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from collections.abc import Sequence
from pathlib import Path

from .core import ChoiceDataset
from .errors import ChoiceModelError, DatasetParseError, InvalidInputError, MissingSetError, OptimizationError
from .estimation import FitConfig, cross_validate_l2, evaluate_held_out, fit_model
from .identifiability import identifiability_report
from .inference import iia_tests
from .io import (
    ReportDocument,
    align_dataset,
    convert_long_csv,
    cross_validation_section,
    dataset_section,
    evaluation_section,
    fit_section,
    format_dataset,
    identifiability_section,
    model_kind,
    parse_dataset,
    read_model,
    split_dataset,
    test_section,
    write_dataset,
    write_model,
)
from .simulation import (
    convergence_experiment,
    make_ground_truth,
    rejection_experiment,
    replicate_rng,
    sample_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

log = logging.getLogger("choicecdm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 otherwise
        raise UsageError(message)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return value


def _grid(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad penalty grid {text!r}") from exc
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("the penalty grid needs nonnegative values")
    return values


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("data", type=Path, help="dataset file (chosen;a,b,c per line)")
    p.add_argument("--long-csv", action="store_true", help="read DATA as long CSV (obs_id,label,chosen)")


def _add_optimizer(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="required for low-rank fits; defaults to 0 otherwise")
    p.add_argument("--epochs", type=_positive_int, default=FitConfig.max_epochs)
    p.add_argument("--lr", type=float, default=FitConfig.learning_rate)
    p.add_argument("--tol", type=float, default=FitConfig.tolerance)


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("-o", "--output", type=Path, help="write the report here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="choicecdm", description="Fit and test context-dependent choice models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a Luce, full-rank CDM or low-rank CDM")
    _add_data(p)
    p.add_argument("--model", choices=("luce", "cdm", "lowrank"), required=True)
    p.add_argument("--rank", type=int, help="factor dimension for --model lowrank")
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--restarts", type=_positive_int, default=1)
    p.add_argument("--model-out", type=Path, help="write fitted parameters to this JSON file")
    _add_optimizer(p)
    _add_output(p)

    p = sub.add_parser("test-iia", help="likelihood-ratio test of IIA")
    _add_data(p)
    p.add_argument("--alternative", choices=("cdm", "universal"), default="cdm")
    _add_optimizer(p)
    _add_output(p)

    p = sub.add_parser("identify", help="does the dataset identify the full-rank CDM?")
    _add_data(p)
    _add_output(p)

    p = sub.add_parser("simulate", help="sample a synthetic dataset")
    p.add_argument("--truth", choices=("mnl", "cdm", "general"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_output(p)

    p = sub.add_parser("evaluate", help="held-out NLL and accuracy of a saved model")
    _add_data(p)
    p.add_argument("--model-file", type=Path, required=True)
    _add_output(p)

    p = sub.add_parser("cv", help="choose the l2 penalty by k-fold cross-validation")
    _add_data(p)
    p.add_argument("--model", choices=("luce", "cdm", "lowrank"), default="cdm")
    p.add_argument("--rank", type=int)
    p.add_argument("--grid", type=_grid, default=[0.0, 1e-4, 1e-3, 1e-2, 1e-1])
    p.add_argument("--folds", type=int, default=5)
    _add_optimizer(p)
    _add_output(p)

    p = sub.add_parser("split", help="random train/test split of a dataset file")
    _add_data(p)
    p.add_argument("--test-fraction", type=_fraction, default=0.2)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--train-out", type=Path, required=True)
    p.add_argument("--test-out", type=Path, required=True)

    p = sub.add_parser("experiment", help="replicated simulation study, TSV output")
    p.add_argument("kind", choices=("convergence", "rejection"))
    p.add_argument("--truth", choices=("mnl", "cdm", "general"), default="mnl")
    p.add_argument("--test", choices=("cdm", "universal"), default="cdm")
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--m-grid", type=lambda s: [int(x) for x in s.split(",")], required=True)
    p.add_argument("--replicates", type=_positive_int, default=10)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--workers", type=_positive_int)
    _add_output(p)
    return parser


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------


def _load(args) -> ChoiceDataset:
    return convert_long_csv(args.data) if args.long_csv else parse_dataset(args.data)


def _config(args, l2: float = 0.0) -> FitConfig:
    seed = 0 if args.seed is None else args.seed
    try:
        return FitConfig(max_epochs=args.epochs, learning_rate=args.lr, tolerance=args.tol, l2=l2, seed=seed)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc


def _target(args):
    if args.model == "lowrank":
        if args.rank is None:
            raise UsageError("--model lowrank requires --rank")
        if args.rank < 1:
            raise UsageError(f"--rank must be at least 1, got {args.rank}")
        if args.seed is None:
            raise UsageError("--seed is required for low-rank fits")
        return args.rank
    if args.rank is not None:
        raise UsageError("--rank only applies to --model lowrank")
    return "luce" if args.model == "luce" else "full"


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text, encoding="utf-8")


def _cmd_fit(args) -> int:
    target = _target(args)
    data = _load(args)
    report = fit_model(data, target, _config(args, args.l2), restarts=args.restarts)
    if args.model_out is not None:
        write_model(report.params, data.universe, args.model_out)
    doc = ReportDocument(dataset=dataset_section(data), fits=[fit_section(report)])
    _emit(doc.to_json(), args.output)
    return EXIT_OK


def _cmd_test_iia(args) -> int:
    data = _load(args)
    result = iia_tests(data, _config(args), (args.alternative,))[args.alternative]
    doc = ReportDocument(dataset=dataset_section(data), tests=[test_section(result)])
    _emit(doc.to_json(), args.output)
    return EXIT_OK


def _cmd_identify(args) -> int:
    data = _load(args)
    doc = ReportDocument(dataset=dataset_section(data), identifiability=identifiability_section(identifiability_report(data)))
    _emit(doc.to_json(), args.output)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    rng = replicate_rng(args.seed, 0)
    truth = make_ground_truth(args.truth, args.n, rng)
    _emit(format_dataset(sample_dataset(truth, args.m, rng)), args.output)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    params, universe = read_model(args.model_file)
    data = align_dataset(_load(args), universe)
    result = evaluate_held_out(params, data)
    doc = ReportDocument(dataset=dataset_section(data), evaluations=[evaluation_section(model_kind(params), result)])
    _emit(doc.to_json(), args.output)
    return EXIT_OK


def _cmd_cv(args) -> int:
    target = _target(args)
    if args.folds < 2:
        raise UsageError("--folds must be at least 2")
    data = _load(args)
    result = cross_validate_l2(data, target, args.grid, folds=args.folds, config=_config(args))
    name = args.model if target in ("luce", "full") else f"lowrank-{target}"
    doc = ReportDocument(dataset=dataset_section(data), cross_validation=cross_validation_section(name, result))
    _emit(doc.to_json(), args.output)
    return EXIT_OK


def _cmd_split(args) -> int:
    train, test = split_dataset(_load(args), args.test_fraction, args.seed)
    write_dataset(train, args.train_out)
    write_dataset(test, args.test_out)
    return EXIT_OK


def _cmd_experiment(args) -> int:
    if args.kind == "convergence":
        result = convergence_experiment(args.n, args.m_grid, args.replicates, rng=args.seed, workers=args.workers)
    else:
        result = rejection_experiment(
            args.truth, args.n, args.m_grid, args.replicates, args.alpha, args.test, rng=args.seed, workers=args.workers
        )
    _emit(result.to_tsv(), args.output)
    return EXIT_OK


HANDLERS = {
    "fit": _cmd_fit,
    "test-iia": _cmd_test_iia,
    "identify": _cmd_identify,
    "simulate": _cmd_simulate,
    "evaluate": _cmd_evaluate,
    "cv": _cmd_cv,
    "split": _cmd_split,
    "experiment": _cmd_experiment,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"choicecdm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            code = HANDLERS[args.command](args)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        return code
    except UsageError as exc:
        print(f"choicecdm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OptimizationError as exc:
        print(f"choicecdm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetParseError, InvalidInputError, MissingSetError, ChoiceModelError, OSError) as exc:
        print(f"choicecdm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"choicecdm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
