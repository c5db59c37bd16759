"""Dataset files, model files, train/test splits and JSON reports.

A dataset file holds one observation per line::

    chosen;label1,label2,...

Blank lines and lines starting with ``#`` are skipped.  Labels are numbered in
order of first appearance, unless a ``#@items`` line lists the universe first
(the writer always emits one so that files round-trip exactly).
"""

from __future__ import annotations

import csv
import json
import math
from fractions import Fraction
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .core import (
    ChoiceDataset,
    ChoiceObservation,
    FullRankCdmParams,
    ItemUniverse,
    LowRankCdmParams,
    LuceParams,
    ParametricModel,
    gauge_normalize,
)
from .errors import DatasetParseError, InvalidInputError

REPORT_VERSION = "1.0"
MODEL_FORMAT = "choicecdm-model"
ITEMS_DIRECTIVE = "#@items "
_FORBIDDEN = (",", ";", "\n", "\r")


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def _split_labels(text: str, lineno: int) -> list[str]:
    labels = [part.strip() for part in text.split(",")]
    if any(not label for label in labels):
        raise DatasetParseError("empty label", lineno)
    return labels


def parse_dataset_text(text: str) -> ChoiceDataset:
    """Parse the ``chosen;a,b,c`` format from a string."""
    declared: list[str] | None = None
    index: dict[str, int] = {}
    labels: list[str] = []
    records: list[ChoiceObservation] = []

    def intern(label: str, lineno: int) -> int:
        if label not in index:
            if declared is not None:
                raise DatasetParseError(f"label {label!r} is not in the declared items", lineno)
            index[label] = len(labels)
            labels.append(label)
        return index[label]

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith(ITEMS_DIRECTIVE.strip()):
            if records or declared is not None:
                raise DatasetParseError("the items line must come before any observation", lineno)
            declared = _split_labels(line[len(ITEMS_DIRECTIVE.strip()) :], lineno)
            if len(set(declared)) != len(declared):
                raise DatasetParseError("duplicate label in the items line", lineno)
            labels.extend(declared)
            index.update({label: i for i, label in enumerate(declared)})
            continue
        if not line or line.startswith("#"):
            continue
        if line.count(";") != 1:
            raise DatasetParseError("expected exactly one ';' separating the choice from the set", lineno)
        chosen_text, set_text = (part.strip() for part in line.split(";"))
        if not chosen_text:
            raise DatasetParseError("missing chosen label", lineno)
        members = _split_labels(set_text, lineno)
        if len(members) < 2:
            raise DatasetParseError(f"choice set has {len(members)} item(s); need at least 2", lineno)
        if len(set(members)) != len(members):
            raise DatasetParseError("duplicate label within the choice set", lineno)
        if chosen_text not in members:
            raise DatasetParseError(f"chosen not in set: {chosen_text!r}", lineno)
        ids = tuple(intern(label, lineno) for label in members)
        records.append(ChoiceObservation(ids, index[chosen_text]))

    if not records:
        raise DatasetParseError("dataset contains no observations")
    if len(labels) < 2:
        raise DatasetParseError("dataset mentions fewer than two items")
    return ChoiceDataset(ItemUniverse(tuple(labels)), tuple(records))


def parse_dataset(path: str | Path) -> ChoiceDataset:
    return parse_dataset_text(Path(path).read_text(encoding="utf-8"))


def _check_label(label: str) -> None:
    if not label or label != label.strip() or label.startswith("#") or any(c in label for c in _FORBIDDEN):
        raise InvalidInputError(f"label {label!r} cannot be written in the dataset format")


def format_dataset(dataset: ChoiceDataset) -> str:
    """Inverse of :func:`parse_dataset_text`."""
    labels = dataset.universe.labels
    for label in labels:
        _check_label(label)
    lines = [ITEMS_DIRECTIVE + ",".join(labels)]
    for members, chosen in dataset.observations:
        lines.append(f"{labels[chosen]};{','.join(labels[i] for i in members)}")
    return "\n".join(lines) + "\n"


def write_dataset(dataset: ChoiceDataset, path: str | Path) -> None:
    Path(path).write_text(format_dataset(dataset), encoding="utf-8")


def convert_long_csv(path: str | Path) -> ChoiceDataset:
    """Read long-format CSV with columns ``obs_id,label,chosen`` (chosen is 0/1).

    Rows of one observation need not be contiguous; observations keep the
    order in which their ids first appear.
    """
    groups: dict[str, list[tuple[str, int]]] = {}
    first_row: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"obs_id", "label", "chosen"} - set(reader.fieldnames or [])
        if missing:
            raise DatasetParseError(f"missing columns {sorted(missing)}", 1)
        for lineno, row in enumerate(reader, start=2):
            flag = row["chosen"].strip()
            if flag not in ("0", "1"):
                raise DatasetParseError(f"chosen must be 0 or 1, got {flag!r}", lineno)
            obs = row["obs_id"].strip()
            first_row.setdefault(obs, lineno)
            groups.setdefault(obs, []).append((row["label"].strip(), int(flag)))
    if not groups:
        raise DatasetParseError("dataset contains no observations")
    index: dict[str, int] = {}
    records = []
    for obs, rows in groups.items():
        lineno = first_row[obs]
        picked = [label for label, flag in rows if flag]
        if len(picked) != 1:
            raise DatasetParseError(f"observation {obs!r} has {len(picked)} chosen rows", lineno)
        members = [label for label, _ in rows]
        if len(members) < 2:
            raise DatasetParseError(f"observation {obs!r} offers fewer than 2 items", lineno)
        if len(set(members)) != len(members):
            raise DatasetParseError(f"observation {obs!r} repeats a label", lineno)
        ids = tuple(index.setdefault(label, len(index)) for label in members)
        records.append(ChoiceObservation(ids, index[picked[0]]))
    if len(index) < 2:
        raise DatasetParseError("dataset mentions fewer than two items")
    return ChoiceDataset(ItemUniverse(tuple(index)), tuple(records))


def split_dataset(dataset: ChoiceDataset, test_fraction: float, seed: int) -> tuple[ChoiceDataset, ChoiceDataset]:
    """Uniform observation-level split; the test side has ``floor(fraction * m)`` rows.

    Both parts keep the full universe and the original observation order.
    """
    if not 0 < test_fraction < 1:
        raise InvalidInputError("test_fraction must lie strictly between 0 and 1")
    m = dataset.m
    # floor of the decimal the caller wrote: 0.29 * 100 is 28.999... in binary
    k = math.floor(Fraction(repr(float(test_fraction))) * m)
    if k == 0 or k == m:
        raise InvalidInputError(f"splitting {m} observations at {test_fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(m)
    return dataset.subset(np.sort(order[k:])), dataset.subset(np.sort(order[:k]))


def align_dataset(dataset: ChoiceDataset, universe: ItemUniverse) -> ChoiceDataset:
    """Re-index ``dataset`` onto ``universe`` (e.g. the labels of a saved model)."""
    if dataset.universe == universe:
        return dataset
    lookup = universe.index
    unknown = [label for label in dataset.universe.labels if label not in lookup]
    if unknown:
        raise InvalidInputError(f"labels unknown to the model: {unknown}")
    remap = [lookup[label] for label in dataset.universe.labels]
    obs = tuple(ChoiceObservation(tuple(remap[i] for i in s), remap[c]) for s, c in dataset.observations)
    return ChoiceDataset(universe, obs)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def model_kind(params: ParametricModel) -> str:
    if isinstance(params, LuceParams):
        return "luce"
    if isinstance(params, FullRankCdmParams):
        return "cdm"
    return "lowrank"


def model_to_dict(params: ParametricModel, universe: ItemUniverse) -> dict[str, Any]:
    """Luce and full-rank CDM parameters are stored gauge-normalized; low-rank factors raw."""
    if params.n != universe.n:
        raise InvalidInputError("model and universe sizes differ")
    kind = model_kind(params)
    if isinstance(params, LowRankCdmParams):
        body = {"T": params.T.tolist(), "C": params.C.tolist()}
    elif isinstance(params, LuceParams):
        body = {"v": gauge_normalize(params).v.tolist()}
    else:
        body = {"u": gauge_normalize(params).matrix().tolist()}
    return {"format": MODEL_FORMAT, "version": REPORT_VERSION, "model": kind, "labels": list(universe.labels), "params": body}


def model_from_dict(doc: Mapping[str, Any]) -> tuple[ParametricModel, ItemUniverse]:
    if doc.get("format") != MODEL_FORMAT:
        raise InvalidInputError("not a choicecdm model file")
    universe = ItemUniverse(tuple(doc["labels"]))
    body = doc["params"]
    kind = doc["model"]
    if kind == "luce":
        params: ParametricModel = LuceParams(np.array(body["v"], dtype=float))
    elif kind == "cdm":
        params = FullRankCdmParams.from_matrix(np.array(body["u"], dtype=float))
    elif kind == "lowrank":
        params = LowRankCdmParams(np.array(body["T"], dtype=float), np.array(body["C"], dtype=float))
    else:
        raise InvalidInputError(f"unknown model kind {kind!r}")
    if params.n != universe.n:
        raise InvalidInputError("model parameters do not match its label list")
    return params, universe


def write_model(params: ParametricModel, universe: ItemUniverse, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(params, universe), indent=2) + "\n", encoding="utf-8")


def read_model(path: str | Path) -> tuple[ParametricModel, ItemUniverse]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"model file is not valid JSON: {exc}") from exc
    try:
        return model_from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"malformed model file: {exc}") from exc


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _jsonable(value: Any) -> Any:
    """Plain JSON values; non-finite floats become the strings ``"inf"``, ``"-inf"``, ``"nan"``."""
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        x = float(value)
        return x if math.isfinite(x) else str(x)
    return value


def report_schema() -> dict[str, Any]:
    """The published JSON schema every report validates against."""
    text = resources.files("choicecdm").joinpath("report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


@dataclass
class ReportDocument:
    """Sections produced by the command-line workflows.

    Each section is a plain mapping; the builders below fill them from the
    library's result objects.
    """

    dataset: dict[str, Any] | None = None
    identifiability: dict[str, Any] | None = None
    fits: list[dict[str, Any]] = field(default_factory=list)
    tests: list[dict[str, Any]] = field(default_factory=list)
    evaluations: list[dict[str, Any]] = field(default_factory=list)
    cross_validation: dict[str, Any] | None = None
    version: str = REPORT_VERSION

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"version": self.version}
        for key in ("dataset", "identifiability", "cross_validation"):
            if getattr(self, key) is not None:
                doc[key] = _jsonable(getattr(self, key))
        for key in ("fits", "tests", "evaluations"):
            if getattr(self, key):
                doc[key] = _jsonable(getattr(self, key))
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> ReportDocument:
        validate_report(doc)
        return cls(
            dataset=doc.get("dataset"),
            identifiability=doc.get("identifiability"),
            fits=list(doc.get("fits", [])),
            tests=list(doc.get("tests", [])),
            evaluations=list(doc.get("evaluations", [])),
            cross_validation=doc.get("cross_validation"),
            version=doc["version"],
        )

    @classmethod
    def from_json(cls, text: str) -> ReportDocument:
        return cls.from_dict(json.loads(text))


def validate_report(doc: Mapping[str, Any]) -> None:
    import jsonschema

    try:
        jsonschema.validate(doc, report_schema())
    except jsonschema.ValidationError as exc:
        raise InvalidInputError(f"invalid report: {exc.message}") from exc


def dataset_section(dataset: ChoiceDataset) -> dict[str, Any]:
    hist = dataset.set_size_histogram()
    return {
        "n": dataset.n,
        "m": dataset.m,
        "n_unique_sets": len(dataset.unique_sets),
        "set_size_histogram": {str(k): hist[k] for k in sorted(hist)},
    }


def identifiability_section(report: Any) -> dict[str, Any]:
    return _jsonable(asdict(report))


def fit_section(report: Any) -> dict[str, Any]:
    cfg = report.config
    hyper = {k: v for k, v in asdict(cfg).items()}
    params = report.params
    extra = {"rank": params.rank} if isinstance(params, LowRankCdmParams) else {}
    return _jsonable(
        {
            "model": report.model,
            **extra,
            "final_nll": report.final_nll,
            "objective": report.objective,
            "epochs_run": report.epochs_run,
            "converged": report.converged,
            "hyperparameters": hyper,
            "warnings": list(report.warnings),
        }
    )


def test_section(result: Any) -> dict[str, Any]:
    return _jsonable(
        {
            "alternative": result.alternative,
            "statistic": result.statistic,
            "df": result.df,
            "p_value": result.p_value,
            "nll_null": result.nll_null,
            "nll_alt": result.nll_alt,
            "m": result.m,
            "warnings": list(result.warnings),
        }
    )


def evaluation_section(model: str, result: Any) -> dict[str, Any]:
    return _jsonable({"model": model, **asdict(result)})


def cross_validation_section(model: str, result: Any) -> dict[str, Any]:
    return _jsonable(
        {
            "model": model,
            "best_l2": result.best_l2,
            "folds": result.folds,
            "mean_nll": [{"l2": k, "nll": v} for k, v in sorted(result.mean_nll.items())],
            "warnings": list(result.warnings),
        }
    )

