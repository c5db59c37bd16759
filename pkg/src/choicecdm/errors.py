"""Exception and warning types shared across the package."""

from __future__ import annotations


class ChoiceModelError(Exception):
    """Base class for every error raised by choicecdm."""


class InvalidInputError(ChoiceModelError, ValueError):
    """A choice set, item index, or parameter block is malformed."""


class MissingSetError(ChoiceModelError, KeyError):
    """A saturated model was queried on a set it holds no probabilities for."""


class DatasetParseError(ChoiceModelError, ValueError):
    """A dataset file could not be parsed.

    ``line`` is the 1-based line number of the offending record, or ``None``
    when the problem is not tied to a single line (e.g. an empty file).
    """

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidTestError(ChoiceModelError, ValueError):
    """A likelihood-ratio test is degenerate (non-positive degrees of freedom)."""


class OptimizationError(ChoiceModelError, RuntimeError):
    """A fit ended in a state that contradicts model nesting."""


class ZeroProbabilityWarning(RuntimeWarning):
    """An observed choice has probability exactly zero under the model."""


class IdentifiabilityWarning(UserWarning):
    """The dataset does not identify the full-rank CDM."""
