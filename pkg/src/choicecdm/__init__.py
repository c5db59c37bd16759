"""Context-dependent random utility models (CDM) for discrete choice.

Fit Luce/MNL, full-rank and low-rank CDMs by maximum likelihood, check whether
a collection of choice sets identifies the CDM, and test IIA with
likelihood-ratio tests.
"""

from .core import (
    ChoiceDataset,
    ChoiceObservation,
    FullRankCdmParams,
    ItemUniverse,
    LowRankCdmParams,
    LuceParams,
    SaturatedModel,
    choice_probabilities,
    gauge_normalize,
    log_likelihood,
    log_likelihood_gradient,
    luce_as_cdm,
)
from .errors import (
    ChoiceModelError,
    DatasetParseError,
    IdentifiabilityWarning,
    InvalidInputError,
    InvalidTestError,
    MissingSetError,
    OptimizationError,
    ZeroProbabilityWarning,
)
from .estimation import (
    FitConfig,
    FitReport,
    cross_validate_l2,
    cross_validate_rank,
    evaluate_held_out,
    fit_cdm_full,
    fit_cdm_low_rank,
    fit_luce,
)
from .identifiability import build_design_matrix, identifiability_report
from .inference import chi_square_survival, iia_tests, lrt_iia_cdm, lrt_iia_universal
from .io import ReportDocument, format_dataset, parse_dataset, split_dataset

__version__ = "0.1.0"

__all__ = [
    "ChoiceDataset",
    "ChoiceObservation",
    "FullRankCdmParams",
    "ItemUniverse",
    "LowRankCdmParams",
    "LuceParams",
    "SaturatedModel",
    "choice_probabilities",
    "gauge_normalize",
    "log_likelihood",
    "log_likelihood_gradient",
    "luce_as_cdm",
    "ChoiceModelError",
    "DatasetParseError",
    "IdentifiabilityWarning",
    "InvalidInputError",
    "InvalidTestError",
    "MissingSetError",
    "OptimizationError",
    "ZeroProbabilityWarning",
    "FitConfig",
    "FitReport",
    "cross_validate_l2",
    "cross_validate_rank",
    "evaluate_held_out",
    "fit_cdm_full",
    "fit_cdm_low_rank",
    "fit_luce",
    "build_design_matrix",
    "identifiability_report",
    "chi_square_survival",
    "iia_tests",
    "lrt_iia_cdm",
    "lrt_iia_universal",
    "ReportDocument",
    "format_dataset",
    "parse_dataset",
    "split_dataset",
]
