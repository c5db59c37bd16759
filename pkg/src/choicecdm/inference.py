"""Likelihood-ratio tests of IIA against the CDM and the universal logit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal

from .core import ChoiceDataset, SaturatedModel, log_likelihood
from .errors import InvalidTestError, OptimizationError
from .estimation import FitConfig, FitReport, fit_cdm_full, fit_luce
from .identifiability import quick_identifiable

#: Penalty used inside the CDM test when the design does not identify the CDM.
NONIDENTIFIED_L2 = 1e-6
#: Per-observation NLL slack tolerated before a fit is declared broken.
NESTING_SLACK = 1e-6

_EPS = 1e-16
_MAX_ITER = 10_000


def _gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma ``P(a, x)`` by its power series."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_continued_fraction(a: float, x: float) -> float:
    """Regularized upper incomplete gamma ``Q(a, x)`` by modified Lentz."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def chi_square_survival(x: float, df: int) -> float:
    """``P(X > x)`` for ``X ~ chi^2_df``."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if x < 0:
        raise ValueError("the chi-square statistic must be nonnegative")
    if math.isinf(x):
        return 0.0
    a, z = df / 2.0, x / 2.0
    if z == 0:  # also catches subnormal x underflowing
        return 1.0
    if z < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _gamma_series(a, z)))
    return min(1.0, max(0.0, _gamma_continued_fraction(a, z)))


def saturated_mle(dataset: ChoiceDataset) -> SaturatedModel:
    """Empirical choice frequencies on every observed set."""
    probs = {}
    for members, row in zip(dataset.unique_sets, dataset.choice_counts):
        counts = row[list(members)]
        probs[members] = counts / counts.sum()
    return SaturatedModel(dataset.n, probs)


Alternative = Literal["cdm", "universal"]


@dataclass
class LrtResult:
    statistic: float
    df: int
    p_value: float
    alternative: Alternative
    nll_null: float
    nll_alt: float
    m: int
    warnings: list[str] = field(default_factory=list)

    def reject(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


def _statistic(nll_null: float, nll_alt: float, m: int, label: str) -> float:
    gap = nll_null - nll_alt
    if gap < -NESTING_SLACK:
        raise OptimizationError(
            f"{label} alternative fits worse than the Luce null by {-gap:.3g} nats per observation"
        )
    return max(0.0, 2.0 * m * gap)


def cdm_test_from_luce(dataset: ChoiceDataset, luce: FitReport, config: FitConfig) -> LrtResult:
    notes: list[str] = []
    cfg = replace(config, l2=0.0)
    if quick_identifiable(dataset) is not True:
        cfg = replace(config, l2=NONIDENTIFIED_L2)
        notes.append(f"design does not identify the CDM; fitted with l2={NONIDENTIFIED_L2:g}")
    cdm = fit_cdm_full(dataset, cfg, init=luce.params, check_identifiability=False)
    stat = _statistic(luce.final_nll, cdm.final_nll, dataset.m, "CDM")
    n = dataset.n
    df = n * (n - 2)
    return LrtResult(stat, df, chi_square_survival(stat, df), "cdm", luce.final_nll, cdm.final_nll, dataset.m, notes)


def universal_df(dataset: ChoiceDataset) -> int:
    """``sum_C (|C| - 1) - (n - 1)`` over observed sets, ``n`` counting offered items."""
    offered = int(dataset.items_present().sum())
    return sum(len(s) - 1 for s in dataset.unique_sets) - (offered - 1)


def universal_test_from_luce(dataset: ChoiceDataset, luce: FitReport) -> LrtResult:
    df = universal_df(dataset)
    if df <= 0:
        raise InvalidTestError(f"universal-logit test has {df} degrees of freedom")
    nll_sat = -log_likelihood(saturated_mle(dataset), dataset) / dataset.m
    stat = _statistic(luce.final_nll, nll_sat, dataset.m, "universal-logit")
    return LrtResult(stat, df, chi_square_survival(stat, df), "universal", luce.final_nll, nll_sat, dataset.m)


def lrt_iia_cdm(dataset: ChoiceDataset, config: FitConfig | None = None) -> LrtResult:
    """Luce (null) against full-rank CDM, ``n(n-2)`` degrees of freedom."""
    config = config or FitConfig()
    return cdm_test_from_luce(dataset, fit_luce(dataset, config), config)


def lrt_iia_universal(dataset: ChoiceDataset, config: FitConfig | None = None) -> LrtResult:
    """Luce (null) against per-set empirical frequencies."""
    config = config or FitConfig()
    return universal_test_from_luce(dataset, fit_luce(dataset, config))


def iia_tests(
    dataset: ChoiceDataset, config: FitConfig | None = None, alternatives: tuple[Alternative, ...] = ("cdm", "universal")
) -> dict[Alternative, LrtResult]:
    """Run several tests sharing one Luce fit."""
    config = config or FitConfig()
    luce = fit_luce(dataset, config)
    out: dict[Alternative, LrtResult] = {}
    for alt in alternatives:
        if alt == "cdm":
            out[alt] = cdm_test_from_luce(dataset, luce, config)
        elif alt == "universal":
            out[alt] = universal_test_from_luce(dataset, luce)
        else:
            raise ValueError(f"unknown alternative {alt!r}")
    return out
