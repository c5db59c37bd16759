"""Synthetic choice data and the convergence / rejection-rate experiments.

Replicates draw from independent streams seeded by ``(seed, replicate)``, so
results do not depend on how replicates are scheduled across workers.
"""

from __future__ import annotations

import itertools
import logging
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import numpy.typing as npt

from .core import (
    ChoiceDataset,
    ChoiceModel,
    ChoiceObservation,
    FullRankCdmParams,
    ItemUniverse,
    LuceParams,
    SaturatedModel,
    gauge_normalize,
    log_probabilities,
)
from .errors import ChoiceModelError, InvalidInputError
from .estimation import FitConfig, fit_cdm_full
from .identifiability import quick_identifiable
from .inference import iia_tests

log = logging.getLogger(__name__)

TruthKind = Literal["mnl", "cdm", "general"]
#: The general choice system stores a table for every subset.
GENERAL_MAX_ITEMS = 16
MAX_RESAMPLES = 100


@dataclass(frozen=True, eq=False)
class GroundTruth:
    kind: TruthKind
    model: ChoiceModel
    T: npt.NDArray[np.float64] | None = None
    C: npt.NDArray[np.float64] | None = None

    @property
    def n(self) -> int:
        return self.model.n


def all_subsets(n: int) -> list[tuple[int, ...]]:
    return [c for k in range(2, n + 1) for c in itertools.combinations(range(n), k)]


def sample_choice_masks(n: int, m: int, rng: np.random.Generator) -> npt.NDArray[np.bool_]:
    """``m`` sets drawn uniformly from the ``2^n - n - 1`` subsets of size >= 2."""
    if n < 2:
        raise InvalidInputError("need at least two items")
    masks = rng.random((m, n)) < 0.5
    bad = np.flatnonzero(masks.sum(axis=1) < 2)
    while bad.size:
        masks[bad] = rng.random((bad.size, n)) < 0.5
        bad = bad[masks[bad].sum(axis=1) < 2]
    return masks


def sample_choice_set(n: int, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(np.flatnonzero(sample_choice_masks(n, 1, rng)[0]).tolist())


def make_ground_truth(kind: TruthKind, n: int, rng: np.random.Generator) -> GroundTruth:
    """Draw one of the three synthetic data-generating processes.

    ``mnl`` uses utilities ``[1..n] / sum(1..n)``; ``cdm`` uses ``U = T^T C`` with
    standard normal ``n x n`` factors; ``general`` draws independent uniform
    weights for every member of every subset and renormalizes per subset.
    """
    if n < 2:
        raise InvalidInputError("need at least two items")
    if kind == "mnl":
        v = np.arange(1, n + 1) / (n * (n + 1) / 2)
        return GroundTruth("mnl", LuceParams(v))
    if kind == "cdm":
        T = rng.standard_normal((n, n))
        C = rng.standard_normal((n, n))
        return GroundTruth("cdm", FullRankCdmParams.from_matrix(T.T @ C), T, C)
    if kind == "general":
        if n > GENERAL_MAX_ITEMS:
            raise InvalidInputError(f"general choice systems are limited to n <= {GENERAL_MAX_ITEMS}")
        probs = {}
        for members in all_subsets(n):
            w = rng.uniform(0.0, 1.0, size=len(members))
            probs[members] = w / w.sum()
        return GroundTruth("general", SaturatedModel(n, probs))
    raise InvalidInputError(f"unknown ground truth kind {kind!r}")


def sample_choices(
    model: ChoiceModel, masks: npt.NDArray[np.bool_], rng: np.random.Generator
) -> npt.NDArray[np.int64]:
    """One choice per row of ``masks`` from the model's conditional distribution."""
    unique, inverse = np.unique(masks, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    probs = np.exp(log_probabilities(model, unique))[inverse]
    cum = np.cumsum(probs, axis=1)
    draws = rng.random(masks.shape[0]) * cum[:, -1]
    chosen = (cum <= draws[:, None]).sum(axis=1)
    # guard against landing on a trailing non-member through rounding
    last = masks.shape[1] - 1 - np.argmax(masks[:, ::-1], axis=1)
    return np.minimum(chosen, last)


def dataset_from_arrays(
    universe: ItemUniverse, masks: npt.NDArray[np.bool_], chosen: npt.NDArray[np.int64]
) -> ChoiceDataset:
    obs = tuple(
        ChoiceObservation(tuple(np.flatnonzero(row).tolist()), int(c)) for row, c in zip(masks, chosen)
    )
    return ChoiceDataset(universe, obs)


def sample_dataset(truth: GroundTruth, m: int, rng: np.random.Generator) -> ChoiceDataset:
    """``m`` i.i.d. observations: a uniform random set, then a choice from the truth."""
    if m < 1:
        raise InvalidInputError("m must be at least 1")
    masks = sample_choice_masks(truth.n, m, rng)
    chosen = sample_choices(truth.model, masks, rng)
    return dataset_from_arrays(ItemUniverse.of_size(truth.n), masks, chosen)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def worker_count() -> int:
    """Worker processes for replicate loops, capped by ``CDM_THREADS``."""
    cap = os.environ.get("CDM_THREADS")
    cpus = os.cpu_count() or 1
    if cap:
        try:
            return max(1, min(int(cap), cpus))
        except ValueError:
            log.warning("ignoring non-integer CDM_THREADS=%r", cap)
    return cpus


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, replicate]))


def _seed_of(rng: np.random.Generator | int) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    return int(rng)


def run_replicates(fn: Callable, jobs: Sequence[tuple], workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


@dataclass
class ExperimentResult:
    """Per-``m`` summary of a replicated experiment.

    ``values`` holds one row per replicate (NaN for excluded replicates).
    """

    name: str
    m_grid: list[int]
    metric: list[float]
    stderr: list[float]
    replicates: int
    seed: int
    values: npt.NDArray[np.float64]
    excluded: list[int] = field(default_factory=list)
    resampled: int = 0

    def to_tsv(self) -> str:
        lines = ["m\tmetric\tstderr"]
        lines += [f"{m}\t{v:.10g}\t{s:.10g}" for m, v, s in zip(self.m_grid, self.metric, self.stderr)]
        return "\n".join(lines) + "\n"


def _check_grid(m_grid: Sequence[int]) -> list[int]:
    grid = [int(m) for m in m_grid]
    if not grid or any(m < 1 for m in grid):
        raise InvalidInputError("m_grid must contain positive sample sizes")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidInputError("m_grid must be strictly increasing")
    return grid


def squared_error(estimate: FullRankCdmParams, truth: FullRankCdmParams) -> float:
    """``||gauge(u_hat) - gauge(u*)||^2``; invariant to shifts of either argument."""
    diff = gauge_normalize(estimate).u - gauge_normalize(truth).u
    return float(diff @ diff)


def _convergence_replicate(truth: GroundTruth, grid: list[int], config: FitConfig, seed: int, rep: int):
    rng = replicate_rng(seed, rep)
    resampled = 0
    while True:
        data = sample_dataset(truth, grid[-1], rng)
        prefixes = [data.subset(range(m)) for m in grid]
        if all(quick_identifiable(p) for p in prefixes) or resampled >= MAX_RESAMPLES:
            break
        resampled += 1
    errors = [squared_error(fit_cdm_full(p, config, check_identifiability=False).params, truth.model) for p in prefixes]
    return errors, resampled


def convergence_experiment(
    n: int,
    m_grid: Sequence[int],
    replicates: int,
    config: FitConfig | None = None,
    rng: np.random.Generator | int = 0,
    workers: int | None = None,
    truth: GroundTruth | None = None,
) -> ExperimentResult:
    """Mean squared error of the full-rank CDM MLE along growing datasets.

    One CDM truth is drawn from the seed (unless ``truth`` is given) and each
    replicate is an independent dataset of size ``max(m_grid)`` whose prefixes
    give the smaller sizes.  Draws whose prefixes do not identify the CDM are
    redrawn and counted in ``resampled``.
    """
    grid = _check_grid(m_grid)
    if replicates < 1:
        raise InvalidInputError("replicates must be at least 1")
    config = config or FitConfig()
    seed = _seed_of(rng)
    if truth is None:
        truth = make_ground_truth("cdm", n, np.random.default_rng(np.random.SeedSequence([seed, 2**32 - 1])))
    elif not isinstance(truth.model, FullRankCdmParams):
        raise InvalidInputError("convergence is measured against a full-rank CDM truth")
    out = run_replicates(_convergence_replicate, [(truth, grid, config, seed, r) for r in range(replicates)], workers)
    values = np.array([errs for errs, _ in out])
    return ExperimentResult(
        name="convergence",
        m_grid=grid,
        metric=values.mean(axis=0).tolist(),
        stderr=(values.std(axis=0, ddof=1) / np.sqrt(replicates)).tolist() if replicates > 1 else [0.0] * len(grid),
        replicates=replicates,
        seed=seed,
        values=values,
        resampled=sum(r for _, r in out),
    )


def decay_per_decade(m_grid: Sequence[int], errors: Sequence[float]) -> float:
    """Factor by which ``errors`` shrink per tenfold ``m``, from a log-log least-squares fit."""
    slope = np.polyfit(np.log10(np.asarray(m_grid, float)), np.log10(np.asarray(errors, float)), 1)[0]
    return float(10.0 ** (-slope))


TestKind = Literal["cdm", "universal"]


def _rejection_replicate(kind: TruthKind, n: int, grid: list[int], tests: tuple, config: FitConfig, seed: int, rep: int):
    rng = replicate_rng(seed, rep)
    truth = make_ground_truth(kind, n, rng)
    data = sample_dataset(truth, grid[-1], rng)
    pvals = np.full((len(tests), len(grid)), np.nan)
    for j, m in enumerate(grid):
        prefix = data.subset(range(m))
        try:
            results = iia_tests(prefix, config, tests)
        except ChoiceModelError as exc:
            log.info("replicate %d at m=%d excluded: %s", rep, m, exc)
            continue
        for i, t in enumerate(tests):
            pvals[i, j] = results[t].p_value
    return pvals


def rejection_pvalues(
    kind: TruthKind,
    n: int,
    m_grid: Sequence[int],
    replicates: int,
    tests: tuple[TestKind, ...] = ("cdm",),
    config: FitConfig | None = None,
    rng: np.random.Generator | int = 0,
    workers: int | None = None,
) -> tuple[dict[TestKind, npt.NDArray[np.float64]], int]:
    """p-values of each test, shape ``(replicates, len(m_grid))``, NaN where excluded.

    All tests in ``tests`` are run on the same growing datasets and share the
    Luce fit.
    """
    grid = _check_grid(m_grid)
    if replicates < 1:
        raise InvalidInputError("replicates must be at least 1")
    config = config or FitConfig()
    seed = _seed_of(rng)
    out = run_replicates(
        _rejection_replicate, [(kind, n, grid, tuple(tests), config, seed, r) for r in range(replicates)], workers
    )
    stacked = np.stack(out)
    return {t: stacked[:, i, :] for i, t in enumerate(tests)}, seed


def rejection_summary(
    name: str, pvals: npt.NDArray[np.float64], grid: list[int], alpha: float, seed: int
) -> ExperimentResult:
    valid = ~np.isnan(pvals)
    rejected = np.where(valid, pvals < alpha, False)
    counts = valid.sum(axis=0)
    rate = rejected.sum(axis=0) / np.maximum(counts, 1)
    stderr = np.sqrt(rate * (1 - rate) / np.maximum(counts, 1))
    return ExperimentResult(
        name=name,
        m_grid=grid,
        metric=rate.tolist(),
        stderr=stderr.tolist(),
        replicates=pvals.shape[0],
        seed=seed,
        values=np.where(valid, rejected.astype(float), np.nan),
        excluded=(pvals.shape[0] - counts).tolist(),
    )


def rejection_experiment(
    kind: TruthKind,
    n: int,
    m_grid: Sequence[int],
    replicates: int,
    alpha: float = 0.05,
    test: TestKind = "cdm",
    config: FitConfig | None = None,
    rng: np.random.Generator | int = 0,
    workers: int | None = None,
) -> ExperimentResult:
    """Fraction of replicates rejecting IIA at level ``alpha`` for each ``m``."""
    if not 0 < alpha < 1:
        raise InvalidInputError("alpha must lie in (0, 1)")
    pvals, seed = rejection_pvalues(kind, n, m_grid, replicates, (test,), config, rng, workers)
    return rejection_summary(f"rejection-{kind}-{test}", pvals[test], _check_grid(m_grid), alpha, seed)
