"""Maximum-likelihood fitting with Adam, cross-validation, held-out scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Literal, Union

import numpy as np
import numpy.typing as npt

from .core import (
    ChoiceDataset,
    ChoiceModel,
    FullRankCdmParams,
    LowRankCdmParams,
    LuceParams,
    ParametricModel,
    gauge_normalize,
    log_probabilities,
    loglik_and_gradient,
    luce_as_cdm,
)
from .errors import InvalidInputError

log = logging.getLogger(__name__)

#: Datasets with at most this many items are always fit full-batch.
FULL_BATCH_MAX_ITEMS = 20
DEFAULT_MINIBATCH = 256
#: Largest full-rank CDM whose warm start is projected onto the design row space.
PROJECT_MAX_PARAMS = 2_500


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``tolerance`` stops a run once the relative change of the full-data
    objective between consecutive epochs falls below it.  ``batch_size="auto"``
    means full batch for small universes and mini-batches of 256 otherwise.
    """

    max_epochs: int = 2000
    learning_rate: float = 0.05
    batch_size: int | Literal["full", "auto"] = "auto"
    tolerance: float = 1e-7
    l2: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    optimizer: Literal["adam", "gd"] = "adam"

    def __post_init__(self) -> None:
        if self.max_epochs < 1:
            raise InvalidInputError("max_epochs must be at least 1")
        if not self.tolerance > 0:
            raise InvalidInputError("tolerance must be positive")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.l2 < 0:
            raise InvalidInputError("l2 penalty must be nonnegative")
        if isinstance(self.batch_size, int) and self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive")
        if self.optimizer not in ("adam", "gd"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class FitReport:
    """Outcome of one fit.

    ``final_nll`` is the unpenalized mean negative log-likelihood per
    observation at the returned parameters; ``params`` are gauge-normalized
    for Luce and full-rank CDM, raw for low-rank.
    """

    model: str
    params: ParametricModel
    final_nll: float
    objective: float
    epochs_run: int
    converged: bool
    nll_trace: list[float]
    config: FitConfig
    warnings: list[str] = field(default_factory=list)


def _resolve_batch(config: FitConfig, dataset: ChoiceDataset) -> int | None:
    if config.batch_size == "full":
        return None
    if config.batch_size == "auto":
        return None if dataset.n <= FULL_BATCH_MAX_ITEMS else DEFAULT_MINIBATCH
    return None if config.batch_size >= dataset.m else int(config.batch_size)


def _observation_rows(dataset: ChoiceDataset, idx: npt.NDArray[np.int64]) -> tuple[npt.NDArray[np.bool_], npt.NDArray[np.float64]]:
    masks = dataset.set_masks[dataset.set_ids[idx]]
    counts = np.zeros(masks.shape)
    counts[np.arange(idx.size), dataset.chosen[idx]] = 1.0
    return masks, counts


def _batch_gradient(template, theta, dataset, idx, lam):
    masks, counts = _observation_rows(dataset, idx)
    _, g_ll = loglik_and_gradient(template.with_flat(theta), masks, counts)
    return (-g_ll + 2 * lam * theta * idx.size / dataset.m) / idx.size


def _optimize(
    template: ParametricModel, dataset: ChoiceDataset, config: FitConfig, name: str
) -> FitReport:
    """Minimize ``(-loglik + l2 * ||theta||^2) / m`` from ``template``."""
    m = dataset.m
    lam = config.l2
    masks, counts = dataset.set_masks, dataset.choice_counts

    def full_objective(theta):
        model = template.with_flat(theta)
        ll, grad = loglik_and_gradient(model, masks, counts)
        return ll, (-ll + lam * theta @ theta) / m, (-grad + 2 * lam * theta) / m

    batch = _resolve_batch(config, dataset)
    rng = np.random.default_rng(config.seed)

    theta = template.flat()
    first = np.zeros_like(theta)
    second = np.zeros_like(theta)
    step = 0

    ll, obj, grad = full_objective(theta)
    best = (obj, theta.copy(), ll)
    nll_trace = [-ll / m]
    converged = False
    epochs = 0
    for epochs in range(1, config.max_epochs + 1):
        chunks = [None] if batch is None else np.array_split(rng.permutation(m), math.ceil(m / batch))
        for chunk in chunks:
            g = grad if chunk is None else _batch_gradient(template, theta, dataset, chunk, lam)
            if config.optimizer == "gd":
                theta = theta - config.learning_rate * g
            else:
                step += 1
                first = config.beta1 * first + (1 - config.beta1) * g
                second = config.beta2 * second + (1 - config.beta2) * g * g
                mhat = first / (1 - config.beta1**step)
                vhat = second / (1 - config.beta2**step)
                theta = theta - config.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)

        prev = obj
        ll, obj, grad = full_objective(theta)
        nll_trace.append(-ll / m)
        if obj < best[0]:
            best = (obj, theta.copy(), ll)
        if not np.isfinite(obj):
            log.warning("%s fit diverged at epoch %d", name, epochs)
            break
        if abs(prev - obj) <= config.tolerance * max(abs(obj), 1e-12):
            converged = True
            break

    obj, theta, ll = best
    params = template.with_flat(theta)
    if isinstance(params, (LuceParams, FullRankCdmParams)):
        params = gauge_normalize(params)
    return FitReport(
        model=name,
        params=params,
        final_nll=-ll / m,
        objective=obj,
        epochs_run=epochs,
        converged=converged,
        nll_trace=nll_trace,
        config=config,
    )


def fit_luce(dataset: ChoiceDataset, config: FitConfig | None = None) -> FitReport:
    config = config or FitConfig()
    report = _optimize(LuceParams(np.zeros(dataset.n)), dataset, config, "luce")
    absent = np.flatnonzero(~dataset.items_present())
    if absent.size:
        labels = [dataset.universe.labels[i] for i in absent]
        report.warnings.append(f"items never offered, utilities unconstrained: {labels}")
    return report


def fit_cdm_full(
    dataset: ChoiceDataset,
    config: FitConfig | None = None,
    *,
    init: LuceParams | FullRankCdmParams | None = None,
    check_identifiability: bool = True,
) -> FitReport:
    """Full-rank CDM MLE, warm-started from the Luce MLE unless ``init`` is given."""
    from .identifiability import project_to_row_space, quick_identifiable

    config = config or FitConfig()
    if init is None:
        init = fit_luce(dataset, config).params
    start = luce_as_cdm(init) if isinstance(init, LuceParams) else init
    ident = quick_identifiable(dataset) if (check_identifiability or config.l2 > 0) else None
    if config.l2 > 0 and ident is False and start.u.size <= PROJECT_MAX_PARAMS:
        # drop the start's null-space part, which a small penalty would take forever to shrink
        start = FullRankCdmParams(project_to_row_space(dataset, start.u))
    report = _optimize(start, dataset, config, "cdm")
    if check_identifiability and config.l2 == 0:
        if ident is False:
            report.warnings.append(
                "dataset does not identify the full-rank CDM; parameters are one of many maximizers"
            )
    return report


def low_rank_init(luce: LuceParams, rank: int, rng: np.random.Generator) -> LowRankCdmParams:
    """Rank-``r`` factors whose first column reproduces ``luce`` exactly."""
    n = luce.n
    scale = 0.1 / math.sqrt(rank)
    T = rng.normal(0.0, scale, size=(n, rank))
    C = rng.normal(0.0, scale, size=(n, rank))
    T[:, 0] = 1.0
    C[:, 0] = -luce.v
    return LowRankCdmParams(T, C)


def fit_cdm_low_rank(
    dataset: ChoiceDataset,
    rank: int,
    config: FitConfig | None = None,
    *,
    restarts: int = 1,
    luce: LuceParams | None = None,
) -> FitReport:
    """Rank-``r`` CDM fit; with ``restarts > 1`` the best of several seeds is kept."""
    config = config or FitConfig()
    if not 1 <= rank <= dataset.n:
        raise InvalidInputError(f"rank must be in [1, {dataset.n}], got {rank}")
    if restarts < 1:
        raise InvalidInputError("restarts must be at least 1")
    if luce is None:
        luce = fit_luce(dataset, config).params
    best: FitReport | None = None
    for k in range(restarts):
        seed = config.seed + k
        start = low_rank_init(luce, rank, np.random.default_rng([seed, rank]))
        report = _optimize(start, dataset, replace(config, seed=seed), f"lowrank-{rank}")
        if best is None or report.objective < best.objective:
            best = report
    assert best is not None
    return best


# ---------------------------------------------------------------------------
# evaluation and model selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeldOutResult:
    nll: float
    accuracy: float
    m: int
    zero_probability: int = 0


def evaluate_held_out(model: ChoiceModel, dataset: ChoiceDataset) -> HeldOutResult:
    """Mean NLL per observation and top-1 accuracy.

    The predicted item is the most probable member, ties going to the lowest
    index.  Observations with probability zero make the NLL ``inf`` and are
    counted in ``zero_probability``.
    """
    logp = log_probabilities(model, dataset.set_masks)
    per_obs = logp[dataset.set_ids, dataset.chosen]
    zeros = int(np.sum(per_obs == -np.inf))
    nll = float(-per_obs.mean()) if zeros == 0 else math.inf
    predicted = np.argmax(logp, axis=1)[dataset.set_ids]
    accuracy = float(np.mean(predicted == dataset.chosen))
    return HeldOutResult(nll=nll, accuracy=accuracy, m=dataset.m, zero_probability=zeros)


@dataclass
class CrossValidationResult:
    best_l2: float
    mean_nll: dict[float, float]
    folds: int
    warnings: list[str] = field(default_factory=list)


def fold_assignment(m: int, folds: int, seed: int) -> list[npt.NDArray[np.int64]]:
    order = np.random.default_rng(seed).permutation(m)
    return [np.sort(chunk) for chunk in np.array_split(order, folds)]


FitTarget = Union[int, Literal["luce", "full"], None]


def fit_model(dataset: ChoiceDataset, rank: FitTarget, config: FitConfig, restarts: int = 1) -> FitReport:
    """Dispatch: ``"luce"``, ``"full"``/``None`` for full-rank CDM, or an integer rank."""
    if rank == "luce":
        return fit_luce(dataset, config)
    if rank is None or rank == "full":
        return fit_cdm_full(dataset, config, check_identifiability=False)
    return fit_cdm_low_rank(dataset, int(rank), config, restarts=restarts)


def _cv_splits(dataset: ChoiceDataset, folds: int, seed: int):
    if folds < 2:
        raise InvalidInputError("cross-validation needs at least two folds")
    if folds > dataset.m:
        raise InvalidInputError(f"cannot split {dataset.m} observations into {folds} folds")
    parts = fold_assignment(dataset.m, folds, seed)
    notes: list[str] = []
    splits = []
    for k, test_idx in enumerate(parts):
        train_idx = np.concatenate([p for j, p in enumerate(parts) if j != k])
        train, test = dataset.subset(train_idx), dataset.subset(test_idx)
        unseen = test.items_present() & ~train.items_present()
        if unseen.any():
            notes.append(f"fold {k}: {int(unseen.sum())} items appear only in the validation fold")
        splits.append((train, test))
    return splits, notes


def cross_validate_l2(
    dataset: ChoiceDataset,
    rank: FitTarget,
    grid: list[float],
    folds: int = 5,
    config: FitConfig | None = None,
) -> CrossValidationResult:
    """Pick the l2 penalty with the lowest mean validation NLL.

    Folds are drawn once from ``config.seed`` and shared by every grid value.
    Ties go to the larger penalty.
    """
    config = config or FitConfig()
    if not grid:
        raise InvalidInputError("the penalty grid is empty")
    values = sorted({float(x) for x in grid})
    if values[0] < 0:
        raise InvalidInputError("penalties must be nonnegative")
    splits, notes = _cv_splits(dataset, folds, config.seed)

    mean_nll: dict[float, float] = {}
    for lam in values:
        cfg = replace(config, l2=lam)
        scores = [evaluate_held_out(fit_model(tr, rank, cfg).params, te).nll for tr, te in splits]
        mean_nll[lam] = float(np.mean(scores))
    best = min(values, key=lambda lam: (mean_nll[lam], -lam))
    return CrossValidationResult(best_l2=best, mean_nll=mean_nll, folds=folds, warnings=notes)


@dataclass
class RankSelectionResult:
    best_rank: int
    mean_nll: dict[int, float]
    folds: int
    warnings: list[str] = field(default_factory=list)


def cross_validate_rank(
    dataset: ChoiceDataset,
    ranks: list[int],
    folds: int = 5,
    config: FitConfig | None = None,
    restarts: int = 1,
) -> RankSelectionResult:
    """Pick the low-rank dimension with the lowest mean validation NLL.

    Uses ``config.l2`` for every fit; ties go to the smaller rank.
    """
    config = config or FitConfig()
    values = sorted({int(r) for r in ranks})
    if not values or values[0] < 1:
        raise InvalidInputError("ranks must be positive integers")
    splits, notes = _cv_splits(dataset, folds, config.seed)
    mean_nll = {
        r: float(np.mean([evaluate_held_out(fit_model(tr, r, config, restarts).params, te).nll for tr, te in splits]))
        for r in values
    }
    best = min(values, key=lambda r: (mean_nll[r], r))
    return RankSelectionResult(best_rank=best, mean_nll=mean_nll, folds=folds, warnings=notes)
