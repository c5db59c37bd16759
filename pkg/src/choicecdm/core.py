"""Domain types, choice-probability kernels, log-likelihoods and gradients.

Every model class is evaluated through the same batched kernel: a dataset is
aggregated into a ``(K, n)`` boolean matrix of set memberships (one row per
distinct choice set) and a ``(K, n)`` matrix of choice counts.  Utilities for
all sets are then a single matrix product, and probabilities a masked
log-softmax along each row.
"""

from __future__ import annotations

import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Union

import numpy as np
import numpy.typing as npt

from .errors import InvalidInputError, MissingSetError, ZeroProbabilityWarning

FloatArray = npt.NDArray[np.float64]
ChoiceSet = tuple[int, ...]


# ---------------------------------------------------------------------------
# ordered-pair indexing for u_xz
# ---------------------------------------------------------------------------


def pair_position(x: int, z: int, n: int) -> int:
    """Position of ``u_xz`` in the flat length ``n(n-1)`` parameter vector.

    Pairs are laid out lexicographically in ``(x, z)`` with ``x == z`` skipped.
    """
    if x == z:
        raise InvalidInputError(f"u_{x}{z} is a diagonal entry and is not stored")
    if not (0 <= x < n and 0 <= z < n):
        raise InvalidInputError(f"pair ({x}, {z}) out of range for n={n}")
    return x * (n - 1) + (z if z < x else z - 1)


def pair_index(n: int) -> npt.NDArray[np.int64]:
    """``n x n`` map from ``(x, z)`` to flat position; the diagonal holds -1."""
    idx = np.full((n, n), -1, dtype=np.int64)
    off = ~np.eye(n, dtype=bool)
    idx[off] = np.arange(n * (n - 1))
    return idx


def pairs(n: int) -> list[tuple[int, int]]:
    """Ordered pairs in storage order."""
    return [(x, z) for x in range(n) for z in range(n) if x != z]


def n_from_pair_count(d: int) -> int:
    n = int(round((1 + np.sqrt(1 + 4 * d)) / 2))
    if n * (n - 1) != d or n < 2:
        raise InvalidInputError(f"{d} is not n(n-1) for any n >= 2")
    return n


def offdiag_to_matrix(u: npt.ArrayLike, n: int) -> FloatArray:
    """Scatter a flat ``u`` into an ``n x n`` matrix with a zero diagonal."""
    u = np.asarray(u, dtype=float)
    mat = np.zeros((n, n))
    mat[~np.eye(n, dtype=bool)] = u
    return mat


def matrix_to_offdiag(mat: npt.ArrayLike) -> FloatArray:
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[0]
    return mat[~np.eye(n, dtype=bool)].copy()


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ItemUniverse:
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        labels = tuple(str(label) for label in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise InvalidInputError("a universe needs at least two items")
        if len(set(labels)) != len(labels):
            raise InvalidInputError("item labels must be unique")

    @property
    def n(self) -> int:
        return len(self.labels)

    @cached_property
    def index(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.labels)}

    @classmethod
    def of_size(cls, n: int) -> ItemUniverse:
        return cls(tuple(str(i) for i in range(n)))


class ChoiceObservation(NamedTuple):
    choice_set: ChoiceSet
    chosen: int


def check_choice_set(choice_set: Iterable[int], n: int) -> ChoiceSet:
    """Validate a choice set against a universe of size ``n``.

    Order is preserved so that returned probability vectors line up with the
    caller's sequence.
    """
    members = tuple(int(i) for i in choice_set)
    if len(members) < 2:
        raise InvalidInputError(f"choice set {members} has fewer than two items")
    if len(set(members)) != len(members):
        raise InvalidInputError(f"choice set {members} has repeated items")
    for i in members:
        if not 0 <= i < n:
            raise InvalidInputError(f"item index {i} out of range for n={n}")
    return members


@dataclass(frozen=True, eq=False)
class ChoiceDataset:
    """A universe of items plus a list of (choice set, chosen item) records."""

    universe: ItemUniverse
    observations: tuple[ChoiceObservation, ...]

    def __post_init__(self) -> None:
        n = self.universe.n
        obs = []
        for o in self.observations:
            members = tuple(sorted(check_choice_set(o[0], n)))
            chosen = int(o[1])
            if chosen not in members:
                raise InvalidInputError(f"chosen item {chosen} is not in {members}")
            obs.append(ChoiceObservation(members, chosen))
        if not obs:
            raise InvalidInputError("a dataset needs at least one observation")
        object.__setattr__(self, "observations", tuple(obs))

    @classmethod
    def from_pairs(
        cls, n_or_universe: int | ItemUniverse, records: Iterable[tuple[Iterable[int], int]]
    ) -> ChoiceDataset:
        universe = (
            n_or_universe
            if isinstance(n_or_universe, ItemUniverse)
            else ItemUniverse.of_size(n_or_universe)
        )
        return cls(universe, tuple(ChoiceObservation(tuple(s), c) for s, c in records))

    @property
    def n(self) -> int:
        return self.universe.n

    @property
    def m(self) -> int:
        return len(self.observations)

    def __len__(self) -> int:
        return len(self.observations)

    @cached_property
    def _aggregate(self) -> tuple[tuple[ChoiceSet, ...], npt.NDArray[np.int64], npt.NDArray[np.bool_], FloatArray]:
        position: dict[ChoiceSet, int] = {}
        set_ids = np.empty(self.m, dtype=np.int64)
        for j, o in enumerate(self.observations):
            set_ids[j] = position.setdefault(o.choice_set, len(position))
        unique = tuple(position)
        masks = np.zeros((len(unique), self.n), dtype=bool)
        for k, s in enumerate(unique):
            masks[k, list(s)] = True
        counts = np.zeros((len(unique), self.n))
        chosen = np.fromiter((o.chosen for o in self.observations), dtype=np.int64, count=self.m)
        np.add.at(counts, (set_ids, chosen), 1.0)
        return unique, set_ids, masks, counts

    @property
    def unique_sets(self) -> tuple[ChoiceSet, ...]:
        """Distinct choice sets, in order of first appearance."""
        return self._aggregate[0]

    @property
    def set_ids(self) -> npt.NDArray[np.int64]:
        """For each observation, the row of its set in :attr:`unique_sets`."""
        return self._aggregate[1]

    @property
    def set_masks(self) -> npt.NDArray[np.bool_]:
        return self._aggregate[2]

    @property
    def choice_counts(self) -> FloatArray:
        """``(K, n)`` matrix: times each item was chosen from each unique set."""
        return self._aggregate[3]

    @cached_property
    def chosen(self) -> npt.NDArray[np.int64]:
        return np.fromiter((o.chosen for o in self.observations), dtype=np.int64, count=self.m)

    def subset(self, indices: Sequence[int] | npt.NDArray[np.int64]) -> ChoiceDataset:
        """Observations at ``indices`` over the same universe."""
        return ChoiceDataset(self.universe, tuple(self.observations[int(i)] for i in indices))

    def items_present(self) -> npt.NDArray[np.bool_]:
        """Which items appear in at least one choice set."""
        return self.set_masks.any(axis=0)

    def set_size_histogram(self) -> dict[int, int]:
        sizes = np.bincount([len(o.choice_set) for o in self.observations])
        return {k: int(c) for k, c in enumerate(sizes) if c}


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LuceParams:
    """Multinomial logit: one utility per item."""

    v: FloatArray

    def __post_init__(self) -> None:
        v = np.array(self.v, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise InvalidInputError("Luce utilities must be a vector of length n >= 2")
        object.__setattr__(self, "v", v)

    @property
    def n(self) -> int:
        return self.v.size

    def flat(self) -> FloatArray:
        return self.v.copy()

    def with_flat(self, theta: FloatArray) -> LuceParams:
        return LuceParams(theta)


@dataclass(frozen=True, eq=False)
class FullRankCdmParams:
    """Full-rank CDM: one pairwise context utility ``u_xz`` per ordered pair."""

    u: FloatArray

    def __post_init__(self) -> None:
        u = np.array(self.u, dtype=float)
        if u.ndim != 1:
            raise InvalidInputError("u must be a flat vector of length n(n-1)")
        n_from_pair_count(u.size)
        object.__setattr__(self, "u", u)

    @property
    def n(self) -> int:
        return n_from_pair_count(self.u.size)

    def matrix(self) -> FloatArray:
        """``U[x, z] = u_xz`` with zeros on the (unused) diagonal."""
        return offdiag_to_matrix(self.u, self.n)

    @classmethod
    def from_matrix(cls, mat: npt.ArrayLike) -> FullRankCdmParams:
        return cls(matrix_to_offdiag(mat))

    def flat(self) -> FloatArray:
        return self.u.copy()

    def with_flat(self, theta: FloatArray) -> FullRankCdmParams:
        return FullRankCdmParams(theta)


@dataclass(frozen=True, eq=False)
class LowRankCdmParams:
    """Rank-``r`` CDM with ``u_xz = c_z . t_x``.

    ``T`` holds target vectors and ``C`` context vectors, one row per item.
    """

    T: FloatArray
    C: FloatArray

    def __post_init__(self) -> None:
        T = np.array(self.T, dtype=float)
        C = np.array(self.C, dtype=float)
        if T.ndim != 2 or T.shape != C.shape:
            raise InvalidInputError("T and C must be n x r matrices of the same shape")
        if T.shape[1] == 0:
            raise InvalidInputError("rank must be at least 1")
        if T.shape[1] > T.shape[0]:
            raise InvalidInputError("rank cannot exceed the number of items")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.T.shape[0]

    @property
    def rank(self) -> int:
        return self.T.shape[1]

    def matrix(self) -> FloatArray:
        mat = self.T @ self.C.T
        np.fill_diagonal(mat, 0.0)
        return mat

    def to_full_rank(self) -> FullRankCdmParams:
        return FullRankCdmParams.from_matrix(self.matrix())

    def flat(self) -> FloatArray:
        return np.concatenate([self.T.ravel(), self.C.ravel()])

    def with_flat(self, theta: FloatArray) -> LowRankCdmParams:
        half = self.T.size
        return LowRankCdmParams(theta[:half].reshape(self.T.shape), theta[half:].reshape(self.C.shape))


@dataclass(frozen=True, eq=False)
class SaturatedModel:
    """Universal logit: an unconstrained probability vector for each stored set.

    Keys are sorted item tuples; each vector is aligned with its key.
    """

    n: int
    probs: dict[ChoiceSet, FloatArray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        clean: dict[ChoiceSet, FloatArray] = {}
        for key, vec in self.probs.items():
            members = check_choice_set(key, self.n)
            vec = np.array(vec, dtype=float)
            order = np.argsort(members)
            members = tuple(members[i] for i in order)
            vec = vec[order]
            if vec.shape != (len(members),):
                raise InvalidInputError(f"probability vector for {members} has the wrong length")
            if np.any(vec < 0) or abs(vec.sum() - 1.0) > 1e-12:
                raise InvalidInputError(f"probabilities for {members} must be nonnegative and sum to 1")
            clean[members] = vec
        object.__setattr__(self, "probs", clean)


ParametricModel = Union[LuceParams, FullRankCdmParams, LowRankCdmParams]
ChoiceModel = Union[LuceParams, FullRankCdmParams, LowRankCdmParams, SaturatedModel]


# ---------------------------------------------------------------------------
# batched kernel
# ---------------------------------------------------------------------------


def utilities(model: ParametricModel, masks: npt.NDArray[np.bool_]) -> FloatArray:
    """Utility of every item in every set (rows of ``masks``).

    Entries for items outside a set are meaningless and must be masked by the
    caller.
    """
    if isinstance(model, LuceParams):
        return np.broadcast_to(model.v, masks.shape)
    if isinstance(model, (FullRankCdmParams, LowRankCdmParams)):
        return masks @ model.matrix().T
    raise TypeError(f"no utility kernel for {type(model).__name__}")


def masked_log_softmax(util: FloatArray, masks: npt.NDArray[np.bool_]) -> FloatArray:
    """Row-wise log-softmax restricted to ``masks``; -inf outside."""
    z = np.where(masks, util, -np.inf)
    top = z.max(axis=1, keepdims=True)
    lse = top + np.log(np.exp(z - top).sum(axis=1, keepdims=True))
    return z - lse


def log_probabilities(model: ChoiceModel, masks: npt.NDArray[np.bool_]) -> FloatArray:
    """``(K, n)`` log choice probabilities; -inf outside each set."""
    if isinstance(model, SaturatedModel):
        out = np.full(masks.shape, -np.inf)
        for k, row in enumerate(masks):
            members = tuple(np.flatnonzero(row).tolist())
            try:
                vec = model.probs[members]
            except KeyError:
                raise MissingSetError(f"saturated model has no probabilities for set {members}") from None
            with np.errstate(divide="ignore"):
                out[k, list(members)] = np.log(vec)
        return out
    return masked_log_softmax(utilities(model, masks), masks)


def _single_set_mask(choice_set: Iterable[int], n: int) -> tuple[ChoiceSet, npt.NDArray[np.bool_]]:
    members = check_choice_set(choice_set, n)
    mask = np.zeros((1, n), dtype=bool)
    mask[0, list(members)] = True
    return members, mask


def choice_probabilities(model: ChoiceModel, choice_set: Iterable[int]) -> FloatArray:
    """Probability of each member of ``choice_set`` (in the given order)."""
    members, mask = _single_set_mask(choice_set, model.n)
    if isinstance(model, SaturatedModel):
        key = tuple(sorted(members))
        if key not in model.probs:
            raise MissingSetError(f"saturated model has no probabilities for set {key}")
        return model.probs[key][np.argsort(np.argsort(members))].copy()
    return np.exp(log_probabilities(model, mask)[0, list(members)])


def luce_probabilities(params: LuceParams, choice_set: Iterable[int]) -> FloatArray:
    return choice_probabilities(params, choice_set)


def cdm_probabilities(params: FullRankCdmParams, choice_set: Iterable[int]) -> FloatArray:
    return choice_probabilities(params, choice_set)


def low_rank_probabilities(params: LowRankCdmParams, choice_set: Iterable[int]) -> FloatArray:
    return choice_probabilities(params, choice_set)


def saturated_probabilities(model: SaturatedModel, choice_set: Iterable[int]) -> FloatArray:
    return choice_probabilities(model, choice_set)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


def log_likelihood_from_counts(
    model: ChoiceModel, masks: npt.NDArray[np.bool_], counts: FloatArray
) -> float:
    logp = log_probabilities(model, masks)
    hit = counts > 0
    return float(np.sum(counts[hit] * logp[hit]))


def log_likelihood(model: ChoiceModel, dataset: ChoiceDataset) -> float:
    """Sum over observations of ``log P(chosen | choice_set)``.

    Returns ``-inf`` and emits :class:`ZeroProbabilityWarning` when an observed
    choice has probability exactly zero (possible only for saturated models).
    """
    if model.n != dataset.n:
        raise InvalidInputError(f"model has {model.n} items but dataset has {dataset.n}")
    ll = log_likelihood_from_counts(model, dataset.set_masks, dataset.choice_counts)
    if ll == -np.inf:
        warnings.warn("an observed choice has zero probability", ZeroProbabilityWarning, stacklevel=2)
    return ll


def _residuals(model: ParametricModel, masks: npt.NDArray[np.bool_], counts: FloatArray) -> tuple[float, FloatArray]:
    logp = log_probabilities(model, masks)
    p = np.exp(logp)
    totals = counts.sum(axis=1, keepdims=True)
    hit = counts > 0
    ll = float(np.sum(counts[hit] * logp[hit]))
    return ll, counts - totals * p


def loglik_and_gradient(
    model: ParametricModel, masks: npt.NDArray[np.bool_], counts: FloatArray
) -> tuple[float, FloatArray]:
    """Log-likelihood and its gradient with respect to ``model.flat()``."""
    ll, resid = _residuals(model, masks, counts)
    if isinstance(model, LuceParams):
        return ll, resid.sum(axis=0)
    grad_u = resid.T @ masks
    np.fill_diagonal(grad_u, 0.0)
    if isinstance(model, FullRankCdmParams):
        return ll, matrix_to_offdiag(grad_u)
    if isinstance(model, LowRankCdmParams):
        return ll, np.concatenate([(grad_u @ model.C).ravel(), (grad_u.T @ model.T).ravel()])
    raise TypeError(f"no gradient for {type(model).__name__}")


def log_likelihood_gradient(model: ParametricModel, dataset: ChoiceDataset) -> FloatArray:
    """Analytic gradient of :func:`log_likelihood` in the raw parameter layout.

    Low-rank gradients are returned flat, ``T`` block first then ``C``, to match
    :meth:`LowRankCdmParams.flat`.
    """
    if model.n != dataset.n:
        raise InvalidInputError(f"model has {model.n} items but dataset has {dataset.n}")
    return loglik_and_gradient(model, dataset.set_masks, dataset.choice_counts)[1]


# ---------------------------------------------------------------------------
# gauge and reparameterizations
# ---------------------------------------------------------------------------


def gauge_normalize(params: LuceParams | FullRankCdmParams) -> LuceParams | FullRankCdmParams:
    """Subtract the mean entry so the utilities sum to zero."""
    if isinstance(params, LuceParams):
        return LuceParams(params.v - params.v.mean())
    if isinstance(params, FullRankCdmParams):
        return FullRankCdmParams(params.u - params.u.mean())
    raise TypeError(f"gauge normalization is not defined for {type(params).__name__}")


def luce_as_cdm(params: LuceParams) -> FullRankCdmParams:
    """Full-rank CDM reproducing the Luce probabilities on every set.

    Uses ``u_xz = -v(z)``: item ``x`` then has utility ``v(x) - sum_{z in C} v(z)``
    in ``C`` and the sum is common to all members.  (Setting ``u_xz = v(x)``
    instead scales utilities by ``|C| - 1`` and only agrees on pairs.)
    """
    n = params.n
    return FullRankCdmParams.from_matrix(np.broadcast_to(-params.v[None, :], (n, n)))


def m2_to_cdm(v: npt.ArrayLike, v_pair: npt.ArrayLike) -> FullRankCdmParams:
    """Map second-order universal-logit terms to CDM parameters.

    ``v`` holds first-order terms ``v(x)``; ``v_pair[x, z]`` holds ``v(x | {z})``
    (diagonal ignored).  Returns ``u_xz = v(x|{z}) - v(z)``.
    """
    v = np.asarray(v, dtype=float)
    v_pair = np.asarray(v_pair, dtype=float)
    return FullRankCdmParams.from_matrix(v_pair - v[None, :])


def cdm_to_m2(params: FullRankCdmParams) -> tuple[FloatArray, FloatArray]:
    """Constrained second-order terms recovered from sum-zero CDM parameters.

    ``v(z) = -mean_{x != z} u_xz`` and ``v(x|{z}) = u_xz - mean_{y != z} u_yz``.
    The input is gauge-normalized first; the returned terms satisfy
    ``sum_x v(x) = 0`` and ``sum_{x != z} v(x|{z}) = 0`` for every ``z``.
    """
    u = gauge_normalize(params)
    n = u.n
    mat = u.matrix()
    col_mean = mat.sum(axis=0) / (n - 1)
    v = -col_mean
    v_pair = mat - col_mean[None, :]
    np.fill_diagonal(v_pair, 0.0)
    return v, v_pair


def m2_probabilities(v: npt.ArrayLike, v_pair: npt.ArrayLike, choice_set: Iterable[int]) -> FloatArray:
    """Second-order model probabilities written with the constrained terms."""
    v = np.asarray(v, dtype=float)
    v_pair = np.asarray(v_pair, dtype=float)
    members = check_choice_set(choice_set, v.size)
    util = np.array([v[x] + sum(v_pair[x, z] for z in members if z != x) for x in members])
    util -= util.max()
    w = np.exp(util)
    return w / w.sum()
