"""Design-matrix identifiability test for the full-rank CDM.

The indicator row ``g_{x,C}`` satisfies ``g_{x,C} . u = |C| * beta_{x,C}`` where
``beta`` is the log of ``P(x|C)`` over the geometric mean of the probabilities
in ``C``.  Stacking rows over the distinct sets of a dataset gives an integer
matrix whose rank is ``n(n-1) - 1`` exactly when the dataset pins down ``u``
up to a constant shift.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
import numpy.typing as npt

from .core import ChoiceDataset, ChoiceSet, check_choice_set, pair_index
from .errors import InvalidInputError

IntArray = npt.NDArray[np.int64]

#: Largest design (after row reduction) ranked by exact Bareiss elimination.
EXACT_MAX_CELLS = 60_000
#: Beyond this many parameters no rank is computed at all.
RANK_MAX_PARAMS = 2_500
#: lambda_2(L) needs a dense d x d eigendecomposition.
EIGEN_MAX_ITEMS = 60
LAMBDA2_TOL = 1e-9
PRIMES = (2_147_483_647, 2_147_483_629)


def indicator_vector(x: int, choice_set: Iterable[int], n: int) -> IntArray:
    """Integer row ``g_{x,C}`` of length ``n(n-1)``.

    ``|C|-1`` at every ``(x, z)``, ``-1`` at every ``(y, z)`` with ``y != x``,
    both ranging over members of ``C``.
    """
    members = check_choice_set(choice_set, n)
    if x not in members:
        raise InvalidInputError(f"item {x} is not in {members}")
    return _set_block(members, n)[members.index(x)]


def _set_block(members: Sequence[int], n: int, pidx: IntArray | None = None) -> IntArray:
    """All ``|C|`` indicator rows of one set, in member order."""
    if pidx is None:
        pidx = pair_index(n)
    k = len(members)
    sub = pidx[np.ix_(members, members)]
    off = ~np.eye(k, dtype=bool)
    block = np.zeros((k, n * (n - 1)), dtype=np.int64)
    block[:, sub[off]] = -1
    for i in range(k):
        block[i, sub[i, off[i]]] = k - 1
    return block


def log_ratio_beta(probs: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """``log(P_x / geometric_mean(P))`` for each member of a set."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise InvalidInputError("need a probability vector over at least two items")
    if np.any(p <= 0):
        raise InvalidInputError("log-ratios need strictly positive probabilities")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InvalidInputError("probabilities must sum to 1")
    logp = np.log(p)
    return logp - logp.mean()


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    rows: IntArray
    row_index: list[tuple[ChoiceSet, int]]
    n: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape


def build_design_matrix(dataset: ChoiceDataset) -> DesignMatrix:
    """Stack ``g_{x,C}`` over every distinct set ``C`` and member ``x``."""
    n = dataset.n
    pidx = pair_index(n)
    blocks = []
    tags: list[tuple[ChoiceSet, int]] = []
    for members in dataset.unique_sets:
        blocks.append(_set_block(members, n, pidx))
        tags.extend((members, x) for x in members)
    return DesignMatrix(np.vstack(blocks), tags, n)


# ---------------------------------------------------------------------------
# rank
# ---------------------------------------------------------------------------


def rank_exact(matrix: npt.ArrayLike) -> int:
    """Rank over the rationals by fraction-free (Bareiss) elimination.

    Works in int64 while intermediate products provably fit and switches to
    Python integers otherwise.
    """
    a = np.asarray(matrix)
    if a.ndim != 2:
        raise InvalidInputError("rank_exact expects a 2-D matrix")
    if a.size == 0:
        return 0
    if a.dtype.kind == "f":
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise InvalidInputError("rank_exact needs integer entries")
        a = a.astype(np.int64)
    work = a.astype(np.int64) if a.dtype.kind in "iub" else a.astype(object)
    n_rows, n_cols = work.shape
    prev = 1
    row = 0
    limit = 2**62
    for col in range(n_cols):
        if row == n_rows:
            break
        column = np.abs(work[row:, col])
        if not np.any(column != 0):
            continue
        pivot = row + int(np.argmax(column))
        if pivot != row:
            work[[row, pivot]] = work[[pivot, row]]
        if work.dtype != object:
            big = int(np.abs(work[row:, col:]).max())
            if 2 * big * big >= limit:
                work = work.astype(object)
        p = work[row, col]
        rest = work[row + 1 :, col:]
        lead = work[row + 1 :, col : col + 1]
        work[row + 1 :, col:] = (p * rest - lead * work[row, col:]) // prev
        prev = p
        row += 1
    return row


def rank_modular(matrix: npt.ArrayLike, prime: int = PRIMES[0]) -> int:
    """Rank of an integer matrix over GF(prime); a lower bound on the rational rank."""
    work = np.mod(np.asarray(matrix, dtype=np.int64), prime)
    n_rows, n_cols = work.shape
    row = 0
    for col in range(n_cols):
        if row == n_rows:
            break
        nz = np.flatnonzero(work[row:, col])
        if nz.size == 0:
            continue
        pivot = row + int(nz[0])
        if pivot != row:
            work[[row, pivot]] = work[[pivot, row]]
        inv = pow(int(work[row, col]), prime - 2, prime)
        work[row, col:] = (work[row, col:] * inv) % prime
        below = work[row + 1 :, col]
        hit = np.flatnonzero(below)
        if hit.size:
            targets = row + 1 + hit
            work[targets, col:] = (work[targets, col:] - (below[hit, None] * work[row, col:]) % prime) % prime
        row += 1
    return row


def _reduced_rows(design: DesignMatrix) -> IntArray:
    """Drop the last row of every set: each set's rows sum to zero."""
    keep = []
    start = 0
    for members in dict.fromkeys(tag[0] for tag in design.row_index):
        k = len(members)
        keep.extend(range(start, start + k - 1))
        start += k
    return design.rows[keep]


RankMethod = Literal["exact", "modular", "skipped"]


def design_rank(design: DesignMatrix) -> tuple[int | None, RankMethod]:
    """Rank of ``G`` and how it was obtained.

    Small designs use :func:`rank_exact`.  Larger ones use elimination modulo a
    large prime: a modular rank equal to ``n(n-1) - 1`` is exact because it is
    also the largest possible rational rank; anything lower is reported as
    ``"modular"`` (correct unless the prime divides every maximal minor).
    """
    d = design.n * (design.n - 1)
    if d > RANK_MAX_PARAMS:
        return None, "skipped"
    rows = _reduced_rows(design)
    if rows.size <= EXACT_MAX_CELLS:
        return rank_exact(rows), "exact"
    best = 0
    for prime in PRIMES:
        best = max(best, rank_modular(rows, prime))
        if best == d - 1:
            return best, "exact"
    return best, "modular"


def svd_rank(design: DesignMatrix) -> int:
    """Floating-point rank with tolerance ``1e-8 * sigma_max``; diagnostic only."""
    s = np.linalg.svd(design.rows.astype(float), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > 1e-8 * s[0]))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def project_to_row_space(dataset: ChoiceDataset, u: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Minimum-norm ``u'`` with ``G u' = G u``: same probabilities on every observed set."""
    u = np.asarray(u, dtype=float)
    design = _reduced_rows(build_design_matrix(dataset)).astype(float)
    return np.linalg.lstsq(design, design @ u, rcond=None)[0]


def weighted_gram(dataset: ChoiceDataset, design: DesignMatrix | None = None) -> npt.NDArray[np.float64]:
    """``L = X^T X / m`` with ``X`` the per-observation rows scaled by ``1/|C|``."""
    design = design or build_design_matrix(dataset)
    counts = np.bincount(dataset.set_ids, minlength=len(dataset.unique_sets)).astype(float)
    weights = np.concatenate(
        [np.full(len(s), math.sqrt(c) / len(s)) for s, c in zip(dataset.unique_sets, counts)]
    )
    x = design.rows * weights[:, None]
    return (x.T @ x) / dataset.m


def lambda2(dataset: ChoiceDataset, design: DesignMatrix | None = None) -> float:
    eig = np.linalg.eigvalsh(weighted_gram(dataset, design))
    return float(max(eig[1], 0.0))


def complete_sizes(dataset: ChoiceDataset) -> list[int]:
    """Set sizes for which every subset of the universe is observed."""
    n = dataset.n
    counts: dict[int, int] = {}
    for s in dataset.unique_sets:
        counts[len(s)] = counts.get(len(s), 0) + 1
    return sorted(k for k, c in counts.items() if c == math.comb(n, k))


def two_sizes_condition(dataset: ChoiceDataset) -> bool:
    """All sets of two sizes observed, at least one size outside ``{2, n}``."""
    full = complete_sizes(dataset)
    return len(full) >= 2 and any(k not in (2, dataset.n) for k in full)


def single_size(dataset: ChoiceDataset) -> bool:
    return len({len(s) for s in dataset.unique_sets}) == 1


@dataclass(frozen=True)
class IdentifiabilityReport:
    identifiable: bool | None
    rank: int | None
    deficiency: int | None
    n_params: int
    rank_method: RankMethod
    condition_thm1: bool
    single_size_flag: bool
    lambda2_L: float | None
    svd_rank: int | None
    n_unique_sets: int
    design_shape: tuple[int, int]


def identifiability_report(dataset: ChoiceDataset, *, diagnostics: bool = True) -> IdentifiabilityReport:
    """Decide whether ``dataset`` identifies the full-rank CDM.

    The verdict comes from the rank of the design matrix.  When the rank is
    too expensive to compute, a single-size design is still declared
    non-identifiable and anything else is left undecided (``None``).
    """
    n = dataset.n
    d = n * (n - 1)
    design = build_design_matrix(dataset)
    rank, method = design_rank(design)
    flag = single_size(dataset)
    if rank is not None:
        identifiable: bool | None = rank == d - 1
    else:
        identifiable = False if flag else None
    lam2 = None
    srank = None
    if diagnostics and n <= EIGEN_MAX_ITEMS:
        lam2 = lambda2(dataset, design)
        srank = svd_rank(design) if design.rows.size <= 4_000_000 else None
    return IdentifiabilityReport(
        identifiable=identifiable,
        rank=rank,
        deficiency=None if rank is None else d - 1 - rank,
        n_params=d,
        rank_method=method,
        condition_thm1=two_sizes_condition(dataset),
        single_size_flag=flag,
        lambda2_L=lam2,
        svd_rank=srank,
        n_unique_sets=len(dataset.unique_sets),
        design_shape=design.shape,
    )


def quick_identifiable(dataset: ChoiceDataset) -> bool | None:
    """Identifiability verdict without the spectral diagnostics."""
    return identifiability_report(dataset, diagnostics=False).identifiable
