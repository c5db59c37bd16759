"""Design matrix, exact rank and the identifiability report."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from choicecdm import identifiability as ident
from choicecdm.core import ChoiceDataset, FullRankCdmParams, cdm_probabilities, pair_position
from choicecdm.errors import InvalidInputError
from choicecdm.identifiability import (
    build_design_matrix,
    design_rank,
    identifiability_report,
    indicator_vector,
    lambda2,
    log_ratio_beta,
    project_to_row_space,
    rank_exact,
    rank_modular,
)

from _helpers import all_sets, random_dataset

REVERSAL_U = np.array([0.693, 0.693, 2.784, -3.477, 2.784, -3.477])


def design_of(n, sizes):
    """One observation per set of the given sizes."""
    return ChoiceDataset.from_pairs(n, [(s, s[0]) for s in all_sets(n, sizes)])


def numpy_rank(a):
    return int(np.linalg.matrix_rank(np.asarray(a, dtype=float)))


class TestIndicatorVector:
    def test_pair(self):
        g = indicator_vector(0, (0, 1), 3)
        expected = np.zeros(6, dtype=int)
        expected[pair_position(0, 1, 3)] = 1
        expected[pair_position(1, 0, 3)] = -1
        np.testing.assert_array_equal(g, expected)

    def test_triple_coefficients(self):
        g = indicator_vector(1, (0, 1, 3), 4)
        assert g[pair_position(1, 0, 4)] == 2 and g[pair_position(1, 3, 4)] == 2
        for x, z in [(0, 1), (0, 3), (3, 0), (3, 1)]:
            assert g[pair_position(x, z, 4)] == -1
        assert np.count_nonzero(g) == 6

    def test_rows_sum_to_zero(self):
        for members in all_sets(5):
            for x in members:
                assert indicator_vector(x, members, 5).sum() == 0

    def test_reversal_pair_value(self):
        beta = 0.5 * math.log(0.11 / 0.89)
        g = indicator_vector(0, (0, 1), 3)
        assert g @ REVERSAL_U == pytest.approx(0.693 - 2.784, abs=1e-12)
        assert g @ REVERSAL_U == pytest.approx(2 * beta, abs=2e-2)

    def test_log_ratio_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 7))
            u = rng.normal(size=n * (n - 1)) * 2
            members = tuple(rng.choice(n, size=int(rng.integers(2, n + 1)), replace=False).tolist())
            beta = log_ratio_beta(cdm_probabilities(FullRankCdmParams(u), members))
            for i, x in enumerate(members):
                assert indicator_vector(x, members, n) @ u == pytest.approx(len(members) * beta[i], abs=1e-10)

    def test_member_required(self):
        with pytest.raises(InvalidInputError):
            indicator_vector(2, (0, 1), 3)


class TestLogRatioBeta:
    def test_uniform(self):
        np.testing.assert_allclose(log_ratio_beta([0.25] * 4), 0.0, atol=1e-15)

    def test_worked_example(self):
        g = (0.8 * 0.1 * 0.1) ** (1 / 3)
        assert g == pytest.approx(0.2, abs=1e-12)
        np.testing.assert_allclose(log_ratio_beta([0.8, 0.1, 0.1]), [math.log(4), math.log(0.5), math.log(0.5)], atol=1e-12)
        np.testing.assert_allclose(log_ratio_beta([0.8, 0.1, 0.1]), [1.386, -0.693, -0.693], atol=1e-3)

    @given(hnp.arrays(np.float64, st.integers(2, 8), elements=st.floats(0.01, 1.0)))
    def test_softmax_round_trip(self, w):
        p = w / w.sum()
        beta = log_ratio_beta(p)
        back = np.exp(beta - beta.max())
        np.testing.assert_allclose(back / back.sum(), p, atol=1e-12)

    @pytest.mark.parametrize("probs", [[1.0], [0.5, 0.6], [1.0, 0.0]])
    def test_rejects(self, probs):
        with pytest.raises(InvalidInputError):
            log_ratio_beta(probs)


class TestDesignMatrix:
    def test_shape_n3(self):
        design = build_design_matrix(design_of(3, [2, 3]))
        assert design.shape == (9, 6)
        assert np.all(design.rows.sum(axis=1) == 0)

    def test_duplicates_ignored(self):
        once = design_of(4, [2, 3])
        twice = ChoiceDataset(once.universe, once.observations * 2)
        np.testing.assert_array_equal(build_design_matrix(once).rows, build_design_matrix(twice).rows)

    def test_rank_n4_two_sizes(self):
        assert rank_exact(build_design_matrix(design_of(4, [2, 3])).rows) == 11

    def test_all_ones_in_null_space(self):
        rng = np.random.default_rng(1)
        design = build_design_matrix(random_dataset(rng, 5, 30))
        assert np.all(design.rows @ np.ones(20) == 0)


class TestRankExact:
    def test_identity(self):
        assert rank_exact(np.eye(5, dtype=int)) == 5

    def test_zero(self):
        assert rank_exact(np.zeros((4, 3), dtype=int)) == 0

    def test_repeated_rows(self):
        a = np.vstack([np.eye(5, dtype=int), np.eye(5, dtype=int)[[2, 2]]])
        assert rank_exact(a) == 5

    @settings(max_examples=100, deadline=None)
    @given(
        hnp.arrays(
            np.int64,
            st.tuples(st.integers(1, 7), st.integers(1, 7)),
            elements=st.integers(-3, 3),
        )
    )
    def test_matches_float_rank(self, a):
        assert rank_exact(a) == numpy_rank(a)

    def test_low_rank_product(self):
        rng = np.random.default_rng(2)
        a = rng.integers(-5, 6, size=(12, 3)) @ rng.integers(-5, 6, size=(3, 10))
        assert rank_exact(a) == numpy_rank(a) <= 3

    def test_large_entries_switch_to_python_ints(self):
        big = 2**40
        a = np.array([[big, 1, 0], [1, big, 1], [big + 1, big + 1, 1]], dtype=np.int64)
        # third row = first + second
        assert rank_exact(a) == 2

    def test_float_input(self):
        assert rank_exact(np.array([[1.0, 2.0], [2.0, 4.0]])) == 1
        with pytest.raises(InvalidInputError):
            rank_exact(np.array([[0.5, 1.0]]))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.int64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(-9, 9)))
    def test_modular_agrees_on_small_matrices(self, a):
        assert rank_modular(a) == rank_exact(a)


class TestDesignRank:
    def test_modular_path_certifies_full_rank(self, monkeypatch):
        data = design_of(5, [2, 3])
        monkeypatch.setattr(ident, "EXACT_MAX_CELLS", 0)
        assert design_rank(build_design_matrix(data)) == (19, "exact")

    def test_modular_path_deficient(self, monkeypatch):
        data = design_of(5, [3])
        exact, _ = design_rank(build_design_matrix(data))
        monkeypatch.setattr(ident, "EXACT_MAX_CELLS", 0)
        assert design_rank(build_design_matrix(data)) == (exact, "modular")

    def test_skipped_when_too_large(self, monkeypatch):
        monkeypatch.setattr(ident, "RANK_MAX_PARAMS", 10)
        report = identifiability_report(design_of(4, [3]), diagnostics=False)
        assert report.rank is None and report.rank_method == "skipped"
        assert report.identifiable is False  # single size still decides
        report = identifiability_report(design_of(4, [2, 3]), diagnostics=False)
        assert report.identifiable is None


class TestReport:
    def test_pairs_only(self):
        report = identifiability_report(design_of(6, [2]))
        assert report.single_size_flag and report.identifiable is False
        assert report.deficiency > 0

    def test_two_sizes(self):
        report = identifiability_report(design_of(4, [2, 3]))
        assert report.identifiable is True
        assert report.condition_thm1 and not report.single_size_flag
        assert report.rank == report.n_params - 1 == 11
        assert report.svd_rank == 11
        assert report.lambda2_L > 1e-9

    def test_uniform_random_sets(self):
        rng = np.random.default_rng(3)
        report = identifiability_report(random_dataset(rng, 6, 500))
        assert report.identifiable is True

    def test_rank_and_lambda2_agree(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            n = int(rng.integers(3, 6))
            data = random_dataset(rng, n, int(rng.integers(1, 25)))
            report = identifiability_report(data)
            assert report.identifiable == (report.lambda2_L > ident.LAMBDA2_TOL)
            assert report.svd_rank == report.rank

    def test_lambda2_uses_multiplicities(self):
        base = design_of(4, [2, 3])
        heavy = ChoiceDataset(base.universe, base.observations + base.observations[:1] * 50)
        assert lambda2(base) != pytest.approx(lambda2(heavy))


class TestSingleSizeInsufficient:
    @pytest.mark.parametrize("n", [3, 4, 5])
    def test_every_single_size_deficient(self, n):
        for s in range(2, n + 1):
            rank = rank_exact(build_design_matrix(design_of(n, [s])).rows)
            assert rank < n * (n - 1) - 1, (n, s)


class TestTwoSizesSufficient:
    @pytest.mark.parametrize("n", [4, 5, 6])
    def test_all_qualifying_pairs(self, n):
        for k in range(2, n + 1):
            for k2 in range(k + 1, n + 1):
                if {k, k2} <= {2, n}:
                    continue
                data = design_of(n, [k, k2])
                assert design_rank(build_design_matrix(data))[0] == n * (n - 1) - 1, (n, k, k2)
                assert identifiability_report(data, diagnostics=False).condition_thm1


def random_u(rng, n):
    return rng.normal(size=(n, n)) * 2


class TestNullSpaceWitnesses:
    @staticmethod
    def probs(mat, members):
        return cdm_probabilities(FullRankCdmParams.from_matrix(mat), members)

    def test_symmetric_perturbation_on_pairs(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(2, 7))
            U = random_u(rng, n)
            A = rng.normal(size=(n, n))
            A = A + A.T
            for members in all_sets(n, [2]):
                np.testing.assert_allclose(self.probs(U + A, members), self.probs(U, members), atol=1e-12)

    def test_constant_row_sums_on_universe(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            n = int(rng.integers(3, 7))
            U = random_u(rng, n)
            A = rng.normal(size=(n, n))
            np.fill_diagonal(A, 0.0)
            A -= (A.sum(axis=1, keepdims=True) - rng.normal()) / (n - 1) * (1 - np.eye(n))
            universe = tuple(range(n))
            np.testing.assert_allclose(self.probs(U + A, universe), self.probs(U, universe), atol=1e-12)

    def test_row_plus_column_on_middle_sizes(self):
        # x gains (s-1)a_x + (s-1)(sum_C a - a_x), the same for every member
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(4, 7))
            s = int(rng.integers(3, n))
            U = random_u(rng, n)
            a = rng.normal(size=n)
            A = np.outer(a, np.ones(n)) + (s - 1) * np.outer(np.ones(n), a)
            for members in all_sets(n, [s]):
                np.testing.assert_allclose(self.probs(U + A, members), self.probs(U, members), atol=1e-12)

    def test_row_constant_alone_changes_probabilities(self):
        rng = np.random.default_rng(70)
        U = random_u(rng, 5)
        A = np.outer(rng.normal(size=5), np.ones(5))
        assert not np.allclose(self.probs(U + A, (0, 1, 2)), self.probs(U, (0, 1, 2)))

    def test_middle_size_null_space_dimension(self):
        for n in (4, 5, 6):
            for s in range(3, n):
                rank = rank_exact(build_design_matrix(design_of(n, [s])).rows)
                assert n * (n - 1) - rank == n

    def test_witnesses_lie_in_design_null_space(self):
        rng = np.random.default_rng(8)
        n = 4
        A = rng.normal(size=(n, n))
        A = A + A.T
        u = A[~np.eye(n, dtype=bool)]
        assert np.allclose(build_design_matrix(design_of(n, [2])).rows @ u, 0)


class TestProjection:
    def test_preserves_observed_probabilities(self):
        rng = np.random.default_rng(9)
        data = design_of(5, [3])
        u = rng.normal(size=20)
        p = project_to_row_space(data, u)
        assert np.linalg.norm(p) < np.linalg.norm(u)
        for members in data.unique_sets:
            np.testing.assert_allclose(
                cdm_probabilities(FullRankCdmParams(p), members), cdm_probabilities(FullRankCdmParams(u), members), atol=1e-10
            )
