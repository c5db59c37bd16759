"""Maximum-likelihood fitting, held-out evaluation and cross-validation."""

import math

import numpy as np
import pytest

from choicecdm.core import (
    ChoiceDataset,
    LowRankCdmParams,
    LuceParams,
    choice_probabilities,
    gauge_normalize,
    log_likelihood_gradient,
)
from choicecdm.errors import InvalidInputError
from choicecdm.estimation import (
    FitConfig,
    cross_validate_l2,
    cross_validate_rank,
    evaluate_held_out,
    fit_cdm_full,
    fit_cdm_low_rank,
    fit_luce,
    fit_model,
    low_rank_init,
)
from choicecdm.io import split_dataset

from _helpers import all_sets, dataset_from_frequencies, random_dataset, simulated


class TestFitConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"max_epochs": 0},
            {"tolerance": 0.0},
            {"learning_rate": -1.0},
            {"l2": -1e-3},
            {"batch_size": 0},
            {"optimizer": "lbfgs"},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(InvalidInputError):
            FitConfig(**kwargs)

    def test_defaults(self):
        cfg = FitConfig()
        assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.max_epochs, cfg.tolerance) == (0.05, 0.9, 0.999, 2000, 1e-7)


class TestFitLuce:
    def test_binary_logit_closed_form(self):
        data = ChoiceDataset.from_pairs(2, [((0, 1), 0)] * 89 + [((0, 1), 1)] * 11)
        v = fit_luce(data).params.v
        assert v[0] - v[1] == pytest.approx(math.log(89 / 11), abs=2e-2)

    def test_symmetric_data_gives_zero(self):
        data = ChoiceDataset.from_pairs(4, [((0, 1, 2, 3), i % 4) for i in range(400)])
        np.testing.assert_allclose(fit_luce(data).params.v, 0.0, atol=1e-3)

    def test_recovers_simulation_truth(self):
        truth, data = simulated("mnl", 6, 100_000, 0)
        est = fit_luce(data).params
        np.testing.assert_allclose(est.v, gauge_normalize(truth.model).v, atol=0.05)

    def test_output_gauge(self):
        _, data = simulated("mnl", 5, 500, 1)
        assert abs(fit_luce(data).params.v.sum()) < 1e-9

    def test_stationary_at_optimum(self):
        _, data = simulated("mnl", 4, 2000, 2)
        params = fit_luce(data, FitConfig(max_epochs=5000, tolerance=1e-12)).params
        np.testing.assert_allclose(log_likelihood_gradient(params, data) / data.m, 0.0, atol=1e-5)

    def test_never_offered_item_warns(self):
        data = ChoiceDataset.from_pairs(4, [((0, 1), 0), ((1, 2), 2)])
        assert any("never offered" in w for w in fit_luce(data).warnings)


# a, b, c = 0, 1, 2: preference-reversal choice system
REVERSAL_TABLE = {
    (0, 1): (0.11, 0.89),
    (1, 2): (0.50, 0.50),
    (0, 2): (0.11, 0.89),
    (0, 1, 2): (0.8, 0.1, 0.1),
}


class TestFitCdmFull:
    def test_reversal_refit(self):
        data = dataset_from_frequencies(3, REVERSAL_TABLE, 10_000)
        params = fit_cdm_full(data, FitConfig(l2=1e-4)).params
        assert choice_probabilities(params, (0, 1))[0] == pytest.approx(0.11, abs=2e-2)
        assert choice_probabilities(params, (1, 2))[0] == pytest.approx(0.50, abs=2e-2)
        assert choice_probabilities(params, (0, 2))[1] == pytest.approx(0.89, abs=2e-2)
        assert choice_probabilities(params, (0, 1, 2))[0] == pytest.approx(0.8, abs=2e-2)

    def test_nesting_on_luce_data(self):
        _, data = simulated("mnl", 6, 3000, 3)
        assert fit_cdm_full(data).final_nll <= fit_luce(data).final_nll + 1e-6

    def test_warm_start_reproduces_luce(self):
        _, data = simulated("cdm", 5, 1000, 4)
        luce = fit_luce(data)
        start = fit_cdm_full(data, FitConfig(max_epochs=1, learning_rate=1e-12), init=luce.params)
        assert start.nll_trace[0] == pytest.approx(luce.final_nll, abs=1e-12)

    @pytest.mark.parametrize("lam", [1e-4, 1e-3, 1e-2])
    def test_pairwise_data_antisymmetric(self, lam):
        rng = np.random.default_rng(5)
        n = 4
        v = rng.normal(size=n)
        table = {}
        for members in all_sets(n, sizes=[2]):
            p = 1 / (1 + math.exp(v[members[1]] - v[members[0]]))
            table[members] = (p, 1 - p)
        data = dataset_from_frequencies(n, table, 2000)
        U = fit_cdm_full(data, FitConfig(l2=lam)).params.matrix()
        off = ~np.eye(n, dtype=bool)
        assert np.max(np.abs((U + U.T)[off])) < 1e-2
        for x, y in all_sets(n, sizes=[2]):
            counts = data.choice_counts[data.unique_sets.index((x, y))]
            target = 0.5 * math.log(counts[x] / counts[y])
            assert U[x, y] == pytest.approx(target, abs=5e-2)

    def test_non_identified_warning(self):
        data = dataset_from_frequencies(4, {s: (0.5, 0.5) for s in all_sets(4, sizes=[2])}, 10)
        assert any("does not identify" in w for w in fit_cdm_full(data).warnings)
        assert not fit_cdm_full(data, FitConfig(l2=1e-3)).warnings

    def test_output_gauge(self):
        _, data = simulated("cdm", 4, 500, 6)
        assert abs(fit_cdm_full(data).params.u.sum()) < 1e-9


class TestOptimizerProperties:
    @pytest.mark.parametrize("model", ["luce", "full"])
    def test_monotone_full_batch_descent(self, model):
        _, data = simulated("cdm", 5, 800, 7)
        cfg = FitConfig(optimizer="gd", learning_rate=0.05, max_epochs=300, tolerance=1e-14)
        trace = np.array(fit_model(data, model, cfg).nll_trace)
        assert np.all(np.diff(trace) <= 1e-9)

    def test_determinism(self):
        _, data = simulated("cdm", 25, 600, 8)  # n > 20 exercises mini-batches
        cfg = FitConfig(max_epochs=20, seed=3)
        a, b = fit_cdm_low_rank(data, 2, cfg), fit_cdm_low_rank(data, 2, cfg)
        np.testing.assert_array_equal(a.params.T, b.params.T)
        np.testing.assert_array_equal(a.params.C, b.params.C)
        assert a.nll_trace == b.nll_trace

    def test_minibatch_reaches_full_batch_optimum(self):
        _, data = simulated("mnl", 6, 3000, 9)
        full = fit_luce(data)
        mini = fit_luce(data, FitConfig(batch_size=256, learning_rate=0.01, max_epochs=300))
        assert mini.final_nll == pytest.approx(full.final_nll, abs=1e-3)

    def test_nesting_across_ranks(self):
        _, data = simulated("cdm", 5, 3000, 10)
        best = {}
        for r in (1, 2, 3):
            best[r] = fit_cdm_low_rank(data, r, FitConfig(seed=0), restarts=3).final_nll
        assert fit_luce(data).final_nll >= fit_cdm_full(data).final_nll - 1e-6
        assert best[1] >= best[2] - 1e-3
        assert best[2] >= best[3] - 1e-3


class TestFitLowRank:
    def test_init_reproduces_luce(self):
        luce = LuceParams(np.array([0.3, -0.2, 0.5, -0.6]))
        init = low_rank_init(luce, 1, np.random.default_rng(0))
        for members in all_sets(4):
            np.testing.assert_allclose(choice_probabilities(init, members), choice_probabilities(luce, members), atol=1e-12)

    def test_full_dimension_matches_full_rank(self):
        _, data = simulated("cdm", 6, 5000, 11)
        full = fit_cdm_full(data).final_nll
        low = fit_cdm_low_rank(data, 6, FitConfig(seed=0), restarts=3).final_nll
        assert low == pytest.approx(full, abs=1e-2)

    def test_rank_one_on_iia_data(self):
        _, data = simulated("mnl", 6, 3000, 12)
        train, test = split_dataset(data, 0.2, 0)
        luce = evaluate_held_out(fit_luce(train).params, test).nll
        low = evaluate_held_out(fit_cdm_low_rank(train, 1, FitConfig(seed=0)).params, test).nll
        assert low == pytest.approx(luce, abs=5e-2)

    def test_huge_penalty_gives_uniform(self):
        _, data = simulated("cdm", 6, 2000, 13)
        report = fit_cdm_low_rank(data, 2, FitConfig(l2=1e3, seed=0))
        uniform = np.mean([math.log(len(o.choice_set)) for o in data.observations])
        assert report.final_nll == pytest.approx(uniform, abs=1e-2)
        assert np.abs(report.params.T @ report.params.C.T).max() < 1e-2

    def test_rank_bounds(self):
        _, data = simulated("mnl", 4, 100, 14)
        for r in (0, 5):
            with pytest.raises(InvalidInputError):
                fit_cdm_low_rank(data, r)


class TestEvaluateHeldOut:
    def test_uniform_model_on_triples(self):
        rng = np.random.default_rng(15)
        data = random_dataset(rng, 3, 10_000)
        result = evaluate_held_out(LuceParams(np.zeros(3)), data)
        assert result.nll == pytest.approx(np.mean([math.log(len(o.choice_set)) for o in data.observations]))
        triples = ChoiceDataset.from_pairs(3, [((0, 1, 2), int(c)) for c in rng.integers(0, 3, 10_000)])
        result = evaluate_held_out(LuceParams(np.zeros(3)), triples)
        assert result.nll == pytest.approx(math.log(3), abs=1e-12)
        se = math.sqrt(2 / 9 / 10_000)
        assert abs(result.accuracy - 1 / 3) < 3 * se

    def test_deterministic_model(self):
        data = ChoiceDataset.from_pairs(3, [((0, 1), 0), ((0, 2), 0), ((0, 1, 2), 0)])
        result = evaluate_held_out(LuceParams(np.array([40.0, 0.0, 0.0])), data)
        assert result.nll < 1e-15
        assert result.accuracy == 1.0

    def test_ties_go_to_lowest_index(self):
        data = ChoiceDataset.from_pairs(3, [((1, 2), 1), ((1, 2), 2)])
        assert evaluate_held_out(LuceParams(np.zeros(3)), data).accuracy == 0.5

    def test_cdm_beats_luce_on_cdm_data(self):
        wins = 0
        for rep in range(100):
            _, data = simulated("cdm", 6, 2000, 1000 + rep)
            train, test = split_dataset(data, 0.2, rep)
            luce = evaluate_held_out(fit_luce(train).params, test).nll
            cdm = evaluate_held_out(fit_cdm_full(train, check_identifiability=False).params, test).nll
            wins += cdm < luce
        assert wins >= 95


class TestCrossValidation:
    def test_singleton_grid(self):
        _, data = simulated("mnl", 4, 200, 16)
        assert cross_validate_l2(data, "full", [0.3], folds=3).best_l2 == 0.3

    def test_duplicate_grid(self):
        _, data = simulated("mnl", 4, 200, 17)
        result = cross_validate_l2(data, "full", [0.1, 0.1], folds=3)
        assert result.best_l2 == 0.1
        assert list(result.mean_nll) == [0.1]

    def test_penalty_helps_on_iia_data(self):
        chosen = []
        for rep in range(5):
            _, data = simulated("mnl", 6, 300, 100 + rep)
            chosen.append(cross_validate_l2(data, "full", [0.0, 0.01, 1.0], config=FitConfig(seed=rep)).best_l2)
        assert sum(lam > 0 for lam in chosen) > len(chosen) / 2

    def test_validation(self):
        _, data = simulated("mnl", 4, 20, 18)
        with pytest.raises(InvalidInputError):
            cross_validate_l2(data, "full", [], folds=3)
        with pytest.raises(InvalidInputError):
            cross_validate_l2(data, "full", [-1.0], folds=3)
        with pytest.raises(InvalidInputError):
            cross_validate_l2(data, "full", [0.0], folds=1)

    def test_rank_selection_prefers_low_rank_truth(self):
        # rank-one truth with strong context effects
        rng = np.random.default_rng(19)
        n = 6
        truth = LowRankCdmParams(2 * rng.normal(size=(n, 1)), 2 * rng.normal(size=(n, 1)))
        records = []
        for _ in range(3000):
            members = tuple(sorted(rng.choice(n, size=int(rng.integers(2, n + 1)), replace=False).tolist()))
            records.append((members, int(rng.choice(members, p=choice_probabilities(truth, members)))))
        data = ChoiceDataset.from_pairs(n, records)
        result = cross_validate_rank(data, [1, 2, 3], folds=3, config=FitConfig(seed=0))
        assert set(result.mean_nll) == {1, 2, 3}
        assert result.best_rank == 1 or result.mean_nll[1] - result.mean_nll[result.best_rank] < 5e-3

    def test_rank_validation(self):
        _, data = simulated("mnl", 4, 20, 18)
        with pytest.raises(InvalidInputError):
            cross_validate_rank(data, [], folds=3)
        with pytest.raises(InvalidInputError):
            cross_validate_rank(data, [0, 1], folds=3)
