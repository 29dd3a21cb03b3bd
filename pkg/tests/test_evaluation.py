import numpy as np
import pytest

from fedcox.data.simulate import SimConfig
from fedcox.errors import InvalidArgumentError
from fedcox.evaluation import run_experiment, run_replication
from fedcox.experiment_tracker import ExperimentTracker
from fedcox.survival import SurvivalDataset
from fedcox.utils.evaluation import (
    anderson_normal,
    c_index_ipw,
    km_censoring_survival,
    ks_uniform,
    median_with_se,
    proportion_with_se,
)

from conftest import make_dataset


def harrell(data: SurvivalDataset, beta) -> float:
    scores = data.covariates @ beta
    concordant, usable = 0.0, 0
    for i in range(data.n):
        for j in range(data.n):
            if data.events[i] and data.times[i] < data.times[j]:
                usable += 1
                if scores[i] > scores[j]:
                    concordant += 1
                elif scores[i] == scores[j]:
                    concordant += 0.5
    return concordant / usable


@pytest.fixture
def tiny_config():
    return SimConfig(n=80, p=5, K=2, rounds=2, beta_star=[0.0, 1.0, 1.0], replications=2, bootstrap=50)


class TestCensoringSurvival:
    def test_no_censoring_is_flat(self):
        data = make_dataset(30, 2, seed=0, censor_rate=1e-12)
        assert data.n_events == data.n
        G = km_censoring_survival(data)
        np.testing.assert_array_equal(G(data.times), np.ones(data.n))

    def test_product_limit(self):
        data = SurvivalDataset(
            times=[1.0, 2.0, 3.0, 4.0, 5.0], events=[1, 0, 1, 0, 1], covariates=np.zeros((5, 1))
        )
        G = km_censoring_survival(data)
        np.testing.assert_allclose(G([0.5, 1.0, 2.0, 3.5, 4.0, 6.0]), [1.0, 1.0, 0.75, 0.75, 0.375, 0.375])


class TestConcordance:
    def test_matches_harrell_without_censoring(self):
        beta = np.array([1.0, -0.5, 0.0])
        train = make_dataset(40, 3, seed=1, beta=beta, censor_rate=1e-12)
        test = make_dataset(25, 3, seed=2, beta=beta, censor_rate=1e-12)
        assert c_index_ipw(train, test, beta) == pytest.approx(harrell(test, beta), abs=1e-12)

    def test_null_scores_earn_half_credit(self, small_data):
        assert c_index_ipw(small_data, small_data, np.zeros(4)) == pytest.approx(0.5)

    def test_informative_scores_beat_chance(self, signal_data):
        beta = np.array([0.0, 1.5, -1.5, 1.0, 0.0, 0.0])
        assert c_index_ipw(signal_data, signal_data, beta) > 0.6

    def test_no_usable_pairs(self, small_data):
        censored = SurvivalDataset(times=[1.0, 2.0], events=[0, 0], covariates=np.zeros((2, 4)))
        with pytest.raises(InvalidArgumentError):
            c_index_ipw(small_data, censored, np.zeros(4))


class TestSummaries:
    def test_median_of_constant_values(self):
        assert median_with_se([2.0, 2.0, 2.0]) == (2.0, 0.0)

    def test_median_ignores_non_finite(self):
        median, se = median_with_se([1.0, 2.0, np.nan, 3.0, 4.0, 5.0], n_resamples=200)
        assert median == 3.0
        assert se > 0

    def test_proportion(self):
        rate, se = proportion_with_se([True, False, False, False])
        assert rate == 0.25
        assert se == pytest.approx(np.sqrt(0.25 * 0.75 / 4))
        assert np.isnan(proportion_with_se([])[0])

    def test_ks_uniform(self):
        uniform = np.random.default_rng(0).uniform(size=500)
        statistic, _ = ks_uniform(uniform)
        assert statistic < 0.1
        statistic, p_value = ks_uniform(np.full(100, 0.01))
        assert statistic > 0.9 and p_value < 1e-10

    def test_anderson_level_must_be_tabulated(self):
        with pytest.raises(InvalidArgumentError):
            anderson_normal(np.random.default_rng(0).normal(size=50), level=3.0)


class TestTracker:
    def test_save_list_and_compare(self, tmp_path):
        tracker = ExperimentTracker(str(tmp_path))
        for i, value in enumerate((0.1, 0.2)):
            tracker.save_experiment(
                {
                    "id": f"exp{i}",
                    "name": f"run{i}",
                    "study": "estimation",
                    "created_at": f"2024-01-0{i + 1}T00:00:00",
                    "records": [{"replication": 0}],
                    "aggregates": {"median_err_t0": {"value": value, "se": 0.0}},
                }
            )
        listed = tracker.list_experiments()
        assert [e["id"] for e in listed] == ["exp1", "exp0"]
        assert tracker.get_experiment("exp0")["name"] == "run0"
        comparison = tracker.compare_experiments(["run0", "exp1", "missing"])
        assert len(comparison["experiments"]) == 2
        assert len(comparison["metrics_comparison"]["median_err_t0"]) == 2
        with pytest.raises(ValueError):
            tracker.get_experiment("nope")


class TestExperiments:
    def test_estimation_run_is_reproducible(self, tiny_config, tmp_path):
        tracker = ExperimentTracker(str(tmp_path))
        first = run_experiment(tiny_config, "estimation", tracker=tracker, print_results=False)
        second = run_experiment(tiny_config, "estimation", save=False, print_results=False)
        assert first.fingerprint() == second.fingerprint()
        assert len(first.records) + len(first.failures) == 2
        assert first.aggregates["replications_used"] == len(first.records)
        assert (tmp_path / f"{first.id}.json").exists()
        for record in first.records:
            assert {"err_t0", "err_t2", "err_full", "comm_floats"} <= set(record)

    def test_size_study_forces_the_null(self, tiny_config):
        cfg = tiny_config.model_copy(update={"nu_star": 0.5, "replications": 1})
        report = run_experiment(cfg, "test_size", save=False, print_results=False)
        assert report.config["nu_star"] == 0.0

    def test_unknown_study(self, tiny_config):
        with pytest.raises(ValueError):
            run_experiment(tiny_config, "bagging", save=False, print_results=False)

    def test_failed_replication_is_recorded(self, tiny_config, tmp_path):
        cfg = tiny_config.model_copy(update={"cindex_data": str(tmp_path / "missing.tsv")})
        record = run_replication(cfg, "cindex", 0)
        assert record["error_type"] == "FileNotFoundError"
        assert record["replication"] == 0


@pytest.mark.slow
def test_intervals_cover_a_signal_coordinate():
    cfg = SimConfig(K=4, test_coord=1, replications=400)
    report = run_experiment(cfg, "ci_coverage", threads=4, save=False, print_results=False)
    assert 0.93 <= report.aggregates["coverage_iterated"]["value"] <= 0.99


@pytest.mark.slow
def test_null_p_values_are_uniform():
    report = run_experiment(SimConfig(K=4, replications=400), "test_size", threads=4, save=False, print_results=False)
    assert report.aggregates["ks_pvalue_iterated"] > 0.01


@pytest.mark.slow
def test_power_matches_the_full_sample_test():
    cfg = SimConfig(K=4, nu_star=0.15, replications=400)
    report = run_experiment(cfg, "test_power", threads=4, save=False, print_results=False)
    iterated = report.aggregates["rejection_iterated"]["value"]
    full = report.aggregates["rejection_full"]["value"]
    assert iterated > cfg.alpha
    assert abs(iterated - full) <= 0.05
