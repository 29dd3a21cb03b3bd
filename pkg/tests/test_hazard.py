import numpy as np
import pytest
from scipy.integrate import quad

from fedcox.data.simulate import SimConfig, generate_dataset
from fedcox.errors import InvalidArgumentError
from fedcox.federation.services.CoordinatorService import FederatedCohort, partition
from fedcox.hazard import (
    KERNELS,
    StepFunction,
    binned_increments,
    breslow,
    kernel_hazard,
    local_breslow_increments,
)
from fedcox.survival import SurvivalDataset


def classical_breslow(data: SurvivalDataset, beta, t):
    risk = np.exp(data.covariates @ beta)
    total = 0.0
    for i in np.flatnonzero(data.events):
        if data.times[i] <= t:
            total += 1.0 / risk[data.times >= data.times[i]].sum()
    return total


def test_single_event():
    data = SurvivalDataset(times=[1.0, 2.0, 3.0], events=[1, 0, 0], covariates=np.zeros((3, 1)))
    with FederatedCohort([data]) as cohort:
        step = breslow(cohort, np.zeros(1))
    np.testing.assert_array_equal(step.knots, [1.0])
    assert step(0.5) == 0.0
    assert step(1.0) == pytest.approx(1 / 3)
    assert step(10.0) == pytest.approx(1 / 3)
    assert step.domain_end == 3.0


def test_single_center_matches_classical_breslow(signal_data):
    beta = np.array([0.0, 1.2, -1.1, 0.9, 0.1, 0.0])
    with partition(signal_data, 1) as cohort:
        step = breslow(cohort, beta)
    grid = np.linspace(0.0, signal_data.times.max(), 25)
    expected = [classical_breslow(signal_data, beta, t) for t in grid]
    np.testing.assert_allclose(step(grid), expected, rtol=1e-10, atol=1e-12)


def test_centers_are_averaged(signal_data):
    beta = np.array([0.0, 1.0, -1.0, 1.0, 0.0, 0.0])
    with partition(signal_data, 4, seed=6) as cohort:
        step = breslow(cohort, beta)
        grid = np.linspace(0.0, 2.0, 15)
        expected = np.mean(
            [[classical_breslow(d, beta, t) for t in grid] for d in cohort.datasets], axis=0
        )
        assert cohort.ledger.by_type["hazard_request"] == 1
    np.testing.assert_allclose(step(grid), expected, rtol=1e-10, atol=1e-12)


def test_binned_mode_agrees_at_the_edges(cohort):
    beta = np.zeros(cohort.p)
    edges = np.linspace(0.2, 2.0, 10)
    exact = breslow(cohort, beta)
    binned = breslow(cohort, beta, bins=edges)
    np.testing.assert_array_equal(binned.knots, edges)
    np.testing.assert_allclose(binned(edges), exact(edges), rtol=1e-12, atol=1e-14)


def test_bins_are_right_closed():
    sums = binned_increments([0.5, 1.0, 1.5, 9.0], [1.0, 2.0, 4.0, 8.0], [1.0, 2.0])
    np.testing.assert_array_equal(sums, [3.0, 4.0])
    with pytest.raises(InvalidArgumentError):
        binned_increments([1.0], [1.0], [2.0, 1.0])


def test_increments_are_positive(signal_data):
    times, increments = local_breslow_increments(signal_data, np.full(6, 0.5))
    assert times.size == signal_data.n_events
    assert np.all(np.diff(times) > 0)
    assert np.all(increments > 0)


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_kernels_integrate_to_one(name):
    lower, upper = (-1.0, 1.0) if name == "epanechnikov" else (-np.inf, np.inf)
    mass, _ = quad(KERNELS[name], lower, upper, epsabs=1e-12, epsrel=1e-12)
    assert mass == pytest.approx(1.0, abs=1e-8)


def test_kernel_hazard_defaults(cohort):
    curve = kernel_hazard(cohort, np.zeros(cohort.p))
    tau = max(d.study_end for d in cohort.datasets)
    h = tau * cohort.n ** (-1 / 5)
    assert curve.bandwidth == pytest.approx(h)
    assert curve.grid.size == 200
    assert curve.grid[0] == pytest.approx(h) and curve.grid[-1] == pytest.approx(tau - h)
    assert np.all(curve.values >= 0)
    assert list(curve.to_frame().columns) == ["t", "value"]


def test_kernel_hazard_rejects_bad_inputs(cohort):
    beta = np.zeros(cohort.p)
    with pytest.raises(InvalidArgumentError):
        kernel_hazard(cohort, beta, h=0.0)
    with pytest.raises(InvalidArgumentError):
        kernel_hazard(cohort, beta, kernel="triangle")
    with pytest.raises(InvalidArgumentError):
        kernel_hazard(cohort, beta, h=1e6)


def test_step_function_validates_knots():
    with pytest.raises(InvalidArgumentError):
        StepFunction(np.array([2.0, 1.0]), np.array([0.1, 0.2]), domain_end=3.0)
    step = StepFunction(np.array([1.0, 2.0]), np.array([0.5, 0.25]), domain_end=3.0, initial=1.0)
    np.testing.assert_array_equal(step([0.0, 1.0, 1.5, 2.0, 5.0]), [1.0, 0.5, 0.5, 0.25, 0.25])


@pytest.mark.slow
def test_breslow_is_unbiased_for_the_unit_baseline_hazard():
    cfg = SimConfig(n=1000, p=10, K=4)
    beta_star = cfg.beta_vector()
    checkpoints = np.array([0.5, 1.0, 1.5])
    grid = np.linspace(0.0, 1.0, 201)
    values, sup_errors = [], []
    for rep in range(200):
        with partition(generate_dataset(cfg, rep), cfg.K, seed=rep) as cohort:
            step = breslow(cohort, beta_star)
        values.append(step(checkpoints))
        sup_errors.append(np.max(np.abs(step(grid) - grid)))

    values = np.array(values)
    se = values.std(axis=0, ddof=1) / np.sqrt(len(values))
    assert np.all(np.abs(values.mean(axis=0) - checkpoints) <= 3 * se + 1e-3)
    # the spread grows as risk sets thin out, so the uniform band stops at t = 1
    assert np.mean(np.array(sup_errors) <= 0.3) >= 0.9
