import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import norm

from fedcox.data.simulate import SimConfig, generate_dataset
from fedcox.errors import DegenerateVarianceError, InvalidArgumentError
from fedcox.federation.gel import gel_iterate
from fedcox.federation.services.CoordinatorService import partition
from fedcox.inference import (
    InferenceReport,
    LinearFunctionalTarget,
    average_debiased_inference,
    confidence_interval,
    debiased_linear_functional,
    decorrelated_score,
    estimate_omega_k,
    estimate_w_k,
    infer_linear_functional,
    score_test,
    sigma_nu_hat,
    test_coordinate as coordinate_score_test,
    variance_linear,
)
from fedcox.lasso import LambdaSchedule, theory_lambda
from fedcox.survival import gradient, hessian, hessian_operator

from conftest import make_dataset

LAM = 0.05


@pytest.fixture
def fitted(cohort):
    return cohort, gel_iterate(cohort, 2, LambdaSchedule(base=LAM))


class TestIntervals:
    def test_normal_quantile(self):
        low, high = confidence_interval(1.0, 4.0, 100, alpha=0.05)
        half = 1.959963984540054 * 0.2
        assert low == pytest.approx(1.0 - half, abs=1e-12)
        assert high == pytest.approx(1.0 + half, abs=1e-12)

    def test_zero_variance_collapses(self):
        assert confidence_interval(0.3, 0.0, 10) == (0.3, 0.3)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
    def test_bad_alpha(self, alpha):
        with pytest.raises(InvalidArgumentError):
            confidence_interval(0.0, 1.0, 10, alpha)

    def test_score_test_boundary_does_not_reject(self):
        z = norm.isf(0.025)
        assert not score_test(z, 1.0, 1, alpha=2 * norm.sf(z)).reject
        assert score_test(1.97, 1.0, 1, alpha=0.05).reject
        assert not score_test(1.95, 1.0, 1, alpha=0.05).reject

    @pytest.mark.parametrize("z", [1.959963984, 1.959963985, 1.959963986, -1.959963985])
    def test_rejection_agrees_with_the_p_value(self, z):
        result = score_test(z, 1.0, 1, alpha=0.05)
        assert result.reject == (result.p_value < 0.05)

    def test_score_test_p_value(self):
        result = score_test(0.1, 2.0, 400)
        assert result.z == pytest.approx(1.0)
        assert result.p_value == pytest.approx(2 * norm.sf(1.0), rel=1e-12)
        with pytest.raises(InvalidArgumentError):
            score_test(0.1, 0.0, 400)

    def test_report_aliases_and_checks(self):
        report = InferenceReport(
            target="beta1", estimate=0.5, var=1.0, ci_low=0.1, ci_high=0.9, z=2.5, p=0.0124,
            reject=True, n=100, p_dim=10, K=2,
        )
        assert '"var":1.0' in report.to_json()
        assert set(report.to_csv_row()) >= {"estimate", "var", "z", "p", "ci_low", "ci_high"}
        with pytest.raises(ValidationError):
            InferenceReport(target="x", estimate=2.0, var=1.0, ci_low=0.0, ci_high=1.0, z=0.0, p=0.5, reject=False, n=1, p_dim=1, K=1)
        with pytest.raises(ValidationError):
            InferenceReport(target="x", estimate=0.0, var=1.0, z=0.0, p=0.5, reject=True, n=1, p_dim=1, K=1)

    def test_loading_vectors(self):
        np.testing.assert_array_equal(LinearFunctionalTarget.unit(2, 4).c, [0.0, 0.0, 1.0, 0.0])
        with pytest.raises(InvalidArgumentError):
            LinearFunctionalTarget.make(np.zeros(3))


class TestLocalSolvers:
    def test_omega_and_w_shapes(self, signal_data):
        beta = np.zeros(6)
        c = np.eye(6)[1]
        assert estimate_omega_k(signal_data, beta, c, 0.05).shape == (6,)
        assert estimate_w_k(signal_data, beta, 0.05, coord=2).shape == (5,)

    def test_w_operator_path_matches_dense(self, signal_data):
        beta = np.array([0.0, 1.0, -1.0, 0.5, 0.0, 0.0])
        dense = estimate_w_k(signal_data, beta, 0.02, coord=1)
        operator = estimate_w_k(signal_data, beta, 0.02, coord=1, hessian=hessian_operator(signal_data, beta))
        np.testing.assert_allclose(operator, dense, atol=1e-5)

    def test_w_needs_two_covariates(self):
        data = make_dataset(20, 1, seed=0)
        with pytest.raises(InvalidArgumentError):
            estimate_w_k(data, np.zeros(1), 0.1)


class TestDistributed:
    def test_zero_directions_return_plug_in(self, fitted):
        cohort, trace = fitted
        c = np.array([1.0, 2.0, 0.0, -1.0, 0.0, 0.5])
        estimate = debiased_linear_functional(cohort, trace.beta_tilde, trace.beta_hat, np.zeros((2, 6)), c)
        assert estimate == c @ trace.beta_hat

    def test_joint_linearity_in_loading_and_directions(self, fitted):
        cohort, trace = fitted
        rng = np.random.default_rng(3)
        c1, c2 = rng.normal(size=6), rng.normal(size=6)
        w1, w2 = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))

        def estimate(c, w):
            return debiased_linear_functional(cohort, trace.beta_tilde, trace.beta_hat, w, c)

        assert estimate(c1 + c2, w1 + w2) == pytest.approx(estimate(c1, w1) + estimate(c2, w2), abs=1e-10)
        assert estimate(3.0 * c1, 3.0 * w1) == pytest.approx(3.0 * estimate(c1, w1), abs=1e-10)

    def test_single_center_matches_classical_debiased_lasso(self, signal_data):
        c = np.eye(6)[1]
        with partition(signal_data, 1) as cohort:
            trace = gel_iterate(cohort, 1, LambdaSchedule(base=LAM))
            beta_hat = trace.beta_hat
            omegas = cohort.solve_omegas(beta_hat, c, 0.05)
            estimate = debiased_linear_functional(cohort, trace.beta_tilde, beta_hat, omegas, c)
            variance = variance_linear(cohort, omegas, beta_hat, c)
        omega = estimate_omega_k(signal_data, beta_hat, c, 0.05)
        np.testing.assert_array_equal(omegas[0], omega)
        assert estimate == pytest.approx(c @ beta_hat - omega @ gradient(signal_data, beta_hat), abs=1e-10)
        H = hessian(signal_data, beta_hat)
        assert variance == pytest.approx(2 * c @ omega - omega @ H @ omega, abs=1e-10)

    def test_negative_variance_is_reported(self, fitted):
        cohort, trace = fitted
        c = np.eye(6)[1]
        huge = np.tile(1000.0 * c, (2, 1))
        with pytest.raises(DegenerateVarianceError) as info:
            variance_linear(cohort, huge, trace.beta_hat, c)
        assert info.value.value < 0

    def test_score_scale_identity(self, fitted):
        cohort, trace = fitted
        coord = 0
        ws = cohort.solve_ws(trace.beta_hat, 0.05, coord)
        sigma2 = sigma_nu_hat(cohort, trace.beta_hat, ws, coord)
        direct = []
        for data, w in zip(cohort.datasets, ws):
            H = hessian(data, trace.beta_hat)
            v = np.insert(-w, coord, 1.0)
            direct.append(v @ H @ v)
        assert sigma2 == pytest.approx(float(np.mean(direct)), abs=1e-10)

    def test_score_uses_shifted_gradients(self, fitted):
        cohort, trace = fitted
        coord = 2
        ws = np.zeros((2, 5))
        gamma = np.delete(trace.beta_hat, coord)
        point = np.insert(gamma, coord, 0.0)
        grads_tilde = np.stack([gradient(d, trace.beta_tilde) for d in cohort.datasets])
        grads_null = np.stack([gradient(d, point) for d in cohort.datasets])
        expected = np.mean(grads_null[:, coord] - grads_tilde[:, coord] + grads_tilde[:, coord].mean())
        assert decorrelated_score(cohort, gamma, trace.beta_tilde, ws, coord) == pytest.approx(expected, abs=1e-12)

    def test_linear_functional_pipeline(self, fitted):
        cohort, trace = fitted
        before = cohort.ledger.snapshot()
        report = infer_linear_functional(cohort, trace, np.eye(6)[1], alpha=0.05, target="e2")
        after = cohort.ledger.snapshot()
        assert report.ci_low <= report.estimate <= report.ci_high
        assert report.variance > 0
        assert report.K == 2 and report.n == 200 and report.p_dim == 6
        # beta_tilde comes from the cache, so only beta_hat needs a gradient round
        assert after["by_type"]["grad_request"] - before["by_type"]["grad_request"] == 1
        assert after["up_floats"] - before["up_floats"] == 2 * 6 + 2 * 6 + 2 * 2
        assert report.comm_floats == cohort.ledger.total_floats

    def test_coordinate_test_pipeline(self, fitted):
        cohort, trace = fitted
        null = coordinate_score_test(cohort, trace, coord=0, alpha=0.05)
        signal = coordinate_score_test(cohort, trace, coord=1, alpha=0.05)
        assert 0.0 <= null.p_value <= 1.0
        assert null.ci_low is None
        assert signal.reject
        with pytest.raises(InvalidArgumentError):
            coordinate_score_test(cohort, trace, coord=6)

    def test_average_debiased_baseline(self, cohort):
        report = average_debiased_inference(cohort, coord=1, lam=LAM)
        assert report.target == "beta2"
        assert report.ci_low <= report.estimate <= report.ci_high
        assert cohort.ledger.total_floats == 0


@pytest.mark.slow
def test_score_test_holds_its_size():
    rejections = []
    beta_star = np.array([0.0, 1.0, 1.0, 1.0] + [0.0] * 16)
    for rep in range(200):
        data = make_dataset(400, 20, seed=1000 + rep, beta=beta_star, censor_rate=0.43)
        with partition(data, 2, seed=rep, centering="global") as cohort:
            schedule = LambdaSchedule.theory(cohort.principal_data, cohort.n, kind="geometric")
            trace = gel_iterate(cohort, 5, schedule)
            rejections.append(coordinate_score_test(cohort, trace, coord=0).reject)
    size = float(np.mean(rejections))
    assert 0.01 <= size <= 0.10 + 2 * math.sqrt(0.05 * 0.95 / 200)


@pytest.mark.slow
def test_local_omega_approaches_the_population_direction():
    beta_star = SimConfig().beta_vector()
    c = np.eye(beta_star.size)[1]
    reference = generate_dataset(SimConfig(n=20000, K=1, seed=99), 0)
    omega_star = np.linalg.solve(hessian(reference, beta_star), c)
    medians = []
    for m in (125, 500):
        cfg = SimConfig(n=m, K=1)
        errors = []
        for rep in range(100):
            data = generate_dataset(cfg, rep)
            omega = estimate_omega_k(data, beta_star, c, theory_lambda(1.0, 1.0, data.p, m))
            errors.append(np.abs(omega - omega_star).sum())
        medians.append(np.median(errors))
    assert medians[1] < medians[0]
