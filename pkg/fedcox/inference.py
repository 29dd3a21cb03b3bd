import logging
import math
from typing import TYPE_CHECKING, NamedTuple, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.sparse.linalg import LinearOperator
from scipy.stats import norm

from fedcox.errors import DegenerateVarianceError, InvalidArgumentError
from fedcox.lasso import SolverOptions, fit_l1_quadratic, theory_lambda
from fedcox.survival import SurvivalDataset, check_beta, local_hessian

if TYPE_CHECKING:
    from fedcox.federation.gel import GelTrace
    from fedcox.federation.services.CoordinatorService import FederatedCohort

logger = logging.getLogger(__name__)


class LinearFunctionalTarget(NamedTuple):
    c: np.ndarray
    alpha: float = 0.05

    @classmethod
    def make(cls, c, alpha: float = 0.05) -> "LinearFunctionalTarget":
        c = np.asarray(c, dtype=float)
        if c.ndim != 1 or not np.any(c != 0):
            raise InvalidArgumentError("the loading vector c must be a non-zero vector")
        _check_alpha(alpha)
        return cls(c, alpha)

    @classmethod
    def unit(cls, j: int, p: int, alpha: float = 0.05) -> "LinearFunctionalTarget":
        if not 0 <= j < p:
            raise InvalidArgumentError(f"coordinate {j} outside 0..{p - 1}")
        c = np.zeros(p)
        c[j] = 1.0
        return cls.make(c, alpha)


class InferenceReport(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    target: str
    estimate: float
    variance: float = Field(alias="var", ge=0)
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    statistic: float = Field(alias="z")
    p_value: float = Field(alias="p", ge=0, le=1)
    reject: bool
    alpha: float = Field(0.05, gt=0, lt=1)
    n: int
    p_dim: int
    K: int
    comm_floats: int = 0

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.ci_low is not None and self.ci_high is not None:
            if not self.ci_low <= self.estimate <= self.ci_high:
                raise ValueError("ci_low <= estimate <= ci_high violated")
        if self.reject and self.p_value >= self.alpha:
            raise ValueError("reject requires p < alpha")
        return self

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, exclude={"alpha"})

    def to_csv_row(self) -> dict:
        return self.model_dump(by_alias=True, exclude={"alpha"})


class ScoreTestResult(NamedTuple):
    z: float
    p_value: float
    reject: bool


def _check_alpha(alpha: float):
    if not 0 < alpha < 1:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")


def _two_sided(z: float, alpha: float) -> tuple[float, bool]:
    p_value = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return p_value, bool(p_value < alpha)


def _hessian_for(data: SurvivalDataset, beta_hat, hessian):
    if data.n_events == 0:
        raise InvalidArgumentError("local inference needs at least one observed event")
    beta_hat = check_beta(beta_hat, data.p)
    return local_hessian(data, beta_hat) if hessian is None else hessian


def estimate_omega_k(
    data: SurvivalDataset,
    beta_hat,
    c,
    lam: float,
    opts: Optional[SolverOptions] = None,
    hessian=None,
) -> np.ndarray:
    """argmin w'H_k w - 2c'w + lam |w|_1 with H_k the local Hessian at beta_hat."""
    c = np.asarray(c, dtype=float)
    if c.shape != (data.p,):
        raise InvalidArgumentError(f"c must have shape ({data.p},), got {c.shape}")
    H = _hessian_for(data, beta_hat, hessian)
    return fit_l1_quadratic(H, c, lam, opts)


def _nuisance_blocks(H: Union[np.ndarray, LinearOperator], coord: int):
    p = H.shape[0]
    gamma = np.delete(np.arange(p), coord)
    if isinstance(H, LinearOperator):
        unit = np.zeros(p)
        unit[coord] = 1.0
        cross = H.matvec(unit)[gamma]

        def matmat(V):
            V = np.asarray(V, dtype=float).reshape(p - 1, -1)
            return H.matmat(np.insert(V, coord, 0.0, axis=0))[gamma]

        block = LinearOperator(
            (p - 1, p - 1),
            matvec=lambda v: matmat(v)[:, 0],
            matmat=matmat,
            rmatvec=lambda v: matmat(v)[:, 0],
            dtype=float,
        )
        return block, cross
    H = np.asarray(H, dtype=float)
    return H[np.ix_(gamma, gamma)], H[gamma, coord]


def estimate_w_k(
    data: SurvivalDataset,
    beta_hat,
    lam: float,
    coord: int = 0,
    opts: Optional[SolverOptions] = None,
    hessian=None,
) -> np.ndarray:
    """Decorrelation weights regressing the nuisance block on the tested coordinate."""
    if data.p < 2:
        raise InvalidArgumentError("a score test needs at least two covariates")
    if not 0 <= coord < data.p:
        raise InvalidArgumentError(f"coordinate {coord} outside 0..{data.p - 1}")
    H = _hessian_for(data, beta_hat, hessian)
    block, cross = _nuisance_blocks(H, coord)
    return fit_l1_quadratic(block, cross, lam, opts)


def _check_directions(cohort: "FederatedCohort", vectors, width: int, name: str) -> np.ndarray:
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    if vectors.shape != (cohort.K, width):
        raise InvalidArgumentError(
            f"{name} must have shape ({cohort.K}, {width}), got {vectors.shape}"
        )
    return vectors


def debiased_linear_functional(cohort: "FederatedCohort", beta_tilde, beta_hat, omegas, c) -> float:
    """c'beta_hat plus the averaged one-step correction.

    Gradients at beta_tilde and beta_hat are fetched in one batched round;
    beta_tilde is normally still cached from the last GEL round.
    """
    p = cohort.p
    beta_tilde = check_beta(beta_tilde, p)
    beta_hat = check_beta(beta_hat, p)
    c = np.asarray(c, dtype=float)
    if c.shape != (p,):
        raise InvalidArgumentError(f"c must have shape ({p},), got {c.shape}")
    omegas = _check_directions(cohort, omegas, p, "omegas")

    grads_tilde, grads_hat = cohort.local_gradients(np.vstack([beta_tilde, beta_hat]))
    global_tilde = grads_tilde.mean(axis=0)
    correction = np.einsum("kj,kj->k", omegas, grads_tilde - grads_hat - global_tilde)
    return float(c @ beta_hat + correction.mean())


def variance_linear(cohort: "FederatedCohort", omegas, beta_hat, c) -> float:
    omegas = _check_directions(cohort, omegas, cohort.p, "omegas")
    scalars = cohort.linear_quadforms(beta_hat, omegas, c)
    value = float(np.mean(2.0 * scalars[:, 0] - scalars[:, 1]))
    if value < 0:
        raise DegenerateVarianceError(f"variance estimate is negative ({value:.3g})", value)
    return value


def confidence_interval(estimate: float, variance: float, n: int, alpha: float = 0.05) -> tuple[float, float]:
    if variance < 0:
        raise InvalidArgumentError(f"variance must be nonnegative, got {variance}")
    if n <= 0:
        raise InvalidArgumentError(f"n must be positive, got {n}")
    _check_alpha(alpha)
    half = norm.ppf(1 - alpha / 2) * math.sqrt(variance / n)
    return estimate - half, estimate + half


def decorrelated_score(cohort: "FederatedCohort", gamma_hat, beta_tilde, ws, coord: int = 0) -> float:
    """Averaged decorrelated score of the GEL-shifted local losses at (0, gamma_hat)."""
    p = cohort.p
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    if gamma_hat.shape != (p - 1,):
        raise InvalidArgumentError(f"gamma_hat must have shape ({p - 1},), got {gamma_hat.shape}")
    ws = _check_directions(cohort, ws, p - 1, "ws")
    point = np.insert(gamma_hat, coord, 0.0)

    grads_tilde, grads_null = cohort.local_gradients(np.vstack([check_beta(beta_tilde, p), point]))
    shifted = grads_null - (grads_tilde - grads_tilde.mean(axis=0))
    nuisance = np.delete(shifted, coord, axis=1)
    scores = shifted[:, coord] - np.einsum("kj,kj->k", ws, nuisance)
    return float(scores.mean())


def sigma_nu_hat(cohort: "FederatedCohort", beta_hat, ws, coord: int = 0) -> float:
    """Squared scale of the decorrelated score, averaged over centers."""
    ws = _check_directions(cohort, ws, cohort.p - 1, "ws")
    scalars = cohort.nu_quadforms(beta_hat, ws, coord)
    value = float(np.mean(scalars[:, 0] - 2.0 * scalars[:, 1] + scalars[:, 2]))
    if value <= 0:
        raise DegenerateVarianceError(
            f"decorrelated score variance is not positive ({value:.3g})", value
        )
    return value


def score_test(pi_bar: float, sigma_nu: float, n: int, alpha: float = 0.05) -> ScoreTestResult:
    if not sigma_nu > 0:
        raise InvalidArgumentError(f"sigma_nu must be positive, got {sigma_nu}")
    _check_alpha(alpha)
    z = math.sqrt(n) * pi_bar / sigma_nu
    p_value, reject = _two_sided(z, alpha)
    return ScoreTestResult(z, p_value, reject)


def default_omega_lambda(cohort: "FederatedCohort", c, c0: float = 1.0) -> float:
    return theory_lambda(c0, float(np.abs(c).max()), cohort.p, cohort.m)


def default_w_lambda(cohort: "FederatedCohort", c0: float = 1.0) -> float:
    bound = float(np.abs(cohort.principal_data.covariates).max()) ** 2
    return theory_lambda(c0, bound, cohort.p - 1, cohort.m)


def infer_linear_functional(
    cohort: "FederatedCohort",
    trace: "GelTrace",
    c,
    alpha: float = 0.05,
    lam: Optional[float] = None,
    c0: float = 1.0,
    target: Optional[str] = None,
) -> InferenceReport:
    """Debiased estimate, variance and confidence interval for c'beta."""
    goal = LinearFunctionalTarget.make(c, alpha)
    if goal.c.shape != (cohort.p,):
        raise InvalidArgumentError(f"c must have shape ({cohort.p},), got {goal.c.shape}")
    lam = default_omega_lambda(cohort, goal.c, c0) if lam is None else lam
    beta_tilde, beta_hat = trace.beta_tilde, trace.beta_hat

    omegas = cohort.solve_omegas(beta_hat, goal.c, lam)
    estimate = debiased_linear_functional(cohort, beta_tilde, beta_hat, omegas, goal.c)
    variance = variance_linear(cohort, omegas, beta_hat, goal.c)
    low, high = confidence_interval(estimate, variance, cohort.n, alpha)
    z = estimate / math.sqrt(variance / cohort.n) if variance > 0 else 0.0
    p_value, reject = _two_sided(z, alpha)
    logger.info(f"Debiased estimate {estimate:.4f}, CI [{low:.4f}, {high:.4f}]")

    return InferenceReport(
        target=target or "c'beta",
        estimate=estimate,
        variance=variance,
        ci_low=low,
        ci_high=high,
        statistic=z,
        p_value=p_value,
        reject=reject,
        alpha=alpha,
        n=cohort.n,
        p_dim=cohort.p,
        K=cohort.K,
        comm_floats=cohort.ledger.total_floats,
    )


def test_coordinate(
    cohort: "FederatedCohort",
    trace: "GelTrace",
    coord: int = 0,
    alpha: float = 0.05,
    lam: Optional[float] = None,
    c0: float = 1.0,
    gamma_hat=None,
) -> InferenceReport:
    """Decorrelated score test of beta_coord = 0.

    `gamma_hat` defaults to beta_hat without the tested coordinate; any other
    nuisance estimate can be passed instead.
    """
    _check_alpha(alpha)
    if not 0 <= coord < cohort.p:
        raise InvalidArgumentError(f"coordinate {coord} outside 0..{cohort.p - 1}")
    lam = default_w_lambda(cohort, c0) if lam is None else lam
    beta_hat = trace.beta_hat
    gamma_hat = np.delete(beta_hat, coord) if gamma_hat is None else gamma_hat

    ws = cohort.solve_ws(beta_hat, lam, coord)
    pi_bar = decorrelated_score(cohort, gamma_hat, trace.beta_tilde, ws, coord)
    sigma2 = sigma_nu_hat(cohort, beta_hat, ws, coord)
    result = score_test(pi_bar, math.sqrt(sigma2), cohort.n, alpha)
    logger.info(f"Score test on coordinate {coord + 1}: z={result.z:.3f}, p={result.p_value:.4f}")

    return InferenceReport(
        target=f"beta{coord + 1}=0",
        estimate=pi_bar,
        variance=sigma2,
        statistic=result.z,
        p_value=result.p_value,
        reject=result.reject,
        alpha=alpha,
        n=cohort.n,
        p_dim=cohort.p,
        K=cohort.K,
        comm_floats=cohort.ledger.total_floats,
    )


# not a pytest test
test_coordinate.__test__ = False


def average_debiased_inference(
    cohort: "FederatedCohort",
    coord: int = 0,
    alpha: float = 0.05,
    lam: Optional[float] = None,
    lam_node: Optional[float] = None,
) -> InferenceReport:
    """Wald interval and test from the averaged per-center debiased lasso."""
    from fedcox.federation.gel import default_lambdas

    _check_alpha(alpha)
    default_lam, default_node = default_lambdas(cohort)
    lam = default_lam if lam is None else lam
    lam_node = default_node if lam_node is None else lam_node

    local = [center.local_debiased(lam, lam_node, coords=[coord]) for center in cohort.centers]
    estimate = float(np.mean([r.debiased[0] for r in local]))
    variance = float(np.mean([r.variances[0] for r in local]))
    if variance < 0:
        raise DegenerateVarianceError(f"variance estimate is negative ({variance:.3g})", variance)
    low, high = confidence_interval(estimate, variance, cohort.n, alpha)
    z = estimate / math.sqrt(variance / cohort.n) if variance > 0 else 0.0
    p_value, reject = _two_sided(z, alpha)

    return InferenceReport(
        target=f"beta{coord + 1}",
        estimate=estimate,
        variance=variance,
        ci_low=low,
        ci_high=high,
        statistic=z,
        p_value=p_value,
        reject=reject,
        alpha=alpha,
        n=cohort.n,
        p_dim=cohort.p,
        K=cohort.K,
        comm_floats=cohort.ledger.total_floats,
    )
