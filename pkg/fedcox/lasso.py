import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse.linalg import LinearOperator
from sklearn.model_selection import KFold

from fedcox.errors import (
    ConvergenceError,
    InvalidArgumentError,
    UnboundedProblemError,
)
from fedcox.survival import (
    SurvivalDataset,
    check_beta,
    eta_derivatives,
    gradient,
    neg_log_partial_likelihood,
)

logger = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-6


class SolverOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_outer: int = Field(100, gt=0)
    max_inner: int = Field(1000, gt=0)
    tol_kkt: float = Field(1e-7, gt=0)
    tol_obj: float = Field(1e-10, gt=0)
    active_set: bool = True
    max_halvings: int = Field(30, gt=0)


class FitDiagnostics(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(alias="lambda")
    outer_iters: int
    kkt_residual: float
    objective: float
    support_size: int

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True)


@dataclass(frozen=True)
class GelCorrection:
    """Linear term subtracted from the principal center's loss.

    `shift` is the principal's local gradient minus the averaged gradient,
    both evaluated at `anchor`.
    """

    shift: np.ndarray
    anchor: np.ndarray

    @classmethod
    def from_gradients(cls, local_gradient, global_gradient, anchor) -> "GelCorrection":
        return cls(
            shift=np.asarray(local_gradient, dtype=float) - np.asarray(global_gradient, dtype=float),
            anchor=np.asarray(anchor, dtype=float).copy(),
        )

    @classmethod
    def zero(cls, p: int) -> "GelCorrection":
        return cls(shift=np.zeros(p), anchor=np.zeros(p))


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def kkt_residual(beta: np.ndarray, grad: np.ndarray, lam: float) -> float:
    """Largest violation of the lasso optimality conditions for grad + lam * d|beta|."""
    inactive = np.maximum(np.abs(grad) - lam, 0.0)
    active = np.abs(grad + lam * np.sign(beta))
    residual = np.where(beta == 0, inactive, active)
    return float(residual.max()) if residual.size else 0.0


def _check_lambda(lam) -> float:
    lam = float(lam)
    if not math.isfinite(lam) or lam <= 0:
        raise InvalidArgumentError(f"lambda must be a positive finite number, got {lam}")
    return lam


def penalized_objective(data: SurvivalDataset, beta, lam: float, shift: np.ndarray) -> float:
    beta = np.asarray(beta, dtype=float)
    return neg_log_partial_likelihood(data, beta) - float(shift @ beta) + lam * float(np.abs(beta).sum())


def _solve_weighted_lasso(X, hess, q, shift, lam, start, opts: SolverOptions):
    """Cyclic coordinate descent on the quadratic model of the Cox loss.

    `q` holds grad_eta + hess * X (b - start) and is updated in place as the
    coordinates move.
    """
    b = start.copy()
    weighted = X * hess[:, None]
    curvature = np.einsum("ij,ij->j", X, weighted)
    movable = np.flatnonzero(curvature > 0)
    tol_inner = opts.tol_kkt / 10

    def sweep(coords) -> float:
        largest = 0.0
        for j in coords:
            grad_j = X[:, j] @ q - shift[j]
            new = soft_threshold(curvature[j] * b[j] - grad_j, lam) / curvature[j]
            step = new - b[j]
            if step != 0.0:
                np.add(q, step * weighted[:, j], out=q)
                b[j] = new
                largest = max(largest, curvature[j] * abs(step))
        return largest

    sweeps = 0
    while sweeps < opts.max_inner:
        sweeps += 1
        if sweep(movable) <= tol_inner:
            break
        if opts.active_set:
            active = movable[b[movable] != 0]
            while sweeps < opts.max_inner:
                sweeps += 1
                if sweep(active) <= tol_inner:
                    break
    return b


def fit_l1_cox(
    data: SurvivalDataset,
    lam: float,
    correction: Optional[GelCorrection] = None,
    init=None,
    opts: Optional[SolverOptions] = None,
) -> tuple[np.ndarray, FitDiagnostics]:
    """Minimise the (optionally GEL-corrected) L1-penalised partial likelihood.

    The outer loop expands the loss to second order in the linear predictor
    with diagonal weights; the inner loop solves the resulting penalised
    weighted least squares problem by coordinate descent. A step is halved
    until the true penalised objective does not increase.

    Returns
    -------
    beta : ndarray of shape (p,)
    diagnostics : FitDiagnostics
    """
    opts = opts or SolverOptions()
    lam = _check_lambda(lam)
    if data.n_events == 0:
        raise InvalidArgumentError("fit_l1_cox needs at least one observed event")

    p = data.p
    shift = np.zeros(p) if correction is None else np.asarray(correction.shift, dtype=float)
    if shift.shape != (p,):
        raise InvalidArgumentError(f"correction shift must have shape ({p},), got {shift.shape}")
    beta = np.zeros(p) if init is None else check_beta(init, p).copy()

    objective = penalized_objective(data, beta, lam, shift)
    delta = 0.0
    kkt = float("inf")

    for outer in range(1, opts.max_outer + 1):
        deriv = eta_derivatives(data, beta)
        grad = deriv.covariates.T @ deriv.grad - shift
        kkt = kkt_residual(beta, grad, lam)
        if kkt <= opts.tol_kkt and delta <= opts.tol_obj * max(1.0, abs(objective)):
            diagnostics = FitDiagnostics(
                lambda_=lam,
                outer_iters=outer - 1,
                kkt_residual=kkt,
                objective=objective,
                support_size=int(np.count_nonzero(beta)),
            )
            return beta, diagnostics

        candidate = _solve_weighted_lasso(
            deriv.covariates, deriv.hess_diag, deriv.grad.copy(), shift, lam, beta, opts
        )
        new_objective = penalized_objective(data, candidate, lam, shift)
        halvings = 0
        while new_objective > objective + 1e-12 * max(1.0, abs(objective)):
            if halvings == opts.max_halvings:
                candidate, new_objective = beta, objective
                logger.debug(f"Step halving exhausted at outer iteration {outer}")
                break
            candidate = beta + 0.5 * (candidate - beta)
            new_objective = penalized_objective(data, candidate, lam, shift)
            halvings += 1

        delta = abs(objective - new_objective)
        beta, objective = candidate, new_objective
        logger.debug(
            f"outer {outer}: objective={objective:.10f}, kkt={kkt:.2e}, halvings={halvings}"
        )

    raise ConvergenceError(
        f"fit_l1_cox did not converge in {opts.max_outer} outer iterations "
        f"(lambda={lam:.4g}, kkt residual {kkt:.2e})",
        beta=beta,
        kkt_residual=kkt,
    )


def _quadratic_kkt(Omega, HO, C, lam) -> float:
    return kkt_residual(Omega.ravel(), (2.0 * (HO - C)).ravel(), lam)


def _operator_norm(H: LinearOperator, p: int) -> float:
    v = np.ones(p) / math.sqrt(p)
    value = 0.0
    for _ in range(100):
        w = H.matvec(v)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - value) <= 1e-6 * norm:
            value = norm
            break
        value = norm
    return value * 1.05


def _fit_quadratic_operator(H: LinearOperator, C, lam, opts: SolverOptions) -> np.ndarray:
    """Accelerated proximal gradient for the Hessian-free path."""
    p, r = C.shape
    lipschitz = 2.0 * _operator_norm(H, p)
    if lipschitz == 0.0:
        if np.any(np.abs(C) > lam / 2):
            raise UnboundedProblemError("zero operator with a linear term beyond lambda/2")
        return np.zeros((p, r))

    step = 1.0 / lipschitz
    x = np.zeros((p, r))
    y = x.copy()
    t = 1.0
    for it in range(1, opts.max_inner * 10 + 1):
        grad = 2.0 * (H.matmat(y) - C)
        x_new = soft_threshold(y - step * grad, step * lam)
        t_new = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if it % 10 == 0:
            kkt = _quadratic_kkt(x, H.matmat(x), C, lam)
            if kkt <= opts.tol_kkt:
                return x

    kkt = _quadratic_kkt(x, H.matmat(x), C, lam)
    if kkt <= opts.tol_kkt:
        return x
    raise ConvergenceError(
        f"proximal gradient did not reach KKT tolerance (residual {kkt:.2e})",
        beta=x,
        kkt_residual=kkt,
    )


def fit_l1_quadratic(
    H: Union[np.ndarray, LinearOperator],
    c,
    lam: float,
    opts: Optional[SolverOptions] = None,
) -> np.ndarray:
    """Minimise w'Hw - 2c'w + lam * |w|_1.

    `c` may be a (p, r) matrix, in which case r independent problems sharing H
    are solved together and a (p, r) matrix is returned.
    """
    opts = opts or SolverOptions()
    lam = _check_lambda(lam)
    c = np.asarray(c, dtype=float)
    single = c.ndim == 1
    C = c.reshape(c.shape[0], -1)
    p = C.shape[0]

    if isinstance(H, LinearOperator):
        if H.shape != (p, p):
            raise InvalidArgumentError(f"operator shape {H.shape} does not match c ({p})")
        Omega = _fit_quadratic_operator(H, C, lam, opts)
        return Omega[:, 0] if single else Omega

    H = np.asarray(H, dtype=float)
    if H.shape != (p, p):
        raise InvalidArgumentError(f"H must be ({p}, {p}), got {H.shape}")
    scale = max(1.0, float(np.abs(H).max()) if H.size else 1.0)
    if not np.allclose(H, H.T, atol=1e-10 * scale, rtol=0):
        raise InvalidArgumentError("H must be symmetric")

    diag = np.diag(H).copy()
    flat = diag <= 1e-14 * scale
    for j in np.flatnonzero(flat):
        if np.any(np.abs(C[j]) > lam / 2):
            raise UnboundedProblemError(
                f"coordinate {j} has zero curvature and |c_j| > lambda/2; objective is unbounded"
            )
    movable = np.flatnonzero(~flat)

    Omega = np.zeros_like(C)
    HO = np.zeros_like(C)
    half = lam / 2

    def sweep(coords):
        for j in coords:
            z = C[j] - HO[j] + diag[j] * Omega[j]
            new = soft_threshold(z, half) / diag[j]
            step = new - Omega[j]
            if np.any(step != 0.0):
                np.add(HO, np.outer(H[:, j], step), out=HO)
                Omega[j] = new

    kkt = float("inf")
    for _ in range(opts.max_inner):
        sweep(movable)
        kkt = _quadratic_kkt(Omega, HO, C, lam)
        if kkt <= opts.tol_kkt:
            return Omega[:, 0] if single else Omega
        if opts.active_set:
            active = movable[np.any(Omega[movable] != 0, axis=1)]
            for _ in range(10):
                sweep(active)

    # incremental updates drift slightly; recompute before giving up
    HO = H @ Omega
    kkt = _quadratic_kkt(Omega, HO, C, lam)
    if kkt <= opts.tol_kkt:
        return Omega[:, 0] if single else Omega
    raise ConvergenceError(
        f"coordinate descent did not reach KKT tolerance (residual {kkt:.2e})",
        beta=Omega[:, 0] if single else Omega,
        kkt_residual=kkt,
    )


@dataclass(frozen=True)
class QuadraticProblem:
    H: Union[np.ndarray, LinearOperator]
    c: np.ndarray
    m: int


def theory_lambda(c0: float, bound: float, p: int, m: int) -> float:
    if c0 <= 0:
        raise InvalidArgumentError(f"theory_scale constant must be positive, got {c0}")
    if m <= 0 or p <= 0:
        raise InvalidArgumentError("theory_scale needs positive p and m")
    return max(c0 * bound * math.sqrt(math.log(p) / m), LAMBDA_FLOOR)


def lambda_path(
    data: SurvivalDataset, n_lambdas: int = 30, ratio: float = 0.01, shift=None
) -> np.ndarray:
    grad = gradient(data, np.zeros(data.p))
    if shift is not None:
        grad = grad - np.asarray(shift, dtype=float)
    lam_max = max(float(np.abs(grad).max()), LAMBDA_FLOOR)
    return np.geomspace(lam_max, lam_max * ratio, n_lambdas)


def _cv_lambda(
    data: SurvivalDataset,
    folds: int,
    n_lambdas: int,
    ratio: float,
    seed: int,
    opts: Optional[SolverOptions],
) -> float:
    if folds < 2:
        raise InvalidArgumentError(f"cv needs at least 2 folds, got {folds}")
    if data.n_events < folds:
        raise InvalidArgumentError(
            f"cv with {folds} folds needs at least {folds} events, found {data.n_events}"
        )

    path = lambda_path(data, n_lambdas, ratio)
    deviance = np.zeros((folds, n_lambdas))
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    for fold, (train_idx, _) in enumerate(splitter.split(np.arange(data.n))):
        train = data.subset(train_idx)
        if train.n_events == 0:
            raise InvalidArgumentError(f"cv fold {fold} has no events in its training part")
        beta = np.zeros(data.p)
        for i, lam in enumerate(path):
            beta, _ = fit_l1_cox(train, lam, init=beta, opts=opts)
            # cross-validated partial likelihood: full-data minus training contribution
            deviance[fold, i] = data.n * neg_log_partial_likelihood(
                data, beta
            ) - train.n * neg_log_partial_likelihood(train, beta)

    best = int(np.argmin(deviance.sum(axis=0)))
    logger.info(f"cv selected lambda={path[best]:.4g} (index {best} of {n_lambdas})")
    return float(path[best])


def select_lambda(
    problem: Union[SurvivalDataset, QuadraticProblem],
    rule: Literal["theory_scale", "cv"] = "theory_scale",
    *,
    c0: float = 8.0,
    bound: Optional[float] = None,
    m: Optional[int] = None,
    folds: int = 5,
    n_lambdas: int = 30,
    ratio: float = 0.01,
    seed: int = 0,
    opts: Optional[SolverOptions] = None,
) -> float:
    """Pick a penalty level.

    theory_scale returns c0 * B * sqrt(log p / m), floored at 1e-6. For a
    dataset B is the largest absolute covariate and m its size; for a
    quadratic problem B is the sup-norm of its linear term. cv minimises the
    K-fold cross-validated partial likelihood deviance over a log-spaced path
    and is only defined for datasets.
    """
    if rule == "theory_scale":
        if isinstance(problem, SurvivalDataset):
            scale = float(np.abs(problem.covariates).max()) if bound is None else bound
            return theory_lambda(c0, scale, problem.p, m or problem.n)
        if isinstance(problem, QuadraticProblem):
            scale = float(np.abs(problem.c).max()) if bound is None else bound
            return theory_lambda(c0, scale, problem.c.shape[0], m or problem.m)
        raise InvalidArgumentError(f"cannot select lambda for {type(problem).__name__}")

    if rule == "cv":
        if not isinstance(problem, SurvivalDataset):
            raise InvalidArgumentError("cv lambda selection needs a dataset")
        return _cv_lambda(problem, folds, n_lambdas, ratio, seed, opts)

    raise InvalidArgumentError(f"unknown lambda rule: {rule}")


class LambdaSchedule(BaseModel):
    """Penalty level per GEL round.

    constant keeps `base` for every round; geometric decays it by `rho` per
    round down to `floor`.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["constant", "geometric"] = "constant"
    base: float = Field(gt=0)
    rho: float = Field(0.9, gt=0, le=1)
    floor: float = Field(0.0, ge=0)
    rule: str = "theory_scale"

    def for_round(self, t: int) -> float:
        if self.kind == "constant":
            return self.base
        return max(self.base * self.rho**t, self.floor, LAMBDA_FLOOR)

    @classmethod
    def theory(
        cls,
        principal: SurvivalDataset,
        n_total: int,
        c0: float = 1.0,
        kind: Literal["constant", "geometric"] = "constant",
        rho: float = 0.9,
    ) -> "LambdaSchedule":
        bound = float(np.abs(principal.covariates).max())
        return cls(
            kind=kind,
            base=theory_lambda(c0, bound, principal.p, principal.n),
            rho=rho,
            floor=theory_lambda(c0, bound, principal.p, n_total),
            rule=f"theory_scale(c0={c0})",
        )
