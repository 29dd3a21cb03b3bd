import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import pandas as pd

from fedcox.errors import InvalidArgumentError, SolverError
from fedcox.federation.services.CoordinatorService import FederatedCohort
from fedcox.lasso import (
    FitDiagnostics,
    GelCorrection,
    LambdaSchedule,
    SolverOptions,
    fit_l1_cox,
    kkt_residual,
    theory_lambda,
)
from fedcox.survival import check_beta, gradient

logger = logging.getLogger(__name__)

Baseline = Literal["one_center", "average", "average_debiased"]


@dataclass
class GelTrace:
    """Iterates beta_0..beta_T of one GEL run.

    `comm[t]` is the number of floats exchanged to produce iterate t (0 for
    the initial fit). `kkt[t]` is the solver residual of iterate t.
    """

    K: int
    p: int
    iterates: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    comm: list = field(default_factory=list)
    kkt: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    error: Optional[BaseException] = None

    @property
    def rounds(self) -> int:
        return len(self.iterates) - 1

    @property
    def beta_hat(self) -> np.ndarray:
        return self.iterates[-1]

    @property
    def beta_tilde(self) -> np.ndarray:
        return self.iterates[-2] if len(self.iterates) > 1 else self.iterates[-1]

    def record(self, beta, lam: float, floats: int, diagnostics: Optional[FitDiagnostics]):
        self.iterates.append(np.asarray(beta, dtype=float).copy())
        self.lambdas.append(float(lam))
        self.comm.append(int(floats))
        self.kkt.append(float("nan") if diagnostics is None else diagnostics.kkt_residual)
        self.diagnostics.append(diagnostics)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            np.vstack(self.iterates), columns=[f"beta{j + 1}" for j in range(self.p)]
        )
        frame.insert(0, "kkt", self.kkt)
        frame.insert(0, "comm_floats", self.comm)
        frame.insert(0, "lambda", self.lambdas)
        frame.insert(0, "t", np.arange(len(self.iterates)))
        return frame

    def digest(self) -> str:
        h = hashlib.sha256()
        for beta in self.iterates:
            h.update(np.ascontiguousarray(beta, dtype="<f8").tobytes())
        h.update(np.asarray(self.lambdas, dtype="<f8").tobytes())
        h.update(np.asarray(self.comm, dtype="<i8").tobytes())
        h.update(np.asarray(self.kkt, dtype="<f8").tobytes())
        return h.hexdigest()


def rounds_for_full_rate(K: int, contraction: float = 0.5) -> int:
    """Rounds after which the GEL error matches the full-sample rate.

    ceil(log K / (2 log(1 / contraction))), zero for a single center.
    """
    if K < 1:
        raise InvalidArgumentError(f"K must be at least 1, got {K}")
    if not 0 < contraction < 1:
        raise InvalidArgumentError(f"contraction must lie in (0, 1), got {contraction}")
    if K == 1:
        return 0
    return math.ceil(math.log(K) / (2 * math.log(1 / contraction)))


def gel_iterate(
    cohort: FederatedCohort,
    T: Optional[int] = None,
    schedule: Optional[LambdaSchedule] = None,
    init=None,
    lambda0: Optional[float] = None,
    opts: Optional[SolverOptions] = None,
) -> GelTrace:
    """Run T gradient-enhanced rounds from a principal-center lasso fit.

    Round t broadcasts beta_t, averages the K local gradients and refits the
    principal center's loss with its gradient swapped for the average,
    warm-started at beta_t. A solver failure stops the run and is attached to
    the returned trace. T defaults to `rounds_for_full_rate(K)`.
    """
    if T is None:
        T = rounds_for_full_rate(cohort.K)
    if T < 0:
        raise InvalidArgumentError(f"T must be nonnegative, got {T}")
    opts = opts or cohort.opts
    principal = cohort.principal_data
    schedule = schedule or LambdaSchedule.theory(principal, cohort.n)
    lam0 = schedule.for_round(0) if lambda0 is None else lambda0

    trace = GelTrace(K=cohort.K, p=cohort.p)
    start_time = time.time()
    if init is None:
        beta, diagnostics = fit_l1_cox(principal, lam0, opts=opts)
    else:
        beta = check_beta(init, cohort.p).copy()
        diagnostics = FitDiagnostics(
            lambda_=lam0,
            outer_iters=0,
            kkt_residual=kkt_residual(beta, gradient(principal, beta), lam0),
            objective=float("nan"),
            support_size=int(np.count_nonzero(beta)),
        )
    trace.record(beta, lam0, 0, diagnostics)
    logger.info(f"Initial estimator took {time.time() - start_time:.2f}s, lambda={lam0:.4g}")

    for t in range(T):
        round_start = time.time()
        floats_before = cohort.ledger.total_floats
        grads = cohort.local_gradients(beta, use_cache=False)[0]
        correction = GelCorrection.from_gradients(
            grads[cohort.principal], grads.mean(axis=0), beta
        )
        lam = schedule.for_round(t + 1)
        try:
            beta, diagnostics = fit_l1_cox(principal, lam, correction, init=beta, opts=opts)
        except SolverError as e:
            logger.warning(f"Round {t + 1} solver failed, trace truncated: {e}")
            trace.error = e
            break
        trace.record(beta, lam, cohort.ledger.total_floats - floats_before, diagnostics)
        logger.info(
            f"Round {t + 1} took {time.time() - round_start:.2f}s, "
            f"lambda={lam:.4g}, support={diagnostics.support_size}"
        )

    logger.info(f"GEL run of {trace.rounds} rounds took {time.time() - start_time:.2f}s")
    return trace


def default_lambdas(cohort: FederatedCohort, c0: float = 1.0) -> tuple[float, float]:
    """Local lasso and nodewise penalties at the sqrt(log p / m) rate."""
    bound = float(np.abs(cohort.principal_data.covariates).max())
    lam = theory_lambda(c0, bound, cohort.p, cohort.m)
    lam_node = theory_lambda(c0, 1.0, cohort.p, cohort.m)
    return lam, lam_node


def baseline_estimators(
    cohort: FederatedCohort,
    which: Baseline,
    lam: Optional[float] = None,
    lam_node: Optional[float] = None,
) -> np.ndarray:
    """One-center, averaged, or averaged-debiased lasso.

    These are comparison estimators, so they call the centers directly and
    leave the communication ledger alone.
    """
    default_lam, default_node = default_lambdas(cohort)
    lam = default_lam if lam is None else lam
    lam_node = default_node if lam_node is None else lam_node

    if which == "one_center":
        return cohort.centers[cohort.principal].local_lasso(lam)
    if which == "average":
        return np.mean([center.local_lasso(lam) for center in cohort.centers], axis=0)
    if which == "average_debiased":
        return np.mean(
            [center.local_debiased(lam, lam_node).debiased for center in cohort.centers],
            axis=0,
        )
    raise InvalidArgumentError(f"unknown baseline: {which}")
