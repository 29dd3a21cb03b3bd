import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.sparse.linalg import LinearOperator

from fedcox.errors import CapacityError, InvalidArgumentError, NoEventsWarning
from fedcox.settings import dense_hessian_cap

logger = logging.getLogger(__name__)

TiesPolicy = Literal["reject_ties", "jitter"]
JITTER_STEP = 1e-9


def check_beta(beta, p: int) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (p,):
        raise InvalidArgumentError(f"beta must have shape ({p},), got {beta.shape}")
    if not np.all(np.isfinite(beta)):
        raise InvalidArgumentError("beta contains non-finite entries")
    return beta


def _jitter_event_ties(times: np.ndarray, events: np.ndarray, seed: int) -> np.ndarray:
    times = times.copy()
    event_idx = np.flatnonzero(events == 1)
    values, inverse, counts = np.unique(
        times[event_idx], return_inverse=True, return_counts=True
    )
    rng = np.random.default_rng(seed)
    for group in np.flatnonzero(counts > 1):
        members = event_idx[inverse == group]
        ranks = rng.permutation(len(members))
        times[members] = values[group] + JITTER_STEP * ranks
    return times


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Right-censored survival data with time-fixed covariates.

    Arrays are copied and made read-only on construction, so a dataset can be
    shared across threads. The ascending-time permutation and the tie
    boundaries of every subject's risk set are computed once here and reused
    by every likelihood sweep.

    Parameters
    ----------
    times : array of shape (n,)
        Observed times Z_i, finite and nonnegative.
    events : array of shape (n,)
        Event indicators in {0, 1}.
    covariates : array of shape (n, p)
        Covariate matrix, one row per subject.
    study_end : float, optional
        End of follow-up tau. Defaults to the largest observed time.
    ties : {"reject_ties", "jitter"}
        What to do with tied event times.
    seed : int
        Seed for the jitter permutation.
    """

    times: np.ndarray
    events: np.ndarray
    covariates: np.ndarray
    study_end: Optional[float] = None
    ties: TiesPolicy = "reject_ties"
    seed: int = 0
    order: np.ndarray = field(init=False, repr=False)
    risk_start: np.ndarray = field(init=False, repr=False)
    tie_end: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        times = np.array(self.times, dtype=float).ravel()
        events = np.array(self.events).ravel()
        covariates = np.array(self.covariates, dtype=float)

        if covariates.ndim != 2:
            raise InvalidArgumentError(
                f"covariates must be a 2-d matrix, got {covariates.ndim} dimensions"
            )
        n = covariates.shape[0]
        if n == 0:
            raise InvalidArgumentError("dataset has no subjects")
        if times.shape[0] != n or events.shape[0] != n:
            raise InvalidArgumentError(
                f"times ({times.shape[0]}), events ({events.shape[0]}) and "
                f"covariate rows ({n}) must have equal length"
            )
        if not np.all(np.isfinite(times)) or np.any(times < 0):
            raise InvalidArgumentError("times must be finite and nonnegative")
        if not np.all(np.isin(events, (0, 1))):
            raise InvalidArgumentError("events must be 0/1 indicators")
        if not np.all(np.isfinite(covariates)):
            raise InvalidArgumentError("covariates contain non-finite entries")
        if self.ties not in ("reject_ties", "jitter"):
            raise InvalidArgumentError(f"unknown ties policy: {self.ties}")

        events = events.astype(np.int8)
        event_times = times[events == 1]
        if len(np.unique(event_times)) < len(event_times):
            if self.ties == "reject_ties":
                raise InvalidArgumentError(
                    "tied event times found; use ties='jitter' to break them"
                )
            times = _jitter_event_ties(times, events, self.seed)
            logger.warning("Broke tied event times with deterministic jitter")

        study_end = float(times.max()) if self.study_end is None else float(self.study_end)

        order = np.argsort(times, kind="stable")
        sorted_times = times[order]
        risk_start = np.searchsorted(sorted_times, sorted_times, side="left")
        tie_end = np.searchsorted(sorted_times, sorted_times, side="right") - 1

        for arr in (times, events, covariates, order, risk_start, tie_end):
            arr.setflags(write=False)

        object.__setattr__(self, "times", times)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "study_end", study_end)
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "risk_start", risk_start)
        object.__setattr__(self, "tie_end", tie_end)

    @classmethod
    def from_arrays(cls, times, events, covariates, ties: TiesPolicy = "reject_ties", seed: int = 0):
        return cls(times=times, events=events, covariates=covariates, ties=ties, seed=seed)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.events.sum())

    def subset(self, indices) -> "SurvivalDataset":
        indices = np.asarray(indices, dtype=int)
        return SurvivalDataset(
            times=self.times[indices],
            events=self.events[indices],
            covariates=self.covariates[indices],
            ties=self.ties,
            seed=self.seed,
        )

    def select_features(self, columns) -> "SurvivalDataset":
        columns = np.asarray(columns, dtype=int)
        return SurvivalDataset(
            times=self.times,
            events=self.events,
            covariates=self.covariates[:, columns],
            study_end=self.study_end,
            ties=self.ties,
            seed=self.seed,
        )

    def centered(self, mean: np.ndarray) -> "SurvivalDataset":
        return SurvivalDataset(
            times=self.times,
            events=self.events,
            covariates=self.covariates - np.asarray(mean, dtype=float),
            study_end=self.study_end,
            ties=self.ties,
            seed=self.seed,
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            self.covariates, columns=[f"x{j + 1}" for j in range(self.p)]
        )
        frame.insert(0, "event", self.events.astype(int))
        frame.insert(0, "time", self.times)
        return frame

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for arr in (self.times, self.events, self.covariates):
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()


def center_covariates(
    datasets: Sequence[SurvivalDataset], mode: Literal["global", "per_center"] = "global"
) -> list[SurvivalDataset]:
    if mode == "global":
        pooled = np.vstack([d.covariates for d in datasets])
        mean = pooled.mean(axis=0)
        return [d.centered(mean) for d in datasets]
    if mode == "per_center":
        return [d.centered(d.covariates.mean(axis=0)) for d in datasets]
    raise InvalidArgumentError(f"unknown centering mode: {mode}")


@dataclass(frozen=True)
class RiskSetSnapshot:
    s0: float
    s1: np.ndarray
    s2: Optional[np.ndarray] = None

    @property
    def mean(self) -> np.ndarray:
        if self.s0 == 0:
            return np.zeros_like(self.s1)
        return self.s1 / self.s0

    @property
    def variance(self) -> Optional[np.ndarray]:
        if self.s2 is None or self.s0 == 0:
            return None
        return self.s2 / self.s0 - np.outer(self.mean, self.mean)


def risk_set_quantities(
    data: SurvivalDataset, beta, t: float, with_s2: bool = False
) -> RiskSetSnapshot:
    beta = check_beta(beta, data.p)
    if not np.isfinite(t) or t < 0:
        raise InvalidArgumentError(f"t must be a finite nonnegative time, got {t}")

    weights = np.exp(data.covariates @ beta) * (data.times >= t)
    s0 = float(weights.sum() / data.n)
    s1 = data.covariates.T @ weights / data.n
    s2 = None
    if with_s2:
        s2 = (data.covariates * weights[:, None]).T @ data.covariates / data.n
    return RiskSetSnapshot(s0=s0, s1=s1, s2=s2)


class _RiskSweep(NamedTuple):
    # all arrays in ascending-time order
    covariates: np.ndarray
    events: np.ndarray
    eta: np.ndarray
    log_suffix: np.ndarray
    log_s0: np.ndarray
    weights: np.ndarray


def _sweep(data: SurvivalDataset, beta: np.ndarray) -> _RiskSweep:
    X = data.covariates[data.order]
    events = data.events[data.order].astype(bool)
    eta = X @ beta

    # log of sum_{l >= i} exp(eta_l) in sorted order, i.e. a descending-time sweep
    log_suffix = np.logaddexp.accumulate(eta[::-1])[::-1]
    log_s0 = log_suffix[data.risk_start]

    # weights_j = exp(eta_j) * sum_{events i: Z_i <= Z_j} 1 / S0(Z_i)
    contrib = np.where(events, -log_s0, -np.inf)
    log_cum = np.logaddexp.accumulate(contrib)[data.tie_end]
    weights = np.exp(eta + log_cum)
    return _RiskSweep(X, events, eta, log_suffix, log_s0, weights)


def event_log_denominators(data: SurvivalDataset, beta) -> tuple[np.ndarray, np.ndarray]:
    """Event times in ascending order and log sum_{Z_l >= t} exp(x_l'beta) at each."""
    beta = check_beta(beta, data.p)
    sweep = _sweep(data, beta)
    times = data.times[data.order][sweep.events]
    return times, sweep.log_s0[sweep.events]


def _warn_if_no_events(data: SurvivalDataset) -> bool:
    if data.n_events == 0:
        warnings.warn("dataset has no observed events", NoEventsWarning, stacklevel=3)
        return True
    return False


def neg_log_partial_likelihood(data: SurvivalDataset, beta) -> float:
    beta = check_beta(beta, data.p)
    if _warn_if_no_events(data):
        return 0.0
    sweep = _sweep(data, beta)
    ev = sweep.events
    return float(-(sweep.eta[ev] - sweep.log_s0[ev]).sum() / data.n)


def gradient(data: SurvivalDataset, beta) -> np.ndarray:
    beta = check_beta(beta, data.p)
    if _warn_if_no_events(data):
        return np.zeros(data.p)
    sweep = _sweep(data, beta)
    return sweep.covariates.T @ (sweep.weights - sweep.events) / data.n


def _event_risk_means(data: SurvivalDataset, sweep: _RiskSweep) -> np.ndarray:
    """Risk-set covariate means at each event time, shape (n_events, p).

    Positive and negative parts are accumulated separately in log space so the
    running sums never overflow.
    """
    X, eta = sweep.covariates, sweep.eta
    with np.errstate(divide="ignore"):
        log_pos = np.log(np.clip(X, 0.0, None)) + eta[:, None]
        log_neg = np.log(np.clip(-X, 0.0, None)) + eta[:, None]
    rows = data.risk_start[sweep.events]
    pos = np.logaddexp.accumulate(log_pos[::-1], axis=0)[::-1][rows]
    neg = np.logaddexp.accumulate(log_neg[::-1], axis=0)[::-1][rows]
    denom = sweep.log_suffix[rows][:, None]
    return np.exp(pos - denom) - np.exp(neg - denom)


def hessian(data: SurvivalDataset, beta) -> np.ndarray:
    beta = check_beta(beta, data.p)
    cap = dense_hessian_cap()
    if data.p > cap:
        raise CapacityError(
            f"p={data.p} exceeds the dense Hessian cap of {cap}; "
            "use hessian_vector_product instead"
        )
    if data.n_events == 0:
        return np.zeros((data.p, data.p))

    sweep = _sweep(data, beta)
    means = _event_risk_means(data, sweep)
    X = sweep.covariates
    H = (X * sweep.weights[:, None]).T @ X - means.T @ means
    H /= data.n
    return (H + H.T) / 2


def hessian_vector_product(data: SurvivalDataset, beta, v) -> np.ndarray:
    beta = check_beta(beta, data.p)
    v = np.asarray(v, dtype=float)
    if v.shape != (data.p,):
        raise InvalidArgumentError(f"v must have shape ({data.p},), got {v.shape}")
    if data.n_events == 0:
        return np.zeros(data.p)

    sweep = _sweep(data, beta)
    means = _event_risk_means(data, sweep)
    X = sweep.covariates
    return (X.T @ (sweep.weights * (X @ v)) - means.T @ (means @ v)) / data.n


class EtaDerivatives(NamedTuple):
    """First and diagonal second derivatives of the loss in the linear predictor.

    Everything is in the dataset's ascending-time order.
    """

    covariates: np.ndarray
    eta: np.ndarray
    grad: np.ndarray
    hess_diag: np.ndarray


def eta_derivatives(data: SurvivalDataset, beta) -> EtaDerivatives:
    beta = check_beta(beta, data.p)
    sweep = _sweep(data, beta)
    contrib = np.where(sweep.events, -2.0 * sweep.log_s0, -np.inf)
    log_sq = np.logaddexp.accumulate(contrib)[data.tie_end]
    grad = (sweep.weights - sweep.events) / data.n
    hess_diag = np.clip(sweep.weights - np.exp(2.0 * sweep.eta + log_sq), 0.0, None) / data.n
    return EtaDerivatives(sweep.covariates, sweep.eta, grad, hess_diag)


def univariate_scores(data: SurvivalDataset) -> np.ndarray:
    return np.abs(gradient(data, np.zeros(data.p)))


def screen_top(data: SurvivalDataset, k: int) -> np.ndarray:
    scores = univariate_scores(data)
    k = min(k, data.p)
    return np.sort(np.argsort(-scores, kind="stable")[:k])


def hessian_operator(data: SurvivalDataset, beta) -> LinearOperator:
    """Hessian-free view of the loss curvature for large p.

    The risk-set sweep is done once; every product then costs O(n p).
    """
    beta = check_beta(beta, data.p)
    p = data.p
    if data.n_events == 0:
        return LinearOperator((p, p), matvec=lambda v: np.zeros(p), dtype=float)

    sweep = _sweep(data, beta)
    means = _event_risk_means(data, sweep)
    X, weights, n = sweep.covariates, sweep.weights, data.n

    def matmat(V):
        V = np.asarray(V, dtype=float).reshape(p, -1)
        return (X.T @ (weights[:, None] * (X @ V)) - means.T @ (means @ V)) / n

    return LinearOperator(
        (p, p),
        matvec=lambda v: matmat(v)[:, 0],
        matmat=matmat,
        rmatvec=lambda v: matmat(v)[:, 0],
        dtype=float,
    )


def local_hessian(data: SurvivalDataset, beta):
    """Dense Hessian when p fits under the cap, otherwise an operator."""
    if data.p > dense_hessian_cap():
        return hessian_operator(data, beta)
    return hessian(data, beta)
