import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Literal, Optional

import numpy as np
import pandas as pd
from scipy.stats import norm

from fedcox.errors import InvalidArgumentError
from fedcox.survival import SurvivalDataset, event_log_denominators

if TYPE_CHECKING:
    from fedcox.federation.services.CoordinatorService import FederatedCohort

logger = logging.getLogger(__name__)

KernelName = Literal["epanechnikov", "gaussian"]


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u**2), 0.0)


def gaussian(u):
    return norm.pdf(u)


KERNELS: dict[str, Callable] = {"epanechnikov": epanechnikov, "gaussian": gaussian}


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function: `initial` before the first knot, values[i] on [knots[i], knots[i+1])."""

    knots: np.ndarray
    values: np.ndarray
    domain_end: float
    initial: float = 0.0

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if knots.shape != values.shape:
            raise InvalidArgumentError(
                f"{knots.shape[0]} knots but {values.shape[0]} values"
            )
        if np.any(np.diff(knots) <= 0):
            raise InvalidArgumentError("knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right")
        out = np.concatenate([[self.initial], self.values])[idx]
        return float(out) if out.ndim == 0 else out

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.knots, "value": self.values})


@dataclass(frozen=True)
class HazardCurve:
    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    kernel: str

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.grid, "value": self.values})


def local_breslow_increments(data: SurvivalDataset, beta) -> tuple[np.ndarray, np.ndarray]:
    """Event times and 1 / sum_{at risk} exp(x'beta) for one center."""
    times, log_denominators = event_log_denominators(data, beta)
    # each event subject is in its own risk set, so the denominator is positive
    assert np.all(np.isfinite(log_denominators))
    return times, np.exp(-log_denominators)


def binned_increments(times, increments, edges) -> np.ndarray:
    """Sum increments into right-closed bins (edges[i-1], edges[i]]; the first bin is (-inf, edges[0]].

    Increments after the last edge are dropped.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size == 0 or np.any(np.diff(edges) <= 0):
        raise InvalidArgumentError("bin edges must be a non-empty strictly increasing vector")
    idx = np.searchsorted(edges, np.asarray(times, dtype=float), side="left")
    keep = idx < edges.size
    return np.bincount(idx[keep], weights=np.asarray(increments)[keep], minlength=edges.size)


def _pooled_increments(cohort: "FederatedCohort", beta):
    replies = cohort.hazard_increments(beta)
    times = np.concatenate([r[0] for r in replies])
    increments = np.concatenate([r[1] for r in replies]) / cohort.K
    study_end = max(r[2] for r in replies)
    order = np.argsort(times, kind="stable")
    return times[order], increments[order], study_end


def breslow(cohort: "FederatedCohort", beta, bins=None) -> StepFunction:
    """Cumulative baseline hazard averaged over the centers' Breslow sums.

    With `bins` each center ships per-bin sums on the shared edges instead of
    its event times, and the returned function jumps only at the edges.
    """
    if bins is not None:
        edges = np.asarray(bins, dtype=float)
        replies = cohort.hazard_increments(beta, edges)
        sums = np.mean([r[1] for r in replies], axis=0)
        return StepFunction(edges, np.cumsum(sums), domain_end=float(edges[-1]))

    times, increments, study_end = _pooled_increments(cohort, beta)
    if times.size == 0:
        logger.warning("No events in any center, Breslow estimate is identically zero")
        return StepFunction(np.array([]), np.array([]), domain_end=study_end)

    knots, starts = np.unique(times, return_index=True)
    jumps = np.add.reduceat(increments, starts)
    return StepFunction(knots, np.cumsum(jumps), domain_end=study_end)


def kernel_hazard(
    cohort: "FederatedCohort",
    beta,
    h: Optional[float] = None,
    kernel: KernelName = "epanechnikov",
    grid=None,
) -> HazardCurve:
    if kernel not in KERNELS:
        raise InvalidArgumentError(f"unknown kernel: {kernel}")
    if h is not None and not h > 0:
        raise InvalidArgumentError(f"bandwidth must be positive, got {h}")

    times, increments, study_end = _pooled_increments(cohort, beta)
    if h is None:
        h = study_end * cohort.n ** (-1 / 5)
        logger.info(f"Using default bandwidth h={h:.4f}")

    if grid is None:
        if study_end - h <= h:
            raise InvalidArgumentError(
                f"bandwidth {h:.4g} leaves no interior grid on [0, {study_end:.4g}]"
            )
        grid = np.linspace(h, study_end - h, 200)
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < 0) or np.any(grid > study_end):
        raise InvalidArgumentError(f"grid must lie within [0, {study_end:.4g}]")

    weights = KERNELS[kernel]((grid[:, None] - times[None, :]) / h) / h
    return HazardCurve(grid=grid, values=weights @ increments, bandwidth=float(h), kernel=kernel)
