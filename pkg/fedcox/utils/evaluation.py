import logging
import warnings
from typing import Optional

import numpy as np
from scipy import stats

from fedcox.errors import InvalidArgumentError
from fedcox.experiment_tracker import ExperimentTracker
from fedcox.hazard import StepFunction
from fedcox.survival import SurvivalDataset, check_beta

logger = logging.getLogger(__name__)


def km_censoring_survival(train: SurvivalDataset) -> StepFunction:
    """Kaplan-Meier estimate of P(C > t), treating censorings as the events."""
    sorted_times = np.sort(train.times)
    censored = train.times[train.events == 0]
    if censored.size == 0:
        return StepFunction(np.array([]), np.array([]), domain_end=float(sorted_times[-1]), initial=1.0)

    knots, drops = np.unique(censored, return_counts=True)
    at_risk = train.n - np.searchsorted(sorted_times, knots, side="left")
    values = np.cumprod(1.0 - drops / at_risk)
    return StepFunction(knots, values, domain_end=float(sorted_times[-1]), initial=1.0)


def c_index_ipw(
    train: SurvivalDataset,
    test: SurvivalDataset,
    beta,
    tau_w: Optional[float] = None,
) -> float:
    """Uno's concordance with censoring weights G(Z_i)^-2 fitted on `train`.

    A pair (i, j) is usable when subject i has an event and Z_i < Z_j; it is
    concordant when i has the higher risk score, and a tie in scores earns half
    credit. Event times at or beyond `tau_w`, or where G has dropped to zero,
    are left out.
    """
    beta = check_beta(beta, test.p)
    scores = test.covariates @ beta
    G = km_censoring_survival(train)(test.times)

    usable = test.events == 1
    if tau_w is not None:
        usable &= test.times < tau_w
    zero_weight = usable & (G <= 0)
    if zero_weight.any():
        message = f"{int(zero_weight.sum())} event(s) fall where the censoring survival is zero; truncating"
        warnings.warn(message, RuntimeWarning, stacklevel=2)
        logger.warning(message)
        usable &= ~zero_weight

    numerator = 0.0
    denominator = 0.0
    for i in np.flatnonzero(usable):
        later = test.times > test.times[i]
        if not later.any():
            continue
        weight = G[i] ** -2
        credit = (scores[i] > scores[later]).sum() + 0.5 * (scores[i] == scores[later]).sum()
        numerator += weight * credit
        denominator += weight * later.sum()

    if denominator == 0:
        raise InvalidArgumentError("test set has no usable pairs for the concordance index")
    return float(numerator / denominator)


def estimation_error(beta, beta_star) -> float:
    return float(np.linalg.norm(np.asarray(beta) - np.asarray(beta_star)))


def median_with_se(values, n_resamples: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Median and its bootstrap standard error."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return float("nan"), float("nan")
    median = float(np.median(values))
    if values.size < 2 or np.all(values == values[0]):
        return median, 0.0
    result = stats.bootstrap(
        (values,),
        np.median,
        n_resamples=n_resamples,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    return median, float(result.standard_error)


def proportion_with_se(flags) -> tuple[float, float]:
    flags = np.asarray(flags, dtype=float)
    if flags.size == 0:
        return float("nan"), float("nan")
    rate = float(flags.mean())
    return rate, float(np.sqrt(rate * (1 - rate) / flags.size))


def ks_uniform(p_values) -> tuple[float, float]:
    """Kolmogorov-Smirnov distance to Uniform(0, 1) and its p-value."""
    result = stats.kstest(np.asarray(p_values, dtype=float), "uniform")
    return float(result.statistic), float(result.pvalue)


def anderson_normal(values, level: float = 1.0) -> tuple[float, bool]:
    """Anderson-Darling statistic and whether normality survives at `level` percent."""
    result = stats.anderson(np.asarray(values, dtype=float), dist="norm")
    levels = list(result.significance_level)
    if level not in levels:
        raise InvalidArgumentError(f"level must be one of {levels}, got {level}")
    critical = result.critical_values[levels.index(level)]
    return float(result.statistic), bool(result.statistic < critical)


def _print_results(aggregates: dict, exclusions: dict, experiment_name: str):

    print(f"\n{'='*60}")
    print(f"🔥 EXPERIMENT: {experiment_name}")
    print("=" * 60)

    print(f"📊 Aggregates:")
    for key, value in aggregates.items():
        if isinstance(value, dict) and "value" in value:
            se = value.get("se")
            se_str = f" (se {se:.3f})" if isinstance(se, float) and np.isfinite(se) else ""
            print(f"   • {key}: {value['value']:.3f}{se_str}")
        elif isinstance(value, float):
            print(f"   • {key}: {value:.3f}")
        else:
            print(f"   • {key}: {value}")

    if exclusions:
        print(f"\n⚠️  Excluded replications:")
        for reason, count in exclusions.items():
            print(f"   • {reason}: {count}")

    print("=" * 60 + "\n")


def compare_experiments(experiment_names_or_ids: list[str], tracker: Optional[ExperimentTracker] = None):

    tracker = tracker or ExperimentTracker()
    comparison = tracker.compare_experiments(experiment_names_or_ids)

    if not comparison["experiments"]:
        logger.error("No valid experiments found for comparison")
        return

    print(f"\n{'='*60}")
    print("📊 EXPERIMENT COMPARISON")
    print("=" * 60)

    for metric, items in sorted(comparison["metrics_comparison"].items()):
        print(f"\n{metric}:")
        for item in items:
            value = item["value"]
            if isinstance(value, dict):
                value = value.get("value")
            if isinstance(value, (int, float)):
                print(f"   • {item['experiment']}: {value:.3f}")

    print("=" * 60 + "\n")

    return comparison


def list_experiments(tracker: Optional[ExperimentTracker] = None):

    tracker = tracker or ExperimentTracker()
    experiments = tracker.list_experiments()

    if not experiments:
        print("No experiments found.")
        return

    print(f"\n📁 Found {len(experiments)} experiments:")
    for exp in experiments:
        created = exp["created_at"][:10]
        print(f"   • {exp['name']} ({exp['study']}, {created}): {exp['replications']} replications")

    print()
