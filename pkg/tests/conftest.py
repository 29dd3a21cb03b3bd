import numpy as np
import pytest

from fedcox.federation.services.CoordinatorService import partition
from fedcox.survival import SurvivalDataset


def make_dataset(n: int, p: int, seed: int = 0, beta=None, censor_rate: float = 0.4) -> SurvivalDataset:
    """Continuous exponential times, so event ties have probability zero."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, p))
    beta = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
    risk = np.exp(X @ beta)
    event_times = rng.exponential(1.0 / risk)
    censor_times = rng.exponential(1.0 / (censor_rate * risk))
    return SurvivalDataset(
        times=np.minimum(event_times, censor_times),
        events=(event_times <= censor_times).astype(int),
        covariates=X,
    )


def brute_force_loss(data: SurvivalDataset, beta) -> float:
    beta = np.asarray(beta, dtype=float)
    total = 0.0
    for i in range(data.n):
        if data.events[i]:
            at_risk = data.times >= data.times[i]
            total += data.covariates[i] @ beta - np.log(np.exp(data.covariates[at_risk] @ beta).sum())
    return -total / data.n


@pytest.fixture
def small_data():
    return make_dataset(40, 4, seed=1, beta=[1.0, -0.5, 0.0, 0.0])


@pytest.fixture
def signal_data():
    return make_dataset(200, 6, seed=7, beta=[0.0, 1.5, -1.5, 1.0, 0.0, 0.0])


@pytest.fixture
def cohort(signal_data):
    with partition(signal_data, 2, seed=3) as c:
        yield c


@pytest.fixture
def sim_config_file(tmp_path):
    path = tmp_path / "sim.toml"
    path.write_text(
        "n = 80\n"
        "p = 5\n"
        "K = 2\n"
        "rounds = 2\n"
        "beta_star = [0.0, 1.0, 1.0]\n"
        "replications = 2\n"
    )
    return path
