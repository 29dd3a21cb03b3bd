import argparse
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fedcox.settings import setup_logging
from fedcox.survival import SurvivalDataset

logger = logging.getLogger(__name__)


class SimConfig(BaseModel):
    """One simulation design plus the tuning used to analyse it.

    Defaults follow the main design: n=1000, p=50, K=8, beta* = (0, 2, 2, 2, 0, ...)
    and censoring at rate (3/7) exp(x'beta*), which censors about 30%.
    """

    model_config = ConfigDict(frozen=True)

    n: int = Field(1000, gt=0)
    p: int = Field(50, gt=1)
    K: int = Field(8, gt=0)
    beta_star: list[float] = [0.0, 2.0, 2.0, 2.0]
    censor_scale: float = Field(3 / 7, gt=0)
    baseline: Literal["constant_1"] = "constant_1"
    clip: float = Field(1.0, gt=0)
    replications: int = Field(400, gt=0)
    seed: int = 0
    nu_star: Optional[float] = None
    rounds: int = Field(10, ge=0)
    alpha: float = Field(0.05, gt=0, lt=1)
    c0_lambda: float = Field(1.0, gt=0)
    c0_omega: float = Field(1.0, gt=0)
    c0_w: float = Field(1.0, gt=0)
    c0_node: float = Field(1.0, gt=0)
    schedule: Literal["constant", "geometric"] = "geometric"
    rho: float = Field(0.9, gt=0, le=1)
    centering: Optional[Literal["global", "per_center"]] = "global"
    transport: Literal["inproc", "stream", "jsonl"] = "inproc"
    test_coord: int = Field(0, ge=0)
    screen_top: int = Field(300, gt=0)
    train_fraction: float = Field(0.8, gt=0, lt=1)
    bootstrap: int = Field(1000, gt=0)
    cindex_data: Optional[str] = None

    @model_validator(mode="after")
    def _check_design(self):
        if self.n % self.K:
            raise ValueError(f"K={self.K} must divide n={self.n} (remainder {self.n % self.K})")
        if len(self.beta_star) > self.p:
            raise ValueError(f"beta_star has {len(self.beta_star)} entries but p={self.p}")
        if self.test_coord >= self.p:
            raise ValueError(f"test_coord {self.test_coord} outside 0..{self.p - 1}")
        return self

    @classmethod
    def from_file(cls, path: str, **overrides) -> "SimConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                values = tomllib.load(f)
        else:
            with open(path) as f:
                values = json.load(f)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def beta_vector(self) -> np.ndarray:
        """beta_star padded to p; an explicit nu_star overrides the tested coordinate."""
        beta = np.zeros(self.p)
        beta[: len(self.beta_star)] = self.beta_star
        if self.nu_star is not None:
            beta[self.test_coord] = self.nu_star
        return beta


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent stream for replication `rep`, derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


def generate_dataset(cfg: SimConfig, rep_seed: int) -> SurvivalDataset:
    rng = replication_rng(cfg.seed, rep_seed)
    beta = cfg.beta_vector()

    X = np.clip(rng.standard_normal((cfg.n, cfg.p)), -cfg.clip, cfg.clip)
    risk = np.exp(X @ beta)
    event_times = rng.exponential(1.0 / risk)
    censor_times = rng.exponential(1.0 / (cfg.censor_scale * risk))

    times = np.minimum(event_times, censor_times)
    events = (event_times <= censor_times).astype(int)
    return SurvivalDataset(times=times, events=events, covariates=X, ties="jitter", seed=rep_seed)


def write_dataset_csv(data: SurvivalDataset, path: str) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data.to_frame().to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {data.n} subjects ({data.n_events} events) to {path}")
    return path


def main(argv=None):
    parser = argparse.ArgumentParser(description="Generate a simulated survival dataset")
    parser.add_argument("--config", type=str, default=None, help="TOML or JSON SimConfig")
    parser.add_argument("--n", type=int, default=None)
    parser.add_argument("--p", type=int, default=None)
    parser.add_argument("--k", type=int, default=None, help="Number of centers")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--nu-star", type=float, default=None)
    parser.add_argument("--censor-scale", type=float, default=None)
    parser.add_argument("--rep", type=int, default=0, help="Replication index (default: 0)")
    parser.add_argument(
        "--out",
        type=str,
        default=os.path.join(os.getcwd(), "data", "simulated.csv"),
        help="Output CSV path (default: ./data/simulated.csv)",
    )

    args = parser.parse_args(argv)
    setup_logging()

    overrides = {
        "n": args.n,
        "p": args.p,
        "K": args.k,
        "seed": args.seed,
        "nu_star": args.nu_star,
        "censor_scale": args.censor_scale,
    }
    if args.config:
        cfg = SimConfig.from_file(args.config, **overrides)
    else:
        cfg = SimConfig(**{k: v for k, v in overrides.items() if v is not None})

    data = generate_dataset(cfg, args.rep)
    write_dataset_csv(data, args.out)
    logger.info(f"Censoring fraction: {1 - data.n_events / data.n:.3f}")


if __name__ == "__main__":
    main()
