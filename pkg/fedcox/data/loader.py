import argparse
import logging
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd

from fedcox.errors import InvalidArgumentError
from fedcox.settings import setup_logging
from fedcox.survival import SurvivalDataset, TiesPolicy

logger = logging.getLogger(__name__)

DataFormat = Literal["csv", "dlbcl"]

TIME_COLUMNS = ("time", "survival_time", "os_time", "followup")
STATUS_COLUMNS = ("event", "status", "dead", "death")


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    return path


def _find_column(frame: pd.DataFrame, candidates) -> str:
    lookup = {c.lower().replace(" ", "_"): c for c in frame.columns}
    for name in candidates:
        if name in lookup:
            return lookup[name]
    raise InvalidArgumentError(
        f"none of the columns {list(candidates)} found; got {list(frame.columns)[:10]}"
    )


def load_csv_dataset(path, ties: TiesPolicy = "jitter", seed: int = 0) -> SurvivalDataset:
    """Read a `time,event,x1..xp` CSV as written by `fedcox simulate`."""
    frame = pd.read_csv(_require(path), float_precision="round_trip")
    time_col = _find_column(frame, TIME_COLUMNS)
    event_col = _find_column(frame, STATUS_COLUMNS)
    covariates = frame.drop(columns=[time_col, event_col])

    logger.info(f"Loaded {len(frame)} rows with {covariates.shape[1]} covariates from {path}")
    return SurvivalDataset(
        times=frame[time_col].to_numpy(dtype=float),
        events=frame[event_col].to_numpy(dtype=int),
        covariates=covariates.to_numpy(dtype=float),
        ties=ties,
        seed=seed,
    )


def load_dlbcl_dataset(path, ties: TiesPolicy = "jitter", seed: int = 0) -> SurvivalDataset:
    """Read a tab-separated gene-expression table with survival columns.

    Subjects with non-positive follow-up are dropped, missing expression values
    are imputed by the gene median, constant genes are removed and the rest are
    standardized.
    """
    frame = pd.read_csv(_require(path), sep="\t", float_precision="round_trip")
    time_col = _find_column(frame, TIME_COLUMNS)
    status_col = _find_column(frame, STATUS_COLUMNS)

    frame = frame[pd.to_numeric(frame[time_col], errors="coerce") > 0]
    genes = frame.drop(columns=[time_col, status_col]).apply(pd.to_numeric, errors="coerce")
    genes = genes.dropna(axis=1, how="all")
    genes = genes.fillna(genes.median())

    spread = genes.std(ddof=0)
    constant = spread[spread == 0].index
    if len(constant):
        logger.warning(f"Dropping {len(constant)} constant gene columns")
    genes = genes.drop(columns=constant)
    genes = (genes - genes.mean()) / genes.std(ddof=0)

    logger.info(f"Loaded {len(frame)} subjects and {genes.shape[1]} genes from {path}")
    return SurvivalDataset(
        times=frame[time_col].to_numpy(dtype=float),
        events=frame[status_col].to_numpy(dtype=int),
        covariates=genes.to_numpy(dtype=float),
        ties=ties,
        seed=seed,
    )


def load_dataset(path, fmt: DataFormat = "csv", ties: TiesPolicy = "jitter", seed: int = 0) -> SurvivalDataset:
    if fmt == "csv":
        return load_csv_dataset(path, ties, seed)
    if fmt == "dlbcl":
        return load_dlbcl_dataset(path, ties, seed)
    raise InvalidArgumentError(f"unknown data format: {fmt}")


def drop_remainder(data: SurvivalDataset, K: int, seed: int = 0) -> SurvivalDataset:
    """Randomly drop n mod K subjects so the data splits into K equal centers."""
    remainder = data.n % K
    if not remainder:
        return data
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.permutation(data.n)[: data.n - remainder])
    logger.warning(f"Dropped {remainder} subjects so that K={K} divides n")
    return data.subset(keep)


def main(argv=None):
    parser = argparse.ArgumentParser(description="Load and summarise a survival dataset")
    parser.add_argument("path", type=str, help="Path to the data file")
    parser.add_argument(
        "--format",
        type=str,
        default="csv",
        choices=["csv", "dlbcl"],
        help="File layout (default: csv)",
    )

    args = parser.parse_args(argv)
    setup_logging()

    data = load_dataset(args.path, args.format)
    logger.info(
        f"n={data.n}, p={data.p}, events={data.n_events}, "
        f"censored={1 - data.n_events / data.n:.1%}, study end={data.study_end:.3f}"
    )


if __name__ == "__main__":
    main()
