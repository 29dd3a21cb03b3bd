import os
import logging
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def setup_logging(level: Optional[str] = None):
    level_name = (level or os.getenv("FEDCOX_LOG_LEVEL", "INFO")).upper()
    numeric = getattr(logging, level_name, None)
    if not isinstance(numeric, int):
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logging.error(f"Unknown log level {level_name}, falling back to INFO")
        return False

    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)
    return True


def experiments_dir() -> str:
    return os.getenv("FEDCOX_EXPERIMENTS_DIR", "experiments")


def dense_hessian_cap() -> int:
    return int(os.getenv("FEDCOX_DENSE_HESSIAN_CAP", "2000"))


def round_timeout() -> float:
    return float(os.getenv("FEDCOX_ROUND_TIMEOUT", "60"))
