import logging
import time
from collections import OrderedDict
from typing import Literal, Optional, Sequence

import numpy as np

from fedcox.errors import InvalidArgumentError
from fedcox.federation.protocol import MAX_BATCH, Message, MessageType, SolveKind
from fedcox.federation.services.CenterService import CenterService
from fedcox.federation.transport import CommLedger, TransportKind, make_transport
from fedcox.lasso import SolverOptions
from fedcox.survival import SurvivalDataset, center_covariates, check_beta

logger = logging.getLogger(__name__)

GRADIENT_CACHE_SIZE = 8


class FederatedCohort:
    """K equally sized centers behind one transport, driven by the principal center.

    Every exchange goes through `transport` and is tallied in `ledger`. Local
    gradients of recent rounds are kept per beta so inference can reuse the
    round that produced beta_T.
    """

    def __init__(
        self,
        datasets: Sequence[SurvivalDataset],
        transport: TransportKind = "inproc",
        principal: int = 0,
        blocks: Optional[list[np.ndarray]] = None,
        timeout: Optional[float] = None,
        opts: Optional[SolverOptions] = None,
    ):
        if not datasets:
            raise InvalidArgumentError("a cohort needs at least one center")
        sizes = {d.n for d in datasets}
        if len(sizes) != 1:
            raise InvalidArgumentError(f"centers must have equal sizes, got {sorted(sizes)}")
        dims = {d.p for d in datasets}
        if len(dims) != 1:
            raise InvalidArgumentError(f"centers disagree on p: {sorted(dims)}")
        if not 0 <= principal < len(datasets):
            raise InvalidArgumentError(
                f"principal index {principal} outside 0..{len(datasets) - 1}"
            )

        self.opts = opts or SolverOptions()
        self.centers = [CenterService(d, k, self.opts) for k, d in enumerate(datasets)]
        self.principal = principal
        self.blocks = blocks
        self.ledger = CommLedger()
        self.transport = make_transport(transport, self.centers, self.ledger, timeout)
        self._round = 0
        self._gradients: OrderedDict[bytes, np.ndarray] = OrderedDict()
        logger.info(
            f"Cohort ready: K={self.K}, m={self.m}, p={self.p}, transport={transport}"
        )

    @property
    def K(self) -> int:
        return len(self.centers)

    @property
    def m(self) -> int:
        return self.centers[0].data.n

    @property
    def n(self) -> int:
        return self.K * self.m

    @property
    def p(self) -> int:
        return self.centers[0].data.p

    @property
    def principal_data(self) -> SurvivalDataset:
        return self.centers[self.principal].data

    @property
    def datasets(self) -> list[SurvivalDataset]:
        return [c.data for c in self.centers]

    def _next_round(self) -> int:
        self._round += 1
        return self._round

    def _remember(self, key: bytes, grads: np.ndarray):
        self._gradients[key] = grads
        self._gradients.move_to_end(key)
        while len(self._gradients) > GRADIENT_CACHE_SIZE:
            self._gradients.popitem(last=False)

    def local_gradients(self, betas, use_cache: bool = True) -> np.ndarray:
        """Per-center gradients at each beta, shape (r, K, p).

        Betas without a cached round are requested in batches of at most
        MAX_BATCH per exchange.
        """
        betas = np.atleast_2d(np.asarray(betas, dtype=float))
        betas = np.vstack([check_beta(b, self.p) for b in betas])
        keys = [b.tobytes() for b in betas]

        missing = {}
        for key, beta in zip(keys, betas):
            if not use_cache or key not in self._gradients:
                missing.setdefault(key, beta)
        missing = list(missing.items())

        for start in range(0, len(missing), MAX_BATCH):
            batch = missing[start:start + MAX_BATCH]
            round_ = self._next_round()
            began = time.time()
            replies = self.transport.exchange(
                Message.grad_request(round_, np.vstack([b for _, b in batch]))
            )
            stacked = np.stack([reply.arrays[0] for reply in replies], axis=1)
            for i, (key, _) in enumerate(batch):
                self._remember(key, stacked[i])
            logger.debug(
                f"Gradient round {round_} ({len(batch)} point(s)) took {time.time() - began:.3f}s"
            )

        return np.stack([self._gradients[key] for key in keys])

    def _omega_request(
        self, kind: SolveKind, lam: float, coord: int, beta_hat, *vectors, round_: Optional[int] = None
    ) -> Message:
        params = np.array([float(kind), float(lam), float(coord)])
        arrays = (params, check_beta(beta_hat, self.p)) + tuple(
            np.asarray(v, dtype=float) for v in vectors
        )
        return Message(MessageType.OMEGA_REQUEST, self._next_round() if round_ is None else round_, arrays)

    def solve_omegas(self, beta_hat, c, lam: float) -> np.ndarray:
        replies = self.transport.exchange(self._omega_request(SolveKind.OMEGA, lam, 0, beta_hat, c))
        return np.vstack([r.arrays[0] for r in replies])

    def solve_ws(self, beta_hat, lam: float, coord: int = 0) -> np.ndarray:
        replies = self.transport.exchange(self._omega_request(SolveKind.W, lam, coord, beta_hat))
        return np.vstack([r.arrays[0] for r in replies])

    def linear_quadforms(self, beta_hat, omegas, c) -> np.ndarray:
        """Per-center (c'omega_k, omega_k'H_k omega_k), shape (K, 2)."""
        round_ = self._next_round()
        requests = [
            self._omega_request(SolveKind.LINEAR_QUADFORM, 0.0, 0, beta_hat, omega, c, round_=round_)
            for omega in np.atleast_2d(omegas)
        ]
        replies = self.transport.exchange(requests)
        return np.vstack([r.arrays[0] for r in replies])

    def nu_quadforms(self, beta_hat, ws, coord: int = 0) -> np.ndarray:
        """Per-center (H_nunu, H_gammanu'w_k, w_k'H_gammagamma w_k), shape (K, 3)."""
        round_ = self._next_round()
        requests = [
            self._omega_request(SolveKind.NU_QUADFORM, 0.0, coord, beta_hat, w, round_=round_)
            for w in np.atleast_2d(ws)
        ]
        replies = self.transport.exchange(requests)
        return np.vstack([r.arrays[0] for r in replies])

    def hazard_increments(self, beta, edges=None) -> list[tuple[np.ndarray, np.ndarray, float]]:
        arrays = (check_beta(beta, self.p), np.asarray([] if edges is None else edges, dtype=float))
        replies = self.transport.exchange(
            Message(MessageType.HAZARD_REQUEST, self._next_round(), arrays)
        )
        return [(r.arrays[0], r.arrays[1], float(r.arrays[2][0])) for r in replies]

    def center_globally(self) -> np.ndarray:
        """Shift every center by the pooled covariate mean, built from per-center column sums.

        One round collects (sums, count) from each center; a second broadcasts
        the mean, which each center subtracts from its own rows.
        """
        origin = np.zeros(self.p)
        replies = self.transport.exchange(self._omega_request(SolveKind.COLUMN_SUMS, 0.0, 0, origin))
        totals = np.sum([r.arrays[0] for r in replies], axis=0)
        mean = totals[:-1] / totals[-1]
        self.transport.exchange(self._omega_request(SolveKind.CENTER, 0.0, 0, origin, mean))
        self._gradients.clear()
        return mean

    def close(self):
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def partition(
    data: SurvivalDataset,
    K: int,
    seed: int = 0,
    transport: TransportKind = "inproc",
    opts: Optional[SolverOptions] = None,
    centering: Optional[Literal["global", "per_center"]] = None,
    principal: int = 0,
    timeout: Optional[float] = None,
) -> FederatedCohort:
    """Split `data` uniformly at random into K blocks of n/K subjects."""
    if K < 1:
        raise InvalidArgumentError(f"K must be at least 1, got {K}")
    remainder = data.n % K
    if remainder:
        raise InvalidArgumentError(
            f"K={K} does not divide n={data.n} (remainder {remainder})"
        )

    rng = np.random.default_rng(seed)
    blocks = [np.sort(b) for b in rng.permutation(data.n).reshape(K, data.n // K)]
    datasets = [data.subset(b) for b in blocks]
    if centering == "per_center":
        datasets = center_covariates(datasets, centering)
    elif centering not in (None, "global"):
        raise InvalidArgumentError(f"unknown centering mode: {centering}")
    cohort = FederatedCohort(
        datasets,
        transport=transport,
        principal=principal,
        blocks=blocks,
        timeout=timeout,
        opts=opts,
    )
    if centering == "global":
        try:
            cohort.center_globally()
        except Exception:
            cohort.close()
            raise
    return cohort


def aggregate_gradient(cohort: FederatedCohort, beta) -> np.ndarray:
    """Average of the K local gradients at beta; always a fresh round."""
    return cohort.local_gradients(beta, use_cache=False)[0].mean(axis=0)
