import logging
import socket
import threading
from typing import NamedTuple, Optional

import numpy as np

from fedcox.federation.protocol import Message, read_frame, write_frame
from fedcox.federation.router import Router
from fedcox.federation.routes.gradient import router as gradient_router
from fedcox.federation.routes.hazard import router as hazard_router
from fedcox.federation.routes.inference import router as inference_router
from fedcox.hazard import binned_increments, local_breslow_increments
from fedcox.inference import estimate_omega_k, estimate_w_k
from fedcox.lasso import SolverOptions, fit_l1_cox, fit_l1_quadratic
from fedcox.survival import SurvivalDataset, gradient, local_hessian

logger = logging.getLogger(__name__)


class LocalDebiased(NamedTuple):
    lasso: np.ndarray
    debiased: np.ndarray
    variances: np.ndarray
    coords: np.ndarray


class CenterService:
    """One data-holding site. Answers protocol requests from its own rows only."""

    def __init__(self, data: SurvivalDataset, index: int = 0, opts: Optional[SolverOptions] = None):
        self.data = data
        self.index = index
        self.opts = opts or SolverOptions()
        self.router = Router()
        self.router.include_router(gradient_router)
        self.router.include_router(inference_router)
        self.router.include_router(hazard_router)
        self._hessian_key = None
        self._hessian = None
        self._lock = threading.Lock()
        logger.info(
            f"Center {index} initialized with {data.n} subjects and {data.n_events} events"
        )

    def handle(self, request: Message) -> Message:
        try:
            return self.router.dispatch(self, request)
        except Exception as e:
            logger.error(f"Center {self.index} failed on {request.kind.name}: {e}")
            return Message.error(f"{type(e).__name__}: {e}", request.round)

    def serve(self, sock: socket.socket):
        try:
            while True:
                try:
                    request = read_frame(sock)
                except (ConnectionError, OSError):
                    break
                except Exception as e:
                    write_frame(sock, Message.error(f"{type(e).__name__}: {e}"))
                    continue
                reply = self.handle(request)
                try:
                    write_frame(sock, reply)
                except (ConnectionError, OSError):
                    # coordinator gave up on this round and reconnected
                    break
        finally:
            sock.close()

    def local_hessian(self, beta):
        key = np.asarray(beta, dtype=float).tobytes()
        with self._lock:
            if self._hessian_key != key:
                self._hessian = local_hessian(self.data, beta)
                self._hessian_key = key
            return self._hessian

    def column_sums(self) -> tuple[np.ndarray, int]:
        return self.data.covariates.sum(axis=0), self.data.n

    def center_on(self, mean):
        with self._lock:
            self.data = self.data.centered(mean)
            self._hessian_key = None
            self._hessian = None
        logger.info(f"Center {self.index} shifted its covariates by the cohort mean")

    def local_gradient(self, beta) -> np.ndarray:
        return gradient(self.data, beta)

    def solve_omega(self, beta_hat, c, lam: float) -> np.ndarray:
        return estimate_omega_k(
            self.data, beta_hat, c, lam, self.opts, hessian=self.local_hessian(beta_hat)
        )

    def solve_w(self, beta_hat, lam: float, coord: int) -> np.ndarray:
        return estimate_w_k(
            self.data, beta_hat, lam, coord, self.opts, hessian=self.local_hessian(beta_hat)
        )

    def linear_quadform(self, beta_hat, omega, c) -> tuple[float, float]:
        H = self.local_hessian(beta_hat)
        return float(c @ omega), float(omega @ H.dot(omega))

    def nu_quadform(self, beta_hat, w, coord: int) -> tuple[float, float, float]:
        H = self.local_hessian(beta_hat)
        p = self.data.p
        gamma = np.delete(np.arange(p), coord)
        unit = np.zeros(p)
        unit[coord] = 1.0
        h_nu = H.dot(unit)
        padded = np.insert(np.asarray(w, dtype=float), coord, 0.0)
        return float(h_nu[coord]), float(h_nu[gamma] @ w), float(padded @ H.dot(padded))

    def hazard_increments(self, beta, edges=None) -> tuple[np.ndarray, np.ndarray]:
        times, increments = local_breslow_increments(self.data, beta)
        if edges is None:
            return times, increments
        return np.asarray(edges, dtype=float), binned_increments(times, increments, edges)

    def local_lasso(self, lam: float, init=None) -> np.ndarray:
        beta, diagnostics = fit_l1_cox(self.data, lam, init=init, opts=self.opts)
        logger.debug(f"Center {self.index} local lasso: {diagnostics.to_json()}")
        return beta

    def local_debiased(self, lam: float, lam_node: float, coords=None) -> LocalDebiased:
        """Local lasso plus a nodewise one-step correction on the requested coordinates."""
        p = self.data.p
        coords = np.arange(p) if coords is None else np.atleast_1d(np.asarray(coords, dtype=int))
        beta = self.local_lasso(lam)
        H = self.local_hessian(beta)
        targets = np.eye(p)[:, coords]
        directions = fit_l1_quadratic(H, targets, lam_node, self.opts)
        debiased = beta[coords] - directions.T @ gradient(self.data, beta)
        variances = np.einsum("ij,ij->j", directions, H.dot(directions))
        return LocalDebiased(beta, debiased, variances, coords)
