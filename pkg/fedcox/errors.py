from typing import Optional

import numpy as np


class FedCoxError(Exception):
    """Base class for every error raised by fedcox."""


class InvalidArgumentError(FedCoxError, ValueError):
    pass


class CapacityError(InvalidArgumentError):
    pass


class SolverError(FedCoxError):
    pass


class ConvergenceError(SolverError):
    def __init__(
        self,
        message: str,
        beta: Optional[np.ndarray] = None,
        kkt_residual: float = float("nan"),
    ):
        super().__init__(message)
        self.beta = beta
        self.kkt_residual = kkt_residual


class UnboundedProblemError(SolverError):
    pass


class DegenerateVarianceError(FedCoxError):
    def __init__(self, message: str, value: float = float("nan")):
        super().__init__(message)
        self.value = value


class TransportError(FedCoxError):
    pass


class RoundFailure(TransportError):
    def __init__(self, message: str, center: Optional[int] = None):
        super().__init__(message)
        self.center = center


class ProtocolError(TransportError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class UnknownMessageTypeError(ProtocolError):
    pass


class VersionMismatchError(ProtocolError):
    pass


class PrivacyViolationError(TransportError):
    pass


class NoEventsWarning(UserWarning):
    """Raised through `warnings` when a dataset has no observed events."""


EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3
EXIT_TRANSPORT = 4


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, TransportError):
        return EXIT_TRANSPORT
    if isinstance(error, (SolverError, DegenerateVarianceError)):
        return EXIT_SOLVER
    return EXIT_INVALID
