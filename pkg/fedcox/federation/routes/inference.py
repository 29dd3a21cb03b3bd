import numpy as np

from fedcox.errors import InvalidArgumentError
from fedcox.federation.protocol import Message, MessageType, SolveKind
from fedcox.federation.router import Router

router = Router()


@router.handles(MessageType.OMEGA_REQUEST)
def solve_or_evaluate(center, request: Message) -> Message:
    """Omega requests carry [kind, lambda, coord], beta_hat, then kind-specific vectors."""
    params, beta_hat, *vectors = request.arrays
    kind = SolveKind(int(params[0]))
    lam = float(params[1])
    coord = int(params[2])

    if kind == SolveKind.OMEGA:
        (c,) = vectors
        omega = center.solve_omega(beta_hat, c, lam)
        return Message(MessageType.OMEGA_REPLY, request.round, (omega,))

    if kind == SolveKind.W:
        w = center.solve_w(beta_hat, lam, coord)
        return Message(MessageType.OMEGA_REPLY, request.round, (w,))

    if kind == SolveKind.LINEAR_QUADFORM:
        omega, c = vectors
        scalars = center.linear_quadform(beta_hat, omega, c)
        return Message(MessageType.SCALAR_REPLY, request.round, (np.asarray(scalars),))

    if kind == SolveKind.NU_QUADFORM:
        (w,) = vectors
        scalars = center.nu_quadform(beta_hat, w, coord)
        return Message(MessageType.SCALAR_REPLY, request.round, (np.asarray(scalars),))

    if kind == SolveKind.COLUMN_SUMS:
        sums, count = center.column_sums()
        return Message(MessageType.SCALAR_REPLY, request.round, (np.append(sums, float(count)),))

    if kind == SolveKind.CENTER:
        (mean,) = vectors
        center.center_on(mean)
        return Message(MessageType.SCALAR_REPLY, request.round, ())

    raise InvalidArgumentError(f"unsupported omega request kind {kind}")
