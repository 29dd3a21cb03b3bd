import numpy as np

from fedcox.federation.protocol import Message, MessageType
from fedcox.federation.router import Router

router = Router()


@router.handles(MessageType.HAZARD_REQUEST)
def breslow_increments(center, request: Message) -> Message:
    """Reply with (event times, increments, [study end]), or per-bin sums when edges are sent."""
    beta, *rest = request.arrays
    edges = rest[0] if rest and rest[0].size else None
    times, increments = center.hazard_increments(beta, edges)
    study_end = np.array([center.data.study_end])
    return Message(MessageType.HAZARD_REPLY, request.round, (times, increments, study_end))
