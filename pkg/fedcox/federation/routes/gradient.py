import logging

import numpy as np

from fedcox.federation.protocol import Message, MessageType
from fedcox.federation.router import Router

router = Router()
logger = logging.getLogger(__name__)


@router.handles(MessageType.GRAD_REQUEST)
def local_gradients(center, request: Message) -> Message:
    (betas,) = request.arrays
    grads = np.vstack([center.local_gradient(beta) for beta in np.atleast_2d(betas)])
    logger.debug(f"Center {center.index} answered {grads.shape[0]} gradient(s) for round {request.round}")
    return Message(MessageType.GRAD_REPLY, request.round, (grads,))
