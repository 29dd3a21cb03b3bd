from typing import Callable

from fedcox.errors import UnknownMessageTypeError
from fedcox.federation.protocol import Message, MessageType

Handler = Callable[..., Message]


class Router:
    """Maps request types to center-side handlers."""

    def __init__(self):
        self.routes: dict[MessageType, Handler] = {}

    def handles(self, kind: MessageType):
        def decorator(handler: Handler) -> Handler:
            self.add_route(kind, handler)
            return handler

        return decorator

    def add_route(self, kind: MessageType, handler: Handler):
        if kind in self.routes:
            raise ValueError(f"handler for {kind.name} already registered")
        self.routes[kind] = handler

    def include_router(self, other: "Router"):
        for kind, handler in other.routes.items():
            self.add_route(kind, handler)

    def dispatch(self, center, msg: Message) -> Message:
        handler = self.routes.get(msg.kind)
        if handler is None:
            raise UnknownMessageTypeError(f"no handler for {msg.kind.name}")
        return handler(center, msg)
