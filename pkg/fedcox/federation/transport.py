import logging
import socket
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence, Union

from fedcox.errors import InvalidArgumentError, RoundFailure, TransportError
from fedcox.federation.protocol import (
    Message,
    MessageType,
    check_aggregate_only,
    decode_json_line,
    encode_json_line,
    read_frame,
    write_frame,
)
from fedcox.settings import round_timeout

logger = logging.getLogger(__name__)

TransportKind = Literal["inproc", "stream", "jsonl"]


@dataclass
class CommLedger:
    """Running tally of traffic per direction. Broadcasts are counted once."""

    up_messages: int = 0
    up_floats: int = 0
    up_bytes: int = 0
    down_messages: int = 0
    down_floats: int = 0
    down_bytes: int = 0
    by_type: Counter = field(default_factory=Counter)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, direction: Literal["up", "down"], msg: Message):
        with self._lock:
            if direction == "up":
                self.up_messages += 1
                self.up_floats += msg.n_floats
                self.up_bytes += msg.size
            else:
                self.down_messages += 1
                self.down_floats += msg.n_floats
                self.down_bytes += msg.size
            self.by_type[msg.kind.name.lower()] += 1

    @property
    def total_floats(self) -> int:
        with self._lock:
            return self.up_floats + self.down_floats

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "up_messages": self.up_messages,
                "up_floats": self.up_floats,
                "up_bytes": self.up_bytes,
                "down_messages": self.down_messages,
                "down_floats": self.down_floats,
                "down_bytes": self.down_bytes,
                "by_type": dict(sorted(self.by_type.items())),
            }


class Transport:
    """Synchronous request/reply rounds between the coordinator and K centers."""

    kind: TransportKind = "inproc"

    def __init__(self, centers: Sequence, ledger: CommLedger, timeout: Optional[float] = None):
        self.centers = list(centers)
        self.ledger = ledger
        self.timeout = round_timeout() if timeout is None else timeout

    def exchange(self, request: Union[Message, Sequence[Message]]) -> list[Message]:
        """Send one broadcast request (or one request per center) and collect K replies in center order."""
        if isinstance(request, Message):
            requests = [request] * len(self.centers)
            self.ledger.record("down", request)
        else:
            requests = list(request)
            if len(requests) != len(self.centers):
                raise InvalidArgumentError(
                    f"{len(requests)} requests for {len(self.centers)} centers"
                )
            for r in requests:
                self.ledger.record("down", r)

        start = time.time()
        replies = self._deliver(requests)
        for reply in replies:
            self.ledger.record("up", reply)
        for k, (request, reply) in enumerate(zip(requests, replies)):
            if reply.kind == MessageType.ERROR:
                raise RoundFailure(f"center {k} failed: {reply.text}", center=k)
            if reply.round != request.round:
                raise RoundFailure(
                    f"center {k} answered round {reply.round} to a round {request.round} request", center=k
                )
            check_aggregate_only(reply)
        logger.debug(
            f"{requests[0].kind.name} round {requests[0].round} took {time.time() - start:.3f}s"
        )
        return replies

    def _deliver(self, requests: list[Message]) -> list[Message]:
        raise NotImplementedError

    def close(self):
        pass


class InProcessTransport(Transport):
    kind = "inproc"

    def __init__(self, centers, ledger, timeout=None):
        super().__init__(centers, ledger, timeout)
        self._pool = ThreadPoolExecutor(max_workers=max(1, len(self.centers)))

    def _roundtrip(self, center, request: Message) -> Message:
        return center.handle(request)

    def _deliver(self, requests):
        futures = [
            self._pool.submit(self._roundtrip, center, request)
            for center, request in zip(self.centers, requests)
        ]
        deadline = time.time() + self.timeout
        replies = []
        for k, future in enumerate(futures):
            try:
                replies.append(future.result(timeout=max(0.0, deadline - time.time())))
            except FutureTimeout:
                raise RoundFailure(
                    f"center {k} did not answer within {self.timeout:.0f}s", center=k
                ) from None
            except Exception as e:
                raise RoundFailure(f"center {k} failed: {e}", center=k) from e
        return replies

    def close(self):
        self._pool.shutdown(wait=True)


class JsonLinesTransport(InProcessTransport):
    """In-process transport that pushes every frame through the JSON-lines debug codec."""

    kind = "jsonl"

    def __init__(self, centers, ledger, timeout=None, log_path: Optional[str] = None):
        super().__init__(centers, ledger, timeout)
        self._log = open(log_path, "a") if log_path else None
        self._log_lock = threading.Lock()

    def _write(self, line: str):
        if self._log is not None:
            with self._log_lock:
                self._log.write(line)

    def _roundtrip(self, center, request):
        line = encode_json_line(request)
        self._write(line)
        reply_line = encode_json_line(center.handle(decode_json_line(line)))
        self._write(reply_line)
        return decode_json_line(reply_line)

    def close(self):
        super().close()
        if self._log is not None:
            self._log.close()


class StreamTransport(Transport):
    """Length-prefixed binary frames over one socket pair per center.

    Each center serves its end of the pair from its own thread, so the centers
    compute concurrently while the coordinator reads replies in order. A center
    whose read fails is reconnected on a fresh pair, and replies left over from
    an abandoned round are dropped by round number.
    """

    kind = "stream"

    def __init__(self, centers, ledger, timeout=None):
        super().__init__(centers, ledger, timeout)
        self._sockets = []
        self._threads = []
        for center in self.centers:
            sock, thread = self._connect(center)
            self._sockets.append(sock)
            self._threads.append(thread)

    def _connect(self, center) -> tuple[socket.socket, threading.Thread]:
        coordinator_end, center_end = socket.socketpair()
        coordinator_end.settimeout(self.timeout)
        thread = threading.Thread(target=center.serve, args=(center_end,), daemon=True)
        thread.start()
        return coordinator_end, thread

    def _reconnect(self, k: int):
        # a read cut off mid-frame leaves the stream unaligned
        _close_socket(self._sockets[k])
        self._sockets[k], self._threads[k] = self._connect(self.centers[k])
        logger.warning(f"Reconnected center {k} on a fresh socket pair")

    def _read_reply(self, k: int, sock: socket.socket, expected_round: int) -> Message:
        while True:
            reply = read_frame(sock)
            if 0 < reply.round < expected_round:
                logger.warning(
                    f"Dropping stale {reply.kind.name} from center {k} "
                    f"(round {reply.round}, expected {expected_round})"
                )
                self.ledger.record("up", reply)
                continue
            return reply

    def _deliver(self, requests):
        for k, (sock, request) in enumerate(zip(self._sockets, requests)):
            try:
                write_frame(sock, request)
            except OSError as e:
                self._reconnect(k)
                raise RoundFailure(f"could not send to center {k}: {e}", center=k) from e

        replies = []
        for k, (sock, request) in enumerate(zip(self._sockets, requests)):
            try:
                replies.append(self._read_reply(k, sock, request.round))
            except socket.timeout:
                self._reconnect(k)
                raise RoundFailure(
                    f"center {k} did not answer within {self.timeout:.1f}s", center=k
                ) from None
            except TransportError as e:
                self._reconnect(k)
                raise RoundFailure(f"center {k} sent a bad frame: {e}", center=k) from e
            except (ConnectionError, OSError) as e:
                self._reconnect(k)
                raise RoundFailure(f"center {k} connection failed: {e}", center=k) from e
        return replies

    def close(self):
        for sock in self._sockets:
            _close_socket(sock)
        for thread in self._threads:
            thread.join(timeout=1.0)


def _close_socket(sock: socket.socket):
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    sock.close()


def make_transport(
    kind: TransportKind, centers, ledger: CommLedger, timeout: Optional[float] = None
) -> Transport:
    if kind == "inproc":
        return InProcessTransport(centers, ledger, timeout)
    if kind == "stream":
        return StreamTransport(centers, ledger, timeout)
    if kind == "jsonl":
        return JsonLinesTransport(centers, ledger, timeout)
    raise InvalidArgumentError(f"unknown transport: {kind}")
