"""Duplex FedMessage channels: in-process queues and TCP sockets.

Both transports move encoded FDLP frames, so the in-process path exercises
the same codec as the network path.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time

from .errors import ProtocolError, RoundTimeout, TransportError
from .federation import DEFAULT_MAX_FRAME, FedMessage, decode, encode, read_frame

log = logging.getLogger(__name__)

_CLOSED = object()


class Connection:
    """One end of a reliable, ordered message channel."""

    def send(self, msg: FedMessage) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> FedMessage:
        """Block for the next message; raises ``TimeoutError`` or ``TransportError``."""
        raise NotImplementedError

    def close(self) -> None:
        pass


# --- in-process --------------------------------------------------------------


class InProcConnection(Connection):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, max_frame=DEFAULT_MAX_FRAME):
        self._in, self._out = inbox, outbox
        self.max_frame = max_frame
        self._closed = False

    def send(self, msg):
        if self._closed:
            raise TransportError("send on a closed in-process connection")
        self._out.put(encode(msg))

    def recv(self, timeout=None):
        try:
            item = self._in.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no message within {timeout} s") from None
        if item is _CLOSED:
            self._in.put(_CLOSED)
            raise TransportError("peer closed the in-process connection")
        return decode(item, self.max_frame)

    def close(self):
        if not self._closed:
            self._closed = True
            self._out.put(_CLOSED)


def inproc_pair():
    a, b = queue.Queue(), queue.Queue()
    return InProcConnection(a, b), InProcConnection(b, a)


class InProcListener:
    def __init__(self):
        self._pending = queue.Queue()

    def connect(self) -> Connection:
        server_end, client_end = inproc_pair()
        self._pending.put(server_end)
        return client_end

    def accept(self, timeout=None) -> Connection:
        try:
            return self._pending.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no client connected in time") from None

    def close(self):
        pass


# --- TCP -----------------------------------------------------------------------


class TcpConnection(Connection):
    def __init__(self, sock: socket.socket, max_frame=DEFAULT_MAX_FRAME):
        self.sock = sock
        self.max_frame = max_frame
        self._send_lock = threading.Lock()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _read_exact(self, n):
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                raise
            except OSError as e:
                raise TransportError(f"receive failed: {e}") from e
            if not chunk:
                raise TransportError("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def send(self, msg):
        data = encode(msg)
        with self._send_lock:
            try:
                self.sock.sendall(data)
            except OSError as e:
                raise TransportError(f"send failed: {e}") from e

    def recv(self, timeout=None):
        self.sock.settimeout(timeout)
        try:
            frame = read_frame(self._read_exact, self.max_frame)
        except socket.timeout:
            raise TimeoutError(f"no message within {timeout} s") from None
        return decode(frame, self.max_frame)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpListener:
    def __init__(self, host="127.0.0.1", port=0, max_frame=DEFAULT_MAX_FRAME):
        self.sock = socket.create_server((host, port))
        self.max_frame = max_frame

    @property
    def address(self):
        return self.sock.getsockname()[:2]

    def accept(self, timeout=None) -> Connection:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise TimeoutError("no client connected in time") from None
        conn.settimeout(None)
        return TcpConnection(conn, self.max_frame)

    def close(self):
        self.sock.close()


def tcp_connect(host, port, retries=3, backoff=0.2, max_frame=DEFAULT_MAX_FRAME) -> Connection:
    """Connect with ``retries`` attempts and exponential backoff between them."""
    delay = backoff
    for attempt in range(1, retries + 1):
        try:
            return TcpConnection(socket.create_connection((host, port)), max_frame)
        except OSError as e:
            if attempt == retries:
                raise TransportError(
                    f"cannot connect to {host}:{port} after {retries} attempts: {e}") from e
            log.warning("connect to %s:%s failed (%s); retrying in %.1f s", host, port, e, delay)
            time.sleep(delay)
            delay *= 2


class Mailbox:
    """Funnels every connection's incoming messages into one queue.

    Each connection gets a daemon reader thread; the server waits on the
    shared queue, which is the single synchronization point for a round.
    """

    def __init__(self):
        self.q = queue.Queue()

    def attach(self, key, conn: Connection):
        t = threading.Thread(target=self._pump, args=(key, conn), daemon=True)
        t.start()

    def _pump(self, key, conn):
        while True:
            try:
                msg = conn.recv()
            except (TransportError, ProtocolError, OSError) as e:
                self.q.put((key, e))
                return
            self.q.put((key, msg))

    def get(self, deadline, round_no, waiting_for):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise RoundTimeout(round_no, waiting_for)
        try:
            return self.q.get(timeout=remaining)
        except queue.Empty:
            raise RoundTimeout(round_no, waiting_for) from None
