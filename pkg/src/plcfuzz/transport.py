"""Connections to a target: real TCP, or an in-process mock core on a virtual clock."""

from __future__ import annotations

import queue
import socket
import threading
from typing import Optional

from .clock import MS, SystemClock, VirtualClock
from .monitor import Edge, EdgeSeries, ingest_edges


class ConnectFailed(ConnectionError):
    pass


class PeerClosed(ConnectionError):
    pass


def parse_endpoint(text: str, default_port: Optional[int] = None) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        if default_port is None:
            raise ValueError(f"endpoint {text!r} needs a port")
        return text, default_port
    if not port.isdigit():
        raise ValueError(f"bad port in endpoint {text!r}")
    return host or "127.0.0.1", int(port)


class TcpConnection:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except (BrokenPipeError, ConnectionResetError) as exc:
            raise ConnectionResetError(str(exc)) from None

    def recv(self, timeout: int) -> Optional[bytes]:
        """Next chunk, or None on timeout. Raises PeerClosed / ConnectionResetError."""
        self.sock.settimeout(max(timeout, 1) / 1e9)
        try:
            data = self.sock.recv(65536)
        except socket.timeout:
            return None
        if not data:
            raise PeerClosed("peer closed the connection")
        return data

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class TcpTarget:
    def __init__(self, host: str, port: int, clock=None):
        self.host, self.port = host, port
        self.clock = clock or SystemClock()

    def __str__(self):
        return f"{self.host}:{self.port}"

    def connect(self, timeout: int) -> TcpConnection:
        try:
            sock = socket.create_connection((self.host, self.port), timeout=timeout / 1e9)
        except OSError as exc:
            raise ConnectFailed(f"{self}: {exc}") from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return TcpConnection(sock)


class VirtualConnection:
    """A connection to a DeviceCore; time advances only through this object and its clock."""

    def __init__(self, target: "VirtualTarget", conn_id: int):
        self.target = target
        self.core = target.core
        self.clock = target.clock
        self.conn_id = conn_id
        self.closed = False

    def _alive(self) -> bool:
        return self.core.connected and self.core.connection_id == self.conn_id

    def send(self, data: bytes) -> None:
        if self.closed:
            raise PeerClosed("connection already closed")
        self.clock.sleep(self.target.latency)
        if self._alive():
            self.core.receive(self.clock.now(), data)

    def recv(self, timeout: int) -> Optional[bytes]:
        deadline = self.clock.now() + timeout
        while True:
            mine = self.core.connection_id == self.conn_id
            if mine and self.core.outbox:
                out, self.core.outbox = self.core.outbox, []
                return b"".join(out)
            if not self._alive():
                if mine and self.core.close_reason == "reset":
                    raise ConnectionResetError("device reset the connection")
                raise PeerClosed("device closed the connection")
            nxt = self.core.next_deadline()
            if nxt is not None and nxt <= deadline:
                self.clock.advance_to(nxt)
                self.core.advance(self.clock.now())
                continue
            self.clock.advance_to(deadline)
            self.core.advance(self.clock.now())
            if self.core.outbox or not self._alive():
                continue
            return None

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            if self._alive():
                self.core.disconnect(self.clock.now())


class VirtualTarget:
    def __init__(self, core, clock: VirtualClock, latency: int = MS):
        self.core = core
        self.clock = clock
        self.latency = latency

    def __str__(self):
        return "mock"

    def connect(self, timeout: int) -> VirtualConnection:
        self.clock.sleep(self.latency)
        if not self.core.accept(self.clock.now()):
            raise ConnectFailed("mock device refused the connection")
        self.clock.sleep(self.latency)
        return VirtualConnection(self, self.core.connection_id)


class VirtualScope:
    """Edges straight from the in-process core, up to the current virtual time."""

    def __init__(self, core, clock: VirtualClock):
        self.core = core
        self.clock = clock

    def poll(self) -> list[Edge]:
        self.core.advance(self.clock.now())
        return self.core.drain_edges()

    def close(self) -> None:
        pass


class TcpScope:
    """Reads the edge stream from a scope port on a background thread."""

    def __init__(self, host: str, port: int, connect_timeout: float = 2.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise ConnectFailed(f"monitor {host}:{port}: {exc}") from None
        self.sock.settimeout(0.05)
        self.events: "queue.Queue[Edge]" = queue.Queue()
        self.series = EdgeSeries()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        pending = b""
        while not self._stop.is_set():
            try:
                data = self.sock.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                return
            if not data:
                return
            pending += data
            *lines, pending = pending.split(b"\n")
            before = len(self.series)
            ingest_edges([ln.decode("ascii", "replace") + "\n" for ln in lines], self.series)
            for e in self.series.edges[before:]:
                self.events.put(e)

    def poll(self) -> list[Edge]:
        out = []
        while True:
            try:
                out.append(self.events.get_nowait())
            except queue.Empty:
                return out

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=1)
        self.sock.close()
