"""Threaded TCP front end for :class:`DeviceCore`.

One protocol connection is served at a time; further connects wait in the
listen backlog. While the device is rebooting or crashed the protocol listener
is closed so connects are refused. Scope clients receive the edge stream.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from typing import Optional

from ..clock import SystemClock
from ..monitor import format_edge
from .protocol import DeviceConfig, DeviceCore

log = logging.getLogger(__name__)

TICK = 0.005


class MockDeviceServer:
    def __init__(self, config: DeviceConfig, clock=None):
        self.config = config
        self.clock = clock or SystemClock()
        self.core = DeviceCore(config, self.clock.now())
        self.lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._listener: Optional[socket.socket] = None
        self._scope_listener: Optional[socket.socket] = None
        self._scope_clients: list[socket.socket] = []
        self.port = config.listen_port
        self.scope_port = config.scope_port

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "MockDeviceServer":
        """Bind both ports (raises OSError on conflicts) and start serving."""
        self._scope_listener = self._bind(self.config.scope_port)
        self.scope_port = self._scope_listener.getsockname()[1]
        try:
            self._listener = self._bind(self.config.listen_port)
        except OSError:
            self._scope_listener.close()
            raise
        self.port = self._listener.getsockname()[1]
        for target in (self._serve_protocol, self._serve_scope, self._emit_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        log.info("mock device on %s:%d, scope on %d", self.config.host, self.port, self.scope_port)
        return self

    def _bind(self, port: int) -> socket.socket:
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind((self.config.host, port))
        except OSError:
            s.close()
            raise
        s.listen(8)
        s.settimeout(TICK * 4)
        return s

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2)
        self._flush_edges()
        for s in [self._listener, self._scope_listener, *self._scope_clients]:
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass

    def restart(self) -> None:
        with self.lock:
            self.core.restart(self.clock.now())

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- protocol port ------------------------------------------------------

    def _listener_wanted(self) -> bool:
        with self.lock:
            self.core.advance(self.clock.now())
            return self.core.running

    def _serve_protocol(self) -> None:
        while not self._stop.is_set():
            if not self._listener_wanted():
                if self._listener is not None:
                    self._listener.close()
                    self._listener = None
                self._stop.wait(TICK)
                continue
            if self._listener is None:
                try:
                    self._listener = self._bind(self.port)
                except OSError:
                    self._stop.wait(TICK)
                    continue
            try:
                conn, _ = self._listener.accept()
            except (socket.timeout, OSError):
                continue
            with self.lock:
                accepted = self.core.accept(self.clock.now())
            if not accepted:
                conn.close()
                continue
            self._handle(conn)

    def _handle(self, conn: socket.socket) -> None:
        conn.settimeout(TICK)
        with self.lock:
            my_id = self.core.connection_id
        try:
            while not self._stop.is_set():
                try:
                    data = conn.recv(65536)
                except socket.timeout:
                    data = None
                with self.lock:
                    now = self.clock.now()
                    if data == b"":
                        self.core.disconnect(now)
                        return
                    if data:
                        self.core.receive(now, data)
                    else:
                        self.core.advance(now)
                    out, self.core.outbox = self.core.outbox, []
                    mine = self.core.connection_id == my_id
                    reason = self.core.close_reason if mine and not self.core.connected else None
                if out:
                    conn.sendall(b"".join(out))
                if reason == "reset":
                    conn.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
                    return
                if reason == "closed":
                    return
        except OSError:
            with self.lock:
                self.core.disconnect(self.clock.now())
        finally:
            conn.close()

    # -- scope port ---------------------------------------------------------

    def _serve_scope(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._scope_listener.accept()
            except (socket.timeout, OSError):
                continue
            with self.lock:
                self._scope_clients.append(conn)

    def _flush_edges(self) -> None:
        with self.lock:
            self.core.advance(self.clock.now())
            edges = self.core.drain_edges()
            clients = list(self._scope_clients)
        if not edges:
            return
        payload = "".join(format_edge(e) for e in edges).encode("ascii")
        for c in clients:
            try:
                c.sendall(payload)
            except OSError:
                with self.lock:
                    if c in self._scope_clients:
                        self._scope_clients.remove(c)

    def _emit_loop(self) -> None:
        while not self._stop.is_set():
            self._flush_edges()
            self._stop.wait(TICK)
