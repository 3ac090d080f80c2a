"""Bundles of (clock, target, scope, restart hook) that campaigns run against."""

from __future__ import annotations

from typing import Optional

from .clock import MS, SECOND, SystemClock, VirtualClock
from .mockdevice.protocol import DeviceConfig, DeviceCore
from .transport import TcpScope, TcpTarget, VirtualScope, VirtualTarget, parse_endpoint

MOCK_TARGET = "mock"
MOCK_START = 1_700_000_000 * SECOND


class MockHarness:
    """An in-process mock device on a virtual clock. Fully deterministic."""

    can_restart = True

    def __init__(self, config: Optional[DeviceConfig] = None, start: int = MOCK_START, latency: int = MS):
        self.config = config or DeviceConfig()
        self.clock = VirtualClock(start)
        self.core = DeviceCore(self.config, start)
        self.target = VirtualTarget(self.core, self.clock, latency)
        self.scope = VirtualScope(self.core, self.clock)

    def restart(self) -> None:
        self.core.restart(self.clock.now())

    def close(self) -> None:
        pass


class TcpHarness:
    """A live target over TCP, optionally with an edge-stream monitor. No restart hook."""

    can_restart = False

    def __init__(self, endpoint: str, monitor: Optional[str] = None, default_port: int = 1962):
        self.clock = SystemClock()
        host, port = parse_endpoint(endpoint, default_port)
        self.target = TcpTarget(host, port, self.clock)
        self.scope = None
        if monitor:
            mhost, mport = parse_endpoint(monitor)
            self.scope = TcpScope(mhost, mport)

    def restart(self) -> None:
        raise NotImplementedError("live targets need an external reset")

    def close(self) -> None:
        if self.scope is not None:
            self.scope.close()
