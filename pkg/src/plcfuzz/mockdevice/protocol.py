"""Mock PLC protocol core.

The core does no I/O and reads no clock: every call carries the current time in
ns. Transports (the TCP server, or the in-process target used by deterministic
tests) feed it bytes and drain ``outbox`` and ``drain_edges()``.

Frame layout (client requests): byte 0 = 0x01, byte 1 = command class, bytes
2-3 = big-endian total length. Class 0x05 commands are 22 bytes: subcode at
4-5, session token at 11, variable address at 12-13, value at 14-15.
Replies start with 0x81, repeat the class and subcode, carry 0x0001 at 6-7
and a status word at 8-9 (0 = ok).
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Optional

from ..clock import MS
from ..monitor import Edge, Level

INIT_REQUEST = bytes.fromhex("0101001a000000806415000300 0c49424554483031 4e305f4d00".replace(" ", ""))
INIT_RESPONSE = bytes.fromhex("81010014000000010000000000020000 00480000".replace(" ", ""))
ACK_REQUEST = bytes.fromhex("0105001600010000e8e90048 0000001c00040295 0000".replace(" ", ""))
RESET_REQUEST = bytes.fromhex("0105001600100000e8c80048 0000000000040aba 0000".replace(" ", ""))

IDENT = b"IBETH01N0_M"
RESPONSE_TOKEN_OFFSET = 17
REQUEST_TOKEN_OFFSET = 11
COMMAND_LENGTH = 22
INIT_LENGTH = 26

CLASS_INIT = 0x01
CLASS_COMMAND = 0x05

SUB_STATUS = 0x0001
SUB_RESET = 0x0010
SUB_READ = 0x0020
SUB_WRITE = 0x0021

STATUS_OK = 0
STATUS_BAD_TOKEN = 1
STATUS_BAD_LENGTH = 2
STATUS_UNKNOWN_COMMAND = 3
STATUS_BAD_STATE = 4
STATUS_MALFORMED = 5

LOAD_ADDRESS = 0xFFFF
SLOW_HALF_CYCLES = 10  # 5 full cycles
V2_EXCESS_LIMIT = 16


class Vulnerability(enum.Enum):
    V1_REPLAY_ACCEPTED = "V1"
    V2_LENGTH_CRASH = "V2"
    V3_UNAUTH_RESET = "V3"
    V4_LOAD_DELAY = "V4"

    @classmethod
    def parse(cls, name: str) -> "Vulnerability":
        key = name.strip().upper().split("_", 1)[0]
        for v in cls:
            if v.value == key:
                return v
        raise ValueError(f"unknown vulnerability {name!r} (use V1..V4)")


ALL_VULNERABILITIES = frozenset(Vulnerability)


def parse_vulnerabilities(spec) -> frozenset:
    if spec is None:
        return frozenset()
    if isinstance(spec, str):
        if spec.strip().lower() in ("", "none"):
            return frozenset()
        if spec.strip().lower() == "all":
            return ALL_VULNERABILITIES
        spec = spec.split(",")
    return frozenset(v if isinstance(v, Vulnerability) else Vulnerability.parse(v) for v in spec)


@dataclass(frozen=True)
class DeviceConfig:
    host: str = field(default="127.0.0.1", metadata={"help": "address the device listens on"})
    listen_port: int = field(default=1962, metadata={"help": "TCP port of the command protocol"})
    scope_port: int = field(default=1963, metadata={"help": "TCP port streaming output edges"})
    token: int = field(default=0x48, metadata={"help": "session token byte issued in the init response"})
    cycle_period: int = field(default=100 * MS, metadata={"help": "output square-wave period in ns"})
    reboot_duration: int = field(default=400 * MS, metadata={"help": "output silence after a reset, ns"})
    frame_timeout: int = field(default=200 * MS, metadata={"help": "ns to wait for the rest of a partial frame"})
    vulnerabilities: frozenset = field(default=frozenset(),
                                       metadata={"help": "seeded flaws: list of V1..V4, 'all' or 'none'"})
    token_seed: int = field(default=0, metadata={"help": "RNG seed for per-session tokens when V1 is off"})

    def __post_init__(self):
        object.__setattr__(self, "vulnerabilities", parse_vulnerabilities(self.vulnerabilities))
        if self.cycle_period <= 0:
            raise ValueError("cycle_period must be positive")
        if self.reboot_duration < 2 * self.cycle_period:
            raise ValueError("reboot_duration must be at least two cycle periods")
        if not 0 <= self.token <= 0xFF:
            raise ValueError("token must be a single byte")
        if self.frame_timeout <= 0:
            raise ValueError("frame_timeout must be positive")

    def has(self, v: Vulnerability) -> bool:
        return v in self.vulnerabilities


class Phase(enum.Enum):
    AWAIT_INIT = "AwaitInit"
    AWAIT_ACK = "AwaitAck"
    READY = "Ready"
    REBOOTING = "Rebooting"
    CRASHED = "Crashed"


@dataclass(frozen=True)
class DeviceState:
    phase: Phase
    variables: dict
    output_level: Level


def reply(cls: int, subcode: int, status: int = STATUS_OK, body: bytes = b"\x00\x00") -> bytes:
    length = 10 + len(body)
    return (bytes([0x81, cls & 0xFF]) + length.to_bytes(2, "big") + (subcode & 0xFFFF).to_bytes(2, "big")
            + b"\x00\x01" + status.to_bytes(2, "big") + body)


STATUS_BODY = bytes.fromhex("000200000000")


def init_response(token: int) -> bytes:
    out = bytearray(INIT_RESPONSE)
    out[RESPONSE_TOKEN_OFFSET] = token
    return bytes(out)


def command(subcode: int, token: int, address: int = 0, value: int = 0, base: bytes = ACK_REQUEST) -> bytes:
    """A 22-byte class 0x05 request built on one of the captured layouts."""
    out = bytearray(base)
    out[4:6] = subcode.to_bytes(2, "big")
    out[REQUEST_TOKEN_OFFSET] = token
    if subcode in (SUB_READ, SUB_WRITE):
        out[12:14] = address.to_bytes(2, "big")
        out[14:16] = value.to_bytes(2, "big")
    return bytes(out)


class DeviceCore:
    def __init__(self, config: DeviceConfig, start_time: int = 0):
        self.config = config
        self.phase = Phase.AWAIT_INIT
        self.variables: dict[int, int] = {}
        self.level = Level.LOW
        self.half = config.cycle_period // 2
        self._next_edge = start_time + self.half
        self._slow = 0
        self._reboot_end: Optional[int] = None
        self._edges: list[Edge] = []
        self._buffer = bytearray()
        self._buffer_since: Optional[int] = None
        self._token_rng = random.Random(config.token_seed)
        self.connected = False
        self.connection_id = 0
        self.session_token = config.token
        self.outbox: list[bytes] = []
        self.close_reason: Optional[str] = None  # "closed" or "reset" once the device hangs up
        self.crashes = 0
        self.reboots = 0
        self.now = start_time

    # -- time ---------------------------------------------------------------

    @property
    def running(self) -> bool:
        return self.phase not in (Phase.REBOOTING, Phase.CRASHED)

    def next_deadline(self) -> Optional[int]:
        times = []
        if self._buffer and self._buffer_since is not None and self.connected:
            times.append(self._buffer_since + self.config.frame_timeout)
        if self.phase is Phase.REBOOTING and self._reboot_end is not None:
            times.append(self._reboot_end)
        return min(times) if times else None

    def advance(self, now: int) -> None:
        """Run everything scheduled up to and including ``now``."""
        while True:
            deadline = self.next_deadline()
            if deadline is None or deadline > now:
                break
            self._emit_until(deadline)
            if self.phase is Phase.REBOOTING and self._reboot_end == deadline:
                self._finish_reboot(deadline)
            else:
                self._frame_timeout(deadline)
        self._emit_until(now)
        self.now = max(self.now, now)

    def _emit_until(self, t: int) -> None:
        if not self.running:
            return
        while self._next_edge <= t:
            self.level = self.level.toggled()
            self._edges.append(Edge(self._next_edge, self.level))
            step = self.half
            if self._slow:
                step += self.half // 2
                self._slow -= 1
            self._next_edge += step

    def drain_edges(self) -> list[Edge]:
        out, self._edges = self._edges, []
        return out

    def _finish_reboot(self, t: int) -> None:
        self.phase = Phase.AWAIT_INIT
        self._reboot_end = None
        self._next_edge = t + self.half
        self._slow = 0

    @property
    def state(self) -> DeviceState:
        return DeviceState(self.phase, dict(self.variables), self.level)

    # -- connections --------------------------------------------------------

    def accept(self, now: int) -> bool:
        self.advance(now)
        if not self.running or self.connected:
            return False
        self.connected = True
        self.connection_id += 1
        self.close_reason = None
        self.outbox = []
        self._buffer.clear()
        self._buffer_since = None
        self.phase = Phase.AWAIT_INIT
        if self.config.has(Vulnerability.V1_REPLAY_ACCEPTED):
            self.session_token = self.config.token
        else:
            self.session_token = self._token_rng.randrange(256)
        return True

    def disconnect(self, now: int) -> None:
        self.advance(now)
        if not self.connected:
            return
        self.connected = False
        self._buffer.clear()
        self._buffer_since = None
        if self.running:
            self.phase = Phase.AWAIT_INIT

    def _hang_up(self, reason: str) -> None:
        self.connected = False
        self.close_reason = reason
        self._buffer.clear()
        self._buffer_since = None

    def restart(self, now: int) -> None:
        """Power-cycle: the only way out of Crashed."""
        self.advance(now)
        self._hang_up("reset")
        self.phase = Phase.AWAIT_INIT
        self.variables.clear()
        self._reboot_end = None
        self._next_edge = now + self.half
        self._slow = 0

    # -- protocol -----------------------------------------------------------

    def receive(self, now: int, data: bytes) -> None:
        self.advance(now)
        if not self.connected or not self.running:
            return
        if not self._buffer:
            self._buffer_since = now
        self._buffer.extend(data)
        while self.connected and len(self._buffer) >= 4:
            buf = self._buffer
            if buf[0] != 0x01:
                self._error(buf, STATUS_MALFORMED)
                self._buffer.clear()
                break
            declared = int.from_bytes(buf[2:4], "big")
            if declared < 6:
                self._error(buf, STATUS_MALFORMED)
                self._buffer.clear()
                break
            if len(buf) < declared:
                break
            frame = bytes(buf[:declared])
            del buf[:declared]
            self._handle(now, frame)
            self._buffer_since = now
        if not self._buffer:
            self._buffer_since = None

    def _frame_timeout(self, t: int) -> None:
        buf = self._buffer
        if len(buf) >= 4 and buf[0] == 0x01:
            excess = int.from_bytes(buf[2:4], "big") - len(buf)
            if self.config.has(Vulnerability.V2_LENGTH_CRASH) and excess > V2_EXCESS_LIMIT:
                self._crash()
                return
            self._error(buf, STATUS_BAD_LENGTH)
        else:
            self._error(buf, STATUS_MALFORMED)
        self._buffer.clear()
        self._buffer_since = None

    def _crash(self) -> None:
        self.phase = Phase.CRASHED
        self.crashes += 1
        self._hang_up("reset")

    def _error(self, frame, status: int) -> None:
        cls = frame[1] if len(frame) > 1 else 0
        sub = int.from_bytes(frame[4:6], "big") if len(frame) >= 6 else 0
        self.outbox.append(reply(cls, sub, status))

    @staticmethod
    def _is_reset(frame: bytes) -> bool:
        return (len(frame) == COMMAND_LENGTH and frame[1] == CLASS_COMMAND
                and int.from_bytes(frame[4:6], "big") == SUB_RESET)

    def _handle(self, now: int, frame: bytes) -> None:
        token_ok = len(frame) > REQUEST_TOKEN_OFFSET and frame[REQUEST_TOKEN_OFFSET] == self.session_token
        if self.config.has(Vulnerability.V3_UNAUTH_RESET) and self._is_reset(frame) and not token_ok:
            self._reset(now, frame)
            return
        if self.phase is Phase.AWAIT_INIT:
            if frame[1] == CLASS_INIT and len(frame) == INIT_LENGTH and IDENT in frame[4:]:
                self.outbox.append(init_response(self.session_token))
                self.phase = Phase.AWAIT_ACK
            else:
                self._error(frame, STATUS_BAD_STATE)
        elif self.phase is Phase.AWAIT_ACK:
            if (frame[1] == CLASS_COMMAND and len(frame) == COMMAND_LENGTH
                    and int.from_bytes(frame[4:6], "big") == SUB_STATUS):
                if token_ok:
                    self.phase = Phase.READY
                else:
                    self._error(frame, STATUS_BAD_TOKEN)
            else:
                self._error(frame, STATUS_BAD_STATE)
        elif self.phase is Phase.READY:
            self._dispatch(now, frame, token_ok)

    def _dispatch(self, now: int, frame: bytes, token_ok: bool) -> None:
        if frame[1] != CLASS_COMMAND or len(frame) != COMMAND_LENGTH:
            self._error(frame, STATUS_UNKNOWN_COMMAND)
            return
        if not token_ok:
            self._error(frame, STATUS_BAD_TOKEN)
            return
        sub = int.from_bytes(frame[4:6], "big")
        addr = int.from_bytes(frame[12:14], "big")
        if sub == SUB_STATUS:
            self.outbox.append(reply(CLASS_COMMAND, sub, body=STATUS_BODY))
        elif sub == SUB_RESET:
            self._reset(now, frame)
        elif sub == SUB_READ:
            value = self.variables.get(addr, 0)
            self.outbox.append(reply(CLASS_COMMAND, sub, body=addr.to_bytes(2, "big") + value.to_bytes(2, "big")))
        elif sub == SUB_WRITE:
            self.variables[addr] = int.from_bytes(frame[14:16], "big")
            if addr == LOAD_ADDRESS and self.config.has(Vulnerability.V4_LOAD_DELAY):
                # the pending half cycle stretches too: 10 half cycles at 1.5x
                self._next_edge += self.half // 2
                self._slow = SLOW_HALF_CYCLES - 1
            self.outbox.append(reply(CLASS_COMMAND, sub, body=addr.to_bytes(2, "big")))
        else:
            self._error(frame, STATUS_UNKNOWN_COMMAND)

    def _reset(self, now: int, frame: bytes) -> None:
        self.outbox.append(reply(CLASS_COMMAND, SUB_RESET))
        self.phase = Phase.REBOOTING
        self.reboots += 1
        self.variables.clear()
        self._reboot_end = now + self.config.reboot_duration
        self._hang_up("closed")
