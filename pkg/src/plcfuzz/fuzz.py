"""Live sessions against a target: handshake with token learning, framed reads, replay."""

from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .capture import Direction, LengthFieldSpec, TcpSession
from .events import NetworkObservation, TcpEvent
from .model import ByteMask, FieldKind, HandshakeStep, ProtocolModel, step_ref
from .mutate import substitute_tokens
from .transport import ConnectFailed, PeerClosed

log = logging.getLogger(__name__)

__all__ = ["ConnectFailed", "HandshakeError", "HandshakeStepTimeout", "HandshakeShapeMismatch",
           "HandshakeConnectionLost", "SessionNotReady", "SessionState", "SessionHandle", "FramedReader",
           "connect_and_handshake", "observe", "replay", "recorded_handshake"]


class HandshakeError(Exception):
    def __init__(self, step: int, message: str):
        super().__init__(f"handshake step {step}: {message}")
        self.step = step


class HandshakeStepTimeout(HandshakeError):
    pass


class HandshakeShapeMismatch(HandshakeError):
    pass


class HandshakeConnectionLost(HandshakeError):
    pass


class SessionNotReady(RuntimeError):
    pass


class SessionState(enum.Enum):
    TCP_CONNECTED = "TcpConnected"
    HANDSHAKE_DONE = "HandshakeDone"
    FAILED = "Failed"


class FramedReader:
    """Splits a byte stream into messages with the model's length field.

    Without framing every received chunk is one message. A declared length
    shorter than the header hands back whatever is buffered.
    """

    def __init__(self, conn, framing: Optional[LengthFieldSpec], clock):
        self.conn = conn
        self.framing = framing
        self.clock = clock
        self.buffer = bytearray()

    def _take(self) -> Optional[bytes]:
        f = self.framing
        if not self.buffer:
            return None
        if f is None:
            out = bytes(self.buffer)
            self.buffer.clear()
            return out
        if len(self.buffer) < f.end:
            return None
        n = f.decode(self.buffer)
        if n < f.end:
            n = len(self.buffer)
        if len(self.buffer) < n:
            return None
        out = bytes(self.buffer[:n])
        del self.buffer[:n]
        return out

    def read(self, timeout: int) -> Optional[bytes]:
        """One message, or None on timeout. Connection loss propagates."""
        deadline = self.clock.now() + timeout
        while True:
            msg = self._take()
            if msg is not None:
                return msg
            left = deadline - self.clock.now()
            if left <= 0:
                return None
            chunk = self.conn.recv(left)
            if chunk is not None:
                self.buffer.extend(chunk)


@dataclass
class SessionHandle:
    endpoint: str
    state: SessionState
    learned_token_values: dict[int, bytes] = field(default_factory=dict)
    connection: object = None
    reader: Optional[FramedReader] = None
    verbatim: bool = False

    def send(self, data: bytes) -> None:
        if self.state is not SessionState.HANDSHAKE_DONE:
            raise SessionNotReady(f"session is {self.state.value}, commands need HandshakeDone")
        try:
            self.connection.send(data)
        except (ConnectionError, OSError):
            self.state = SessionState.FAILED
            raise

    def close(self) -> None:
        if self.connection is not None:
            self.connection.close()
        if self.state is SessionState.HANDSHAKE_DONE:
            self.state = SessionState.FAILED


def connect_and_handshake(target, model: ProtocolModel, timeout: int, clock=None,
                          verbatim: bool = False) -> SessionHandle:
    """Connect and run the handshake.

    Client steps go out with learned token values substituted at their echo
    sites; ``verbatim`` sends the recorded bytes unchanged but still records
    the live token values. Server responses must match their template length
    and constant bytes.
    """
    clock = clock or target.clock
    conn = target.connect(timeout)
    session = SessionHandle(str(target), SessionState.TCP_CONNECTED, {}, conn,
                            FramedReader(conn, model.framing, clock), verbatim)
    try:
        for k, step in enumerate(model.handshake):
            ref = step_ref(k)
            if step.direction is Direction.CLIENT_TO_SERVER:
                learned = {} if verbatim else session.learned_token_values
                conn.send(substitute_tokens(step.template, model, ref, learned))
                continue
            try:
                resp = session.reader.read(timeout)
            except (ConnectionError, OSError) as exc:
                raise HandshakeConnectionLost(k, str(exc)) from None
            if resp is None:
                raise HandshakeStepTimeout(k, "no response")
            if len(resp) != len(step.template):
                raise HandshakeShapeMismatch(k, f"{len(resp)} bytes, template has {len(step.template)}")
            sources = {tok.source_offset + j for tok in model.tokens if tok.source_step == k
                       for j in range(tok.width)}
            for p in step.mask.positions(FieldKind.CONSTANT):
                if p not in sources and resp[p] != step.template[p]:
                    raise HandshakeShapeMismatch(k, f"byte {p} is {resp[p]:#04x}, expected constant "
                                                    f"{step.template[p]:#04x}")
            for ti, tok in enumerate(model.tokens):
                if tok.source_step == k:
                    session.learned_token_values[ti] = resp[tok.source_offset:tok.source_offset + tok.width]
    except HandshakeError:
        session.state = SessionState.FAILED
        conn.close()
        raise
    except (ConnectionError, OSError) as exc:
        session.state = SessionState.FAILED
        conn.close()
        raise HandshakeConnectionLost(len(model.handshake) - 1, str(exc)) from None
    session.state = SessionState.HANDSHAKE_DONE
    return session


def observe(session: SessionHandle, data: bytes, case_id: int, timeout: int, clock) -> NetworkObservation:
    """Send one message and wait for one framed response."""
    t0 = clock.now()
    try:
        session.send(data)
        resp = session.reader.read(timeout)
    except PeerClosed:
        session.state = SessionState.FAILED
        return NetworkObservation(case_id, None, TcpEvent.CONNECTION_CLOSED, clock.now() - t0)
    except (ConnectionError, OSError):
        session.state = SessionState.FAILED
        return NetworkObservation(case_id, None, TcpEvent.CONNECTION_RESET, clock.now() - t0)
    if resp is None:
        return NetworkObservation(case_id, None, TcpEvent.TIMEOUT, clock.now() - t0)
    return NetworkObservation(case_id, resp, TcpEvent.RESPONSE_RECEIVED, clock.now() - t0)


def replay(session: SessionHandle, messages: Sequence[bytes], timeout: int, clock,
           model: Optional[ProtocolModel] = None, refs: Optional[Sequence[str]] = None) -> list[NetworkObservation]:
    """Send each message and record one observation per message.

    With ``model`` and ``refs`` the learned tokens are written into each
    message's echo sites first. Once the connection is gone the remaining
    messages are not written and are observed as ConnectionClosed.
    """
    if session.state is not SessionState.HANDSHAKE_DONE:
        raise SessionNotReady(f"session is {session.state.value}, replay needs HandshakeDone")
    out = []
    for i, msg in enumerate(messages):
        if model is not None and refs is not None and not session.verbatim:
            msg = substitute_tokens(msg, model, refs[i], session.learned_token_values)
        if session.state is not SessionState.HANDSHAKE_DONE:
            out.append(NetworkObservation(i, None, TcpEvent.CONNECTION_CLOSED, 0))
            continue
        out.append(observe(session, msg, i, timeout, clock))
    return out


def recorded_handshake(model: ProtocolModel, session: TcpSession) -> tuple[ProtocolModel, list[bytes]]:
    """The model with its handshake replaced by ``session``'s own, plus the session's later client messages.

    Used to replay a capture verbatim. The captured handshake must have the
    model's shape.
    """
    n = len(model.handshake)
    if len(session.messages) < n:
        raise HandshakeShapeMismatch(len(session.messages), "capture ends inside the handshake")
    steps = []
    for k, (step, msg) in enumerate(zip(model.handshake, session.messages)):
        if msg.direction is not step.direction or len(msg.payload) != len(step.template):
            raise HandshakeShapeMismatch(k, "captured handshake does not match the model")
        steps.append(HandshakeStep(step.direction, msg.payload, ByteMask(step.mask.kinds, msg.payload)))
    rest = [m.payload for m in session.messages[n:] if m.direction is Direction.CLIENT_TO_SERVER]
    return dataclasses.replace(model, handshake=tuple(steps)), rest
