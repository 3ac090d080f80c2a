"""Records shared by the campaign loop and the report builder."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .mutate import FuzzCase


class TcpEvent(enum.Enum):
    RESPONSE_RECEIVED = "ResponseReceived"
    TIMEOUT = "Timeout"
    CONNECTION_RESET = "ConnectionReset"
    CONNECTION_CLOSED = "ConnectionClosed"


@dataclass(frozen=True)
class NetworkObservation:
    case_id: int
    response: Optional[bytes]
    tcp_event: TcpEvent
    latency: int

    def __post_init__(self):
        if (self.response is not None) != (self.tcp_event is TcpEvent.RESPONSE_RECEIVED):
            raise ValueError("response present iff tcp_event is ResponseReceived")

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "event": self.tcp_event.value,
                "response": None if self.response is None else self.response.hex(), "latency": self.latency}


class Origin(enum.Enum):
    CALIBRATION = "calibration"  # unmutated, live token: defines expected behavior
    REPLAY = "replay"  # recorded bytes verbatim, handshake included
    FUZZ = "fuzz"


@dataclass(frozen=True)
class SentCase:
    """A case as it went on the wire."""

    case: FuzzCase
    origin: Origin
    send_time: int
    wire: bytes
    token_tampered: bool

    @property
    def case_id(self) -> int:
        return self.case.case_id
