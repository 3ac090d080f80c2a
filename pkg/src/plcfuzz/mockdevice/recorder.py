"""Record IDE-to-device sessions against the mock core as pcap files.

Stands in for sniffing a real engineering workstation: a scripted client
performs the handshake and a few commands, and every message becomes one TCP
segment in the capture.
"""

from __future__ import annotations

from typing import Callable, Sequence

from ..capture import ConversationWriter, Direction, PacketRecord, write_capture
from ..clock import MS, SECOND
from .protocol import (ACK_REQUEST, INIT_REQUEST, RESET_REQUEST, RESPONSE_TOKEN_OFFSET, SUB_READ, SUB_WRITE,
                       DeviceConfig, DeviceCore, command)

DEVICE_IP = "192.168.1.2"
IDE_IP = "192.168.1.100"

CommandBuilder = Callable[[int], bytes]


def status_cmd(token: int) -> bytes:
    return command(0x0001, token, base=ACK_REQUEST)


def read_cmd(token: int) -> bytes:
    return command(SUB_READ, token, address=0x0010)


def write_cmd(token: int) -> bytes:
    return command(SUB_WRITE, token, address=0x0010, value=0x002A)


def reset_cmd(token: int) -> bytes:
    return command(0x0010, token, base=RESET_REQUEST)


DEFAULT_SCRIPT: tuple[CommandBuilder, ...] = (status_cmd, read_cmd, write_cmd, reset_cmd)


def record_session(core: DeviceCore, start: int, client_port: int,
                   script: Sequence[CommandBuilder] = DEFAULT_SCRIPT, server_port: int = 1962) -> list[PacketRecord]:
    """Drive one handshake plus ``script`` against ``core`` and return the packets."""
    conv = ConversationWriter((IDE_IP, client_port), (DEVICE_IP, server_port),
                              client_isn=client_port * 7919, server_isn=client_port * 104729)
    t = start
    conv.open(t)
    t += 5 * MS
    if not core.accept(t):
        raise RuntimeError("mock device refused the recording session")

    def exchange(payload: bytes) -> list[bytes]:
        nonlocal t
        conv.send(t, Direction.CLIENT_TO_SERVER, payload)
        core.receive(t, payload)
        replies, core.outbox = core.outbox, []
        t += MS // 2
        for r in replies:
            conv.send(t, Direction.SERVER_TO_CLIENT, r)
            t += MS // 2
        t += MS
        return replies

    replies = exchange(INIT_REQUEST)
    token = replies[0][RESPONSE_TOKEN_OFFSET]
    ack = bytearray(ACK_REQUEST)
    ack[11] = token
    exchange(bytes(ack))
    for build in script:
        exchange(build(token))
        if not core.connected:
            break
    core.disconnect(t)
    conv.close(t)
    return conv.records


def record_capture(config: DeviceConfig, sessions: int = 1, script: Sequence[CommandBuilder] = DEFAULT_SCRIPT,
                   start: int = 1_700_000_000 * SECOND, client_port: int = 49152) -> bytes:
    """A pcap with ``sessions`` consecutive recorded sessions against a fresh device."""
    core = DeviceCore(config, start)
    records: list[PacketRecord] = []
    t = start + SECOND
    for n in range(sessions):
        records.extend(record_session(core, t, client_port + n, script, config.listen_port))
        t = records[-1].timestamp + config.reboot_duration + SECOND
    return write_capture(records)
