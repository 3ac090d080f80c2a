import random
import socket
import time

import pytest
from hypothesis import given, settings, strategies as st

from plcfuzz.clock import MS
from plcfuzz.mockdevice import DeviceConfig, DeviceCore, MockDeviceServer, Phase, Vulnerability
from plcfuzz.mockdevice.protocol import SUB_READ, SUB_WRITE, command
from plcfuzz.mockdevice.recorder import read_cmd, write_cmd
from plcfuzz.monitor import Level, ingest_edges

from conftest import ACK_DUMP, INIT_DUMP, RESET_DUMP, RESPONSE_DUMP

T0 = 1_000 * MS


def ready(config=DeviceConfig(vulnerabilities="V1")):
    core = DeviceCore(config, 0)
    assert core.accept(T0)
    core.receive(T0, INIT_DUMP)
    core.receive(T0, ACK_DUMP)
    core.outbox.clear()
    return core


def test_golden_handshake():
    core = DeviceCore(DeviceConfig(vulnerabilities="V1"), 0)
    assert core.accept(T0)
    core.receive(T0, INIT_DUMP)
    assert core.outbox == [RESPONSE_DUMP]
    assert RESPONSE_DUMP[17] == 0x48
    core.outbox.clear()
    core.receive(T0, ACK_DUMP)
    assert core.phase is Phase.READY and core.outbox == []


def test_golden_reset_reboots():
    core = ready()
    core.receive(T0, RESET_DUMP)
    assert core.phase is Phase.REBOOTING and not core.connected
    assert core.outbox[0][:2] == b"\x81\x05" and core.outbox[0][4:6] == b"\x00\x10"
    core.advance(T0 + 399 * MS)
    assert core.phase is Phase.REBOOTING
    core.advance(T0 + 400 * MS)
    assert core.phase is Phase.AWAIT_INIT


def test_coalesced_and_split_frames():
    core = DeviceCore(DeviceConfig(vulnerabilities="V1"), 0)
    core.accept(T0)
    stream = INIT_DUMP + ACK_DUMP
    for i in range(len(stream)):
        core.receive(T0 + i, stream[i:i + 1])
    assert core.phase is Phase.READY and core.outbox == [RESPONSE_DUMP]


def test_wrong_token_refused():
    core = DeviceCore(DeviceConfig(vulnerabilities="V1"), 0)
    core.accept(T0)
    core.receive(T0, INIT_DUMP)
    bad = bytearray(ACK_DUMP)
    bad[11] = 0x49
    core.receive(T0, bytes(bad))
    assert core.phase is Phase.AWAIT_ACK
    assert core.outbox[-1][8:10] == b"\x00\x01"


def test_tokens_vary_per_session_without_v1():
    core = DeviceCore(DeviceConfig(token_seed=5), 0)
    seen = set()
    for k in range(20):
        core.accept(T0 + k)
        core.receive(T0 + k, INIT_DUMP)
        seen.add(core.outbox[-1][17])
        core.disconnect(T0 + k)
    assert len(seen) > 5


def test_read_write():
    core = ready()
    core.receive(T0, write_cmd(0x48))
    core.receive(T0, read_cmd(0x48))
    assert core.variables == {0x10: 0x2A}
    assert core.outbox[-1][-2:] == b"\x00\x2a"


def _phase_after(vulns, frame, phase_setup):
    core = DeviceCore(DeviceConfig(vulnerabilities=vulns), 0)
    core.accept(T0)
    if phase_setup:
        core.receive(T0, INIT_DUMP)
    core.receive(T0, frame)
    return core


def test_unauth_reset_v3():
    wrong = bytearray(RESET_DUMP)
    wrong[11] = 0x00
    assert _phase_after("V1", bytes(wrong), True).phase is Phase.AWAIT_ACK
    assert _phase_after("V1,V3", bytes(wrong), False).phase is Phase.REBOOTING
    core = ready(DeviceConfig(vulnerabilities="V1"))
    core.receive(T0, bytes(wrong))
    assert core.phase is Phase.READY


def test_length_crash_v2():
    frame = bytearray(ACK_DUMP)
    frame[2:4] = (len(ACK_DUMP) + 17).to_bytes(2, "big")
    for vulns, expect in (("V1", Phase.READY), ("V1,V2", Phase.CRASHED)):
        core = ready(DeviceConfig(vulnerabilities=vulns))
        core.receive(T0, bytes(frame))
        core.advance(T0 + 200 * MS)
        assert core.phase is expect
    # an excess of exactly 16 is tolerated
    frame[2:4] = (len(ACK_DUMP) + 16).to_bytes(2, "big")
    core = ready(DeviceConfig(vulnerabilities="V1,V2"))
    core.receive(T0, bytes(frame))
    core.advance(T0 + 200 * MS)
    assert core.phase is Phase.READY and core.outbox[-1][8:10] == b"\x00\x02"


def test_crash_is_silent_until_restart():
    core = DeviceCore(DeviceConfig(), 0)
    core._crash()
    core.advance(10_000 * MS)
    assert core.drain_edges() == [] and not core.accept(10_000 * MS)
    core.restart(10_000 * MS)
    core.advance(11_000 * MS)
    assert len(core.drain_edges()) == 20


def test_load_delay_v4():
    core = ready(DeviceConfig(vulnerabilities="V1,V4"))
    core.drain_edges()
    core.receive(T0, command(SUB_WRITE, 0x48, address=0xFFFF, value=1))
    core.advance(T0 + 2000 * MS)
    stamps = [e.timestamp for e in core.drain_edges()]
    gaps = [b - a for a, b in zip(stamps, stamps[1:])]
    assert gaps[:9] == [75 * MS] * 9
    assert set(gaps[9:]) == {50 * MS}
    assert stamps[0] == T0 + 75 * MS


def test_write_elsewhere_keeps_rhythm():
    core = ready(DeviceConfig(vulnerabilities="V1,V4"))
    core.drain_edges()
    core.receive(T0, command(SUB_WRITE, 0x48, address=0x0001, value=1))
    core.advance(T0 + 1000 * MS)
    stamps = [e.timestamp for e in core.drain_edges()]
    assert {b - a for a, b in zip(stamps, stamps[1:])} == {50 * MS}


def test_edges_alternate_across_reboot():
    core = ready()
    core.receive(T0 + 10 * MS, RESET_DUMP)
    core.advance(T0 + 3000 * MS)
    edges = core.drain_edges()
    levels = [e.level for e in edges]
    assert all(a is not b for a, b in zip(levels, levels[1:]))
    stamps = [e.timestamp for e in edges]
    assert max(b - a for a, b in zip(stamps, stamps[1:])) >= 400 * MS


@given(st.lists(st.binary(min_size=1, max_size=40), max_size=20), st.booleans())
@settings(max_examples=200)
def test_pre_auth_surface(frames, after_init):
    """Only the handshake itself moves the device out of the pre-auth phases."""
    core = DeviceCore(DeviceConfig(vulnerabilities="V1,V2,V4"), 0)
    core.accept(T0)
    if after_init:
        core.receive(T0, INIT_DUMP)
    start = core.phase
    for f in frames:
        if f in (INIT_DUMP, ACK_DUMP):
            continue
        core.receive(T0, f)
        assert core.phase is start
        assert core.variables == {}


def test_robust_mode_sample():
    rng = random.Random(11)
    core = ready(DeviceConfig())
    for i in range(2000):
        t = T0 + i * MS
        if not core.connected:
            core.advance(t + 500 * MS)
            core.accept(t + 500 * MS)
        frame = bytearray(rng.randbytes(rng.randrange(1, 40)))
        if rng.random() < 0.5 and len(frame) >= 4:
            frame[0] = 0x01
            frame[2:4] = rng.randrange(0, 80).to_bytes(2, "big")
        core.receive(t, bytes(frame))
        assert core.phase is not Phase.CRASHED


def test_config_validation():
    assert DeviceConfig(vulnerabilities="all").vulnerabilities == frozenset(Vulnerability)
    assert DeviceConfig(vulnerabilities=["v2", "V3"]).has(Vulnerability.V3_UNAUTH_RESET)
    for bad in (dict(token=256), dict(cycle_period=0), dict(reboot_duration=10 * MS), dict(vulnerabilities="V9")):
        with pytest.raises(ValueError):
            DeviceConfig(**bad)


def _recv_exact(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        assert chunk
        buf += chunk
    return buf


def test_tcp_server_golden_and_edges():
    config = DeviceConfig(listen_port=0, scope_port=0, vulnerabilities="V1", cycle_period=20 * MS,
                          reboot_duration=100 * MS)
    with MockDeviceServer(config) as server:
        scope = socket.create_connection(("127.0.0.1", server.scope_port), timeout=2)
        with socket.create_connection(("127.0.0.1", server.port), timeout=2) as s:
            s.sendall(INIT_DUMP)
            assert _recv_exact(s, 20) == RESPONSE_DUMP
            s.sendall(ACK_DUMP + command(SUB_READ, 0x48, address=7))
            assert _recv_exact(s, 14)[:2] == b"\x81\x05"
        time.sleep(0.2)
        scope.settimeout(2)
        data = scope.recv(4096)
        scope.close()
    series = ingest_edges(data.rsplit(b"\n", 1)[0])
    assert len(series) >= 4 and series.malformed == 0
    assert {e.level for e in series} == {Level.HIGH, Level.LOW}


def test_port_conflict():
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    try:
        with pytest.raises(OSError):
            MockDeviceServer(DeviceConfig(listen_port=blocker.getsockname()[1], scope_port=0)).start()
    finally:
        blocker.close()
