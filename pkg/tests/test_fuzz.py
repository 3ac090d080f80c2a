import socket

import pytest

from plcfuzz.campaign import AbortedTargetUnreachable, CampaignConfig, run_campaign
from plcfuzz.capture import read_capture, reassemble, segment_messages
from plcfuzz.clock import MS, VirtualClock
from plcfuzz.events import NetworkObservation, Origin, TcpEvent
from plcfuzz.fuzz import (ConnectFailed, HandshakeShapeMismatch, HandshakeStepTimeout, SessionNotReady,
                          SessionState, connect_and_handshake, observe, recorded_handshake, replay)
from plcfuzz.harness import MockHarness
from plcfuzz.mockdevice import DeviceConfig, Phase
from plcfuzz.mockdevice.recorder import record_capture
from plcfuzz.transport import TcpTarget

from conftest import ACK_DUMP, INIT_DUMP, RESET_DUMP, RESPONSE_DUMP

TIMEOUT = 500 * MS


class ScriptedConnection:
    """Answers each client write with the next scripted reply."""

    def __init__(self, replies, clock):
        self.replies = list(replies)
        self.clock = clock
        self.sent = []
        self.pending = []

    def send(self, data):
        self.sent.append(data)
        if self.replies:
            self.pending.append(self.replies.pop(0))

    def recv(self, timeout):
        if self.pending:
            return self.pending.pop(0)
        self.clock.sleep(timeout)
        return None

    def close(self):
        pass


class ScriptedTarget:
    def __init__(self, *replies):
        self.clock = VirtualClock()
        self.conn = ScriptedConnection(replies, self.clock)

    def connect(self, timeout):
        return self.conn


def test_handshake_learns_live_token(model):
    h = MockHarness(DeviceConfig(token=0x7C, vulnerabilities="V1"))
    session = connect_and_handshake(h.target, model, TIMEOUT)
    assert session.state is SessionState.HANDSHAKE_DONE
    assert session.learned_token_values == {0: b"\x7c"}
    assert h.core.phase is Phase.READY


def test_handshake_sends_recorded_init(model):
    t = ScriptedTarget(RESPONSE_DUMP, None)
    connect_and_handshake(t, model, TIMEOUT)
    assert t.conn.sent == [INIT_DUMP, ACK_DUMP]


def test_handshake_shape_mismatch(model):
    short = bytearray(RESPONSE_DUMP[:19])
    short[2:4] = (19).to_bytes(2, "big")
    with pytest.raises(HandshakeShapeMismatch) as err:
        connect_and_handshake(ScriptedTarget(bytes(short)), model, TIMEOUT)
    assert err.value.step == 1
    # a truncated frame that still claims 20 bytes is a timeout instead
    with pytest.raises(HandshakeStepTimeout):
        connect_and_handshake(ScriptedTarget(RESPONSE_DUMP[:19]), model, TIMEOUT)


def test_handshake_constant_mismatch(model):
    odd = bytearray(RESPONSE_DUMP)
    odd[13] = 0x03
    with pytest.raises(HandshakeShapeMismatch):
        connect_and_handshake(ScriptedTarget(bytes(odd)), model, TIMEOUT)


def test_handshake_timeout(model):
    with pytest.raises(HandshakeStepTimeout):
        connect_and_handshake(ScriptedTarget(), model, TIMEOUT)


def _free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_closed_port(model):
    with pytest.raises(ConnectFailed):
        connect_and_handshake(TcpTarget("127.0.0.1", _free_port()), model, 200 * MS)


def test_replay_needs_handshake(model):
    h = MockHarness(DeviceConfig(vulnerabilities="V1"))
    session = connect_and_handshake(h.target, model, TIMEOUT)
    assert replay(session, [], TIMEOUT, h.clock) == []
    session.close()
    assert session.state is SessionState.FAILED
    with pytest.raises(SessionNotReady):
        replay(session, [RESET_DUMP], TIMEOUT, h.clock)
    with pytest.raises(SessionNotReady):
        session.send(RESET_DUMP)


def test_replay_reset_dump(model):
    h = MockHarness(DeviceConfig(token=0x7C, vulnerabilities="V1"))
    session = connect_and_handshake(h.target, model, TIMEOUT)
    obs = replay(session, [RESET_DUMP, RESET_DUMP], TIMEOUT, h.clock, model, ["cmd-3", "cmd-3"])
    assert obs[0].tcp_event is TcpEvent.RESPONSE_RECEIVED
    assert obs[1].tcp_event is TcpEvent.CONNECTION_CLOSED
    assert h.core.phase is Phase.REBOOTING and h.core.reboots == 1


def test_replay_without_substitution_is_refused(model):
    h = MockHarness(DeviceConfig(token=0x7C, vulnerabilities="V1"))
    session = connect_and_handshake(h.target, model, TIMEOUT)
    [obs] = replay(session, [RESET_DUMP], TIMEOUT, h.clock)
    assert obs.response[8:10] == b"\x00\x01"
    assert h.core.phase is Phase.READY


def test_observation_invariant():
    with pytest.raises(ValueError):
        NetworkObservation(0, None, TcpEvent.RESPONSE_RECEIVED, 0)
    with pytest.raises(ValueError):
        NetworkObservation(0, b"x", TcpEvent.TIMEOUT, 0)


def test_observe_reports_crash_as_reset(model):
    h = MockHarness(DeviceConfig(vulnerabilities="V1,V2"))
    session = connect_and_handshake(h.target, model, TIMEOUT)
    long_frame = bytearray(RESET_DUMP)
    long_frame[2:4] = (0x0100).to_bytes(2, "big")
    obs = observe(session, bytes(long_frame), 0, TIMEOUT, h.clock)
    assert obs.tcp_event is TcpEvent.CONNECTION_RESET
    assert h.core.phase is Phase.CRASHED


def test_recorded_handshake(model):
    data = record_capture(DeviceConfig(token=0x21, vulnerabilities="V1"))
    [s] = reassemble(read_capture(data))
    live, rest = recorded_handshake(model, segment_messages(s, model.framing))
    assert live.handshake[1].template[17] == 0x21
    assert len(rest) == 4 and rest[-1][11] == 0x21


class RecordingTarget:
    """Wraps a target and logs every client write per connection."""

    def __init__(self, inner):
        self.inner = inner
        self.clock = inner.clock
        self.log = []

    def connect(self, timeout):
        conn = self.inner.connect(timeout)
        writes = []
        self.log.append(writes)
        orig = conn.send

        def send(data):
            writes.append(data)
            orig(data)
        conn.send = send
        return conn


def test_session_safety_and_completeness(model):
    h = MockHarness(DeviceConfig(vulnerabilities="V1,V2,V3"))
    h.target = RecordingTarget(h.target)
    report = run_campaign(CampaignConfig(budget=300, seed=3), model, h)
    for writes in h.target.log:
        if len(writes) > 2:
            assert writes[0] == INIT_DUMP and writes[1][4:6] == ACK_DUMP[4:6]
    ids = [s.case_id for s in report.sent]
    assert sorted(ids) == sorted(o.case_id for o in report.observations)
    assert len(set(ids)) == len(ids)
    fuzz = [s for s in report.sent if s.origin is Origin.FUZZ]
    assert len(fuzz) == 300


def test_token_correctness(model):
    h = MockHarness(DeviceConfig(token_seed=9, vulnerabilities="V3"))
    h.target = RecordingTarget(h.target)
    report = run_campaign(CampaignConfig(budget=200, seed=4, replay_phase=False), model, h)
    commands = [w for w in h.target.log if len(w) == 3]
    assert len(commands) == len(report.sent)
    tokens = set()
    for (_, ack, wire), s in zip(commands, report.sent):
        assert wire == s.wire
        tokens.add(ack[11])
        if len(wire) > 11:
            assert (wire[11] != ack[11]) == s.case.token_tampered == s.token_tampered
    assert len(tokens) > 10  # tokens really changed between sessions


def test_budget_zero_rejected():
    with pytest.raises(ValueError):
        CampaignConfig(budget=0)


def test_target_down(model):
    h = MockHarness(DeviceConfig(vulnerabilities="V1"))
    h.core._crash()
    h.can_restart = False
    with pytest.raises(AbortedTargetUnreachable):
        run_campaign(CampaignConfig(budget=5, no_monitor=True, max_connect_failures=3), model, h)


def test_unreachable_tcp_target(model):
    cfg = CampaignConfig(target=f"127.0.0.1:{_free_port()}", budget=3, no_monitor=True, max_connect_failures=2,
                         retry_delay_ms=1, connect_timeout_ms=200)
    with pytest.raises(AbortedTargetUnreachable) as err:
        run_campaign(cfg, model)
    assert err.value.report is not None and err.value.report.aborted


def test_without_monitor_outages_become_verdicts(model):
    h = MockHarness(DeviceConfig(vulnerabilities="V1,V2,V3"))
    report = run_campaign(CampaignConfig(budget=400, seed=1, no_monitor=True), model, h)
    assert report.findings
    assert report.header["monitor"] is None
