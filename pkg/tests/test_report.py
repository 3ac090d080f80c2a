import json
import socket

import pytest

from plcfuzz.clock import MS
from plcfuzz.events import NetworkObservation, Origin, SentCase, TcpEvent
from plcfuzz.harness import MockHarness, TcpHarness
from plcfuzz.mockdevice import DeviceConfig
from plcfuzz.monitor import Verdict, VerdictClass
from plcfuzz.mutate import FuzzCase, Mutation, Strategy
from plcfuzz.report import (REPORT_SCHEMA, Finding, FindingClass, Reproducer, TargetUnreachable, build_report,
                            load_report, verify_finding)

from conftest import RESET_DUMP

STALL, REBOOT, DELAY = VerdictClass.STALLED, VerdictClass.REBOOT_SIGNATURE, VerdictClass.DELAYED
LONG = Mutation(Strategy.LENGTH_OVERWRITE, 2, b"\xff\xff")


def case(i, mutations=(LONG,), template="cmd-3"):
    data = bytearray(RESET_DUMP)
    for m in mutations:
        if m.strategy is Strategy.LENGTH_OVERWRITE:
            data[2:4] = m.payload
    return FuzzCase(i, template, tuple(mutations), bytes(data), 0)


def sent(i, t, origin=Origin.FUZZ, tampered=False, **kw):
    c = case(i, **kw)
    return SentCase(c, origin, t, c.bytes, tampered)


def obs(i, response=None):
    if response is None:
        return NetworkObservation(i, None, TcpEvent.CONNECTION_RESET, 1)
    return NetworkObservation(i, response, TcpEvent.RESPONSE_RECEIVED, 1)


def verdict(cls, onset):
    return Verdict((onset, onset + 1000), cls, 5.0, onset)


def test_identical_stalls_dedup():
    cases = [sent(i, 1000 * i) for i in range(3)]
    verdicts = [verdict(STALL, 1000 * i + 500) for i in range(3)]
    r = build_report(cases, [obs(i) for i in range(3)], verdicts)
    [f] = r.findings
    assert f.cls is FindingClass.CRASH_STALL and f.occurrences == 3 and f.case_ids == [0, 1, 2]
    assert f.signature == "LengthOverwrite" and f.case_ref == 0
    assert f.reproducer.bytes[2:4] == b"\xff\xff"


def test_different_signatures_stay_apart():
    flip = Mutation(Strategy.BIT_FLIP, 0, 0)
    cases = [sent(0, 0), sent(1, 1000, mutations=(flip,))]
    r = build_report(cases, [obs(0), obs(1)], [verdict(STALL, 500), verdict(STALL, 1500)])
    assert len(r.findings) == 2


def test_unattributed_delay_is_protocol_error():
    r = build_report([sent(0, 1000)], [obs(0, b"ok")], [verdict(DELAY, 10)])
    [f] = r.findings
    assert f.cls is FindingClass.PROTOCOL_ERROR and f.case_ref is None and f.reproducer is None


def test_replay_reboot_is_replay_accepted():
    s = sent(0, 1000, origin=Origin.REPLAY, mutations=())
    r = build_report([s], [obs(0, b"\x81")], [verdict(REBOOT, 1200)])
    [f] = r.findings
    assert f.cls is FindingClass.REPLAY_ACCEPTED and f.signature == "replay"
    assert f.reproducer.verbatim_handshake


def test_reboot_classes():
    cal = sent(0, 0, origin=Origin.CALIBRATION, mutations=())
    tampered = sent(1, 1000, tampered=True, mutations=(Mutation(Strategy.TOKEN_CORRUPT, 11, b"\x01"),))
    plain = sent(2, 2000, template="cmd-0", mutations=(Mutation(Strategy.BYTE_SET, 5, b"\x10"),))
    # the calibrated reset reboots: that is its job, not a finding
    r = build_report([cal, tampered, plain], [obs(0, b"R"), obs(1), obs(2, b"X")],
                     [verdict(REBOOT, 100), verdict(REBOOT, 1100), verdict(REBOOT, 2100)])
    assert [f.cls for f in r.findings] == [FindingClass.AUTH_BYPASS, FindingClass.REBOOT_TRIGGERED]


def test_expected_effect_via_matching_response():
    cal = sent(0, 0, origin=Origin.CALIBRATION, mutations=())
    # a read mutated into the reset subcode answers exactly like the calibrated reset
    morphed = sent(1, 1000, template="cmd-1", mutations=(Mutation(Strategy.BYTE_SET, 5, b"\x10"),))
    r = build_report([cal, morphed], [obs(0, b"R"), obs(1, b"R")], [verdict(REBOOT, 100), verdict(REBOOT, 1100)])
    assert r.findings == []


def test_response_evidence():
    cal = sent(0, 0, origin=Origin.CALIBRATION, mutations=(), template="cmd-0")
    forged = sent(1, 1000, tampered=True, template="cmd-0",
                  mutations=(Mutation(Strategy.TOKEN_CORRUPT, 11, b"\x01"),))
    refused = sent(2, 2000, tampered=True, template="cmd-0",
                   mutations=(Mutation(Strategy.TOKEN_CORRUPT, 11, b"\x02"),))
    r = build_report([cal, forged, refused], [obs(0, b"OK"), obs(1, b"OK"), obs(2, b"NO")], [])
    [f] = r.findings
    assert f.cls is FindingClass.AUTH_BYPASS and f.case_ids == [1]
    assert f.reproducer.expected_response == b"OK"


def test_records_are_loss_free_and_ordered(tmp_path):
    cases = [sent(i, 1000 * i) for i in range(5)]
    r = build_report(cases, [obs(i) for i in range(5)], [verdict(STALL, 2500)], header={"seed": 9})
    recs = [json.loads(line) for line in r.to_ndjson().splitlines()]
    assert recs[0]["type"] == "header" and recs[0]["schema"] == REPORT_SCHEMA
    assert recs[-1]["type"] == "summary" and recs[-1]["cases"] == 5
    case_ids = [x["case_id"] for x in recs if x["type"] == "case"]
    assert sorted(case_ids) == list(range(5)) and len(case_ids) == 5
    types = [x["type"] for x in recs]
    # time-ordered: the verdict at 2500 falls between case 2 and case 3
    v = types.index("verdict")
    assert recs[v - 2]["case_id"] == 2 and recs[v + 1]["case_id"] == 3 and recs[v]["case_id"] == 2
    records, summary = r.write(tmp_path)
    header, findings = load_report(records)
    assert header["seed"] == 9 and [f.cls for f in findings] == [FindingClass.CRASH_STALL]
    assert "CrashStall" in summary.read_text() and "--finding 1" in summary.read_text()


def test_finding_dict_roundtrip():
    r = build_report([sent(0, 0)], [obs(0)], [verdict(STALL, 100)])
    f = r.findings[0]
    assert Finding.from_dict(json.loads(json.dumps(f.to_dict()))) == f


def test_load_report_rejects_other_schema(tmp_path):
    p = tmp_path / "r.ndjson"
    p.write_text(json.dumps({"type": "header", "schema": "other/9"}) + "\n")
    with pytest.raises(ValueError):
        load_report(p)


def _v2_finding():
    long_reset = bytearray(RESET_DUMP)
    long_reset[2:4] = b"\xff\xff"
    rep = Reproducer("cmd-3", (LONG,), bytes(long_reset), False)
    return Finding(1, FindingClass.CRASH_STALL, "cmd-3", "LengthOverwrite", [7], reproducer=rep)


def test_verify_v2_crash(model):
    assert verify_finding(_v2_finding(), MockHarness(DeviceConfig(vulnerabilities="V1,V2")), model)


def test_verify_fails_without_v2(model):
    assert not verify_finding(_v2_finding(), MockHarness(DeviceConfig(vulnerabilities="V1")), model)


def test_verify_unreachable(model):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    f = Finding(1, FindingClass.AUTH_BYPASS, "cmd-0", "TokenCorrupt", [1],
                reproducer=Reproducer("cmd-0", (), RESET_DUMP, False, b"OK"))
    with pytest.raises(TargetUnreachable):
        verify_finding(f, TcpHarness(f"127.0.0.1:{port}"), model, timeout=200 * MS)


def test_verify_needs_signal(model):
    h = MockHarness(DeviceConfig(vulnerabilities="V1,V2"))
    h.core._crash()
    with pytest.raises(TargetUnreachable):
        verify_finding(_v2_finding(), h, model, warm_up=100 * MS)
