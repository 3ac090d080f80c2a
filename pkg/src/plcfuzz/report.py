"""Findings, campaign reports and finding verification.

A finding ties one case to evidence: an anomalous verdict attributed to it, or
a response that only an accepting device would give. Calibration cases (each
command sent once, unmutated, with the live token) define what the device
normally does; a fuzz case whose intact-token effect matches its command's
calibration is not a finding.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .clock import MS
from .events import NetworkObservation, Origin, SentCase, TcpEvent
from .fuzz import HandshakeError, connect_and_handshake, observe
from .monitor import Attribution, InsufficientData, LiveMonitor, MonitorSettings, Verdict, VerdictClass, correlate
from .mutate import Mutation, apply_mutations, substitute_tokens
from .transport import ConnectFailed

REPORT_SCHEMA = "plcfuzz-report/1"


class TargetUnreachable(ConnectionError):
    pass


class FindingClass(enum.Enum):
    CRASH_STALL = "CrashStall"
    REBOOT_TRIGGERED = "RebootTriggered"
    DELAY_ANOMALY = "DelayAnomaly"
    AUTH_BYPASS = "AuthBypass"
    REPLAY_ACCEPTED = "ReplayAccepted"
    PROTOCOL_ERROR = "ProtocolError"


@dataclass(frozen=True)
class Reproducer:
    """Enough to resend the case: template, mutations, how to handshake, what to expect."""

    template_id: str
    mutations: tuple[Mutation, ...]
    bytes: bytes
    verbatim_handshake: bool
    expected_response: Optional[bytes] = None

    def wire(self, model, learned: Mapping[int, bytes]) -> bytes:
        if self.verbatim_handshake:
            return self.bytes
        template = model.command(self.template_id).template
        return apply_mutations(substitute_tokens(template, model, self.template_id, learned), self.mutations)

    def to_dict(self) -> dict:
        return {"template_id": self.template_id, "mutations": [m.to_dict() for m in self.mutations],
                "bytes": self.bytes.hex(), "verbatim_handshake": self.verbatim_handshake,
                "expected_response": None if self.expected_response is None else self.expected_response.hex()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Reproducer":
        exp = d.get("expected_response")
        return cls(d["template_id"], tuple(Mutation.from_dict(m) for m in d["mutations"]), bytes.fromhex(d["bytes"]),
                   bool(d["verbatim_handshake"]), None if exp is None else bytes.fromhex(exp))


def verdict_to_dict(v: Verdict) -> dict:
    return {"window": list(v.window), "class": v.cls.value, "detail": v.detail, "onset": v.onset}


def verdict_from_dict(d: Mapping) -> Verdict:
    return Verdict(tuple(d["window"]), VerdictClass(d["class"]), d["detail"], d["onset"])


def observation_from_dict(d: Mapping) -> NetworkObservation:
    resp = d["response"]
    return NetworkObservation(d["case_id"], None if resp is None else bytes.fromhex(resp), TcpEvent(d["event"]),
                              d["latency"])


@dataclass
class Finding:
    finding_id: int
    cls: FindingClass
    template_id: Optional[str]
    signature: str
    case_ids: list[int]
    observation: Optional[NetworkObservation] = None
    verdict: Optional[Verdict] = None
    reproducer: Optional[Reproducer] = None

    @property
    def case_ref(self) -> Optional[int]:
        return self.case_ids[0] if self.case_ids else None

    @property
    def occurrences(self) -> int:
        return max(len(self.case_ids), 1)

    def to_dict(self) -> dict:
        return {"finding_id": self.finding_id, "class": self.cls.value, "template_id": self.template_id,
                "signature": self.signature, "case_ref": self.case_ref, "case_ids": self.case_ids,
                "occurrences": self.occurrences,
                "evidence": {"observation": None if self.observation is None else self.observation.to_dict(),
                             "verdict": None if self.verdict is None else verdict_to_dict(self.verdict)},
                "reproducer": None if self.reproducer is None else self.reproducer.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Finding":
        ev = d.get("evidence") or {}
        return cls(d["finding_id"], FindingClass(d["class"]), d["template_id"], d["signature"], list(d["case_ids"]),
                   None if ev.get("observation") is None else observation_from_dict(ev["observation"]),
                   None if ev.get("verdict") is None else verdict_from_dict(ev["verdict"]),
                   None if d.get("reproducer") is None else Reproducer.from_dict(d["reproducer"]))


@dataclass
class Calibration:
    response: Optional[bytes] = None
    effects: set = field(default_factory=set)


def calibrate(sent: Sequence[SentCase], observations: Mapping[int, NetworkObservation],
              attributions: Sequence[Attribution]) -> dict[str, Calibration]:
    by_id = {s.case_id: s for s in sent}
    out: dict[str, Calibration] = {}
    for s in sent:
        if s.origin is Origin.CALIBRATION:
            obs = observations.get(s.case_id)
            out.setdefault(s.case.template_id, Calibration()).response = obs.response if obs else None
    for att in attributions:
        s = by_id.get(att.case_id)
        if s is not None and s.origin is Origin.CALIBRATION:
            out[s.case.template_id].effects.add(att.verdict.cls)
    return out


def expected_effect(s: SentCase, cls: VerdictClass, calib: Mapping[str, Calibration],
                    response: Optional[bytes] = None) -> bool:
    """An intact-token fuzz case doing what a calibrated command does.

    Either its own command showed this effect, or the device answered exactly
    as it answers a calibrated command that showed it (a mutation turned one
    legitimate command into another).
    """
    if s.origin is not Origin.FUZZ or s.token_tampered:
        return False
    own = calib.get(s.case.template_id)
    if own is not None and cls in own.effects:
        return True
    return response is not None and any(c.response == response and cls in c.effects for c in calib.values())


def classify_verdict(s: SentCase, cls: VerdictClass, calib: Mapping[str, Calibration],
                     response: Optional[bytes] = None) -> Optional[FindingClass]:
    """Finding class for an anomaly attributed to ``s``, or None if expected."""
    if s.origin is Origin.CALIBRATION or expected_effect(s, cls, calib, response):
        return None
    if cls is VerdictClass.STALLED:
        return FindingClass.CRASH_STALL
    if cls is VerdictClass.REBOOT_SIGNATURE:
        if s.token_tampered:
            return FindingClass.AUTH_BYPASS
        return FindingClass.REPLAY_ACCEPTED if s.origin is Origin.REPLAY else FindingClass.REBOOT_TRIGGERED
    if cls is VerdictClass.DELAYED:
        if s.origin is Origin.REPLAY and not s.token_tampered:
            return FindingClass.REPLAY_ACCEPTED
        return FindingClass.DELAY_ANOMALY
    return None


def reference_response(template_id: str, calib: Mapping[str, Calibration], model=None) -> Optional[bytes]:
    c = calib.get(template_id)
    if c is not None and c.response is not None:
        return c.response
    if model is not None:
        try:
            return model.command(template_id).response
        except KeyError:
            return None
    return None


def classify_response(s: SentCase, obs: NetworkObservation, calib: Mapping[str, Calibration],
                      model=None) -> Optional[FindingClass]:
    """A valid-looking answer to a request the device should have refused."""
    if s.origin is Origin.CALIBRATION or obs.response is None:
        return None
    ref = reference_response(s.case.template_id, calib, model)
    if ref is None or obs.response != ref:
        return None
    if s.token_tampered:
        return FindingClass.AUTH_BYPASS
    if s.origin is Origin.REPLAY:
        return FindingClass.REPLAY_ACCEPTED
    return None


def _signature(s: SentCase) -> str:
    return "replay" if s.origin is Origin.REPLAY else s.case.signature


def _reproducer(s: SentCase, expected: Optional[bytes]) -> Reproducer:
    return Reproducer(s.case.template_id, s.case.mutations, s.case.bytes, s.origin is Origin.REPLAY, expected)


@dataclass
class CampaignReport:
    header: dict
    sent: list[SentCase]
    observations: list[NetworkObservation]
    attributions: list[Attribution]
    findings: list[Finding]
    restarts: list[int] = field(default_factory=list)
    aborted: Optional[str] = None

    @property
    def finding_classes(self) -> set[FindingClass]:
        return {f.cls for f in self.findings}

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for f in self.findings:
            out[f.cls.value] = out.get(f.cls.value, 0) + 1
        return dict(sorted(out.items()))

    def records(self) -> list[dict]:
        obs = {o.case_id: o for o in self.observations}
        timed = []
        for s in self.sent:
            c = s.case
            timed.append((s.send_time, 0, c.case_id, {
                "type": "case", "case_id": c.case_id, "origin": s.origin.value, "template_id": c.template_id,
                "mutations": [m.to_dict() for m in c.mutations], "bytes": c.bytes.hex(), "wire": s.wire.hex(),
                "rng_seed": c.rng_seed, "send_time": s.send_time, "token_tampered": s.token_tampered}))
            if c.case_id in obs:
                timed.append((s.send_time, 1, c.case_id, {"type": "observation", **obs[c.case_id].to_dict()}))
        for n, att in enumerate(self.attributions):
            v = att.verdict
            timed.append((v.onset if v.onset is not None else v.window[0], 2, n, {
                "type": "verdict", **verdict_to_dict(v), "case_id": att.case_id, "ambiguity": att.ambiguity}))
        for t in self.restarts:
            timed.append((t, 3, 0, {"type": "restart", "time": t}))
        timed.sort(key=lambda r: r[:3])
        out = [{"type": "header", **self.header}]
        out += [r[3] for r in timed]
        out += [{"type": "finding", **f.to_dict()} for f in self.findings]
        out.append({"type": "summary", "cases": len(self.sent), "findings": self.counts(),
                    "restarts": len(self.restarts), "aborted": self.aborted})
        return out

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records())

    def summary(self) -> str:
        h = self.header
        lines = [f"campaign seed {h.get('seed')}  target {h.get('target')}  budget {h.get('budget')}",
                 f"cases sent: {len(self.sent)}   restarts: {len(self.restarts)}"]
        if self.aborted:
            lines.append(f"ABORTED: {self.aborted}")
        lines.append(f"findings: {len(self.findings)}")
        for name, n in self.counts().items():
            lines.append(f"  {name}: {n}")
        for f in self.findings:
            v = f"{f.verdict.cls.value}" if f.verdict else (f.observation.tcp_event.value if f.observation else "-")
            lines.append(f"#{f.finding_id} {f.cls.value} template={f.template_id} via={f.signature} "
                         f"cases={f.occurrences} first={f.case_ref} evidence={v}")
            if f.reproducer is not None:
                lines.append(f"    bytes {f.reproducer.bytes.hex()}")
                lines.append(f"    reproduce: plcfuzz replay --model {h.get('model_path') or 'MODEL'} "
                             f"--target {h.get('target')} --report report.ndjson --finding {f.finding_id}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        records, summary = d / "report.ndjson", d / "summary.txt"
        records.write_text(self.to_ndjson())
        summary.write_text(self.summary())
        return records, summary


def build_report(sent: Sequence[SentCase], observations: Sequence[NetworkObservation], verdicts: Sequence[Verdict],
                 header: Optional[dict] = None, model=None, restarts: Sequence[int] = (),
                 aborted: Optional[str] = None) -> CampaignReport:
    """Attribute verdicts, classify, deduplicate by (class, template, strategy signature)."""
    sent = sorted(sent, key=lambda s: (s.send_time, s.case_id))
    verdicts = sorted((v for v in verdicts if v.cls.anomalous), key=lambda v: (v.onset or v.window[0], v.window))
    obs = {o.case_id: o for o in observations}
    attributions = correlate(verdicts, [(s.case_id, s.send_time) for s in sent])
    calib = calibrate(sent, obs, attributions)
    by_id = {s.case_id: s for s in sent}

    hits = []  # (time, FindingClass, SentCase or None, verdict or None)
    for att in attributions:
        v = att.verdict
        if att.case_id is None:
            hits.append((v.onset, FindingClass.PROTOCOL_ERROR, None, v))
            continue
        s = by_id[att.case_id]
        o = obs.get(s.case_id)
        cls = classify_verdict(s, v.cls, calib, o.response if o is not None else None)
        if cls is not None:
            hits.append((s.send_time, cls, s, v))
    for s in sent:
        o = obs.get(s.case_id)
        cls = classify_response(s, o, calib, model) if o is not None else None
        if cls is not None:
            hits.append((s.send_time, cls, s, None))
    hits.sort(key=lambda h: (h[0], h[2].case_id if h[2] else -1, h[3] is None))

    findings: dict[tuple, Finding] = {}
    for _, cls, s, v in hits:
        if s is None:
            key = (cls, None, v.cls.value)
        else:
            key = (cls, s.case.template_id, _signature(s))
        f = findings.get(key)
        if f is None:
            expected = reference_response(s.case.template_id, calib, model) if s else None
            f = Finding(len(findings) + 1, cls, key[1], key[2], [], obs.get(s.case_id) if s else None, v,
                        _reproducer(s, expected) if s else None)
            findings[key] = f
        if s is not None and s.case_id not in f.case_ids:
            f.case_ids.append(s.case_id)
        if f.verdict is None and v is not None and s is not None and s.case_id == f.case_ref:
            f.verdict = v
    return CampaignReport(dict(header or {}, schema=REPORT_SCHEMA), list(sent), list(observations),
                          attributions, list(findings.values()), list(restarts), aborted)


def load_report(path) -> tuple[dict, list[Finding]]:
    header, findings = {}, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["type"] == "header":
            header = rec
            if rec.get("schema") != REPORT_SCHEMA:
                raise ValueError(f"unsupported report schema {rec.get('schema')!r}")
        elif rec["type"] == "finding":
            findings.append(Finding.from_dict(rec))
    return header, findings


_EXPECTED_VERDICT = {
    FindingClass.CRASH_STALL: VerdictClass.STALLED,
    FindingClass.REBOOT_TRIGGERED: VerdictClass.REBOOT_SIGNATURE,
    FindingClass.DELAY_ANOMALY: VerdictClass.DELAYED,
}


def verify_finding(finding: Finding, harness, model, settings: MonitorSettings = MonitorSettings(),
                   windows: int = 2, timeout: Optional[int] = None, warm_up: Optional[int] = None) -> bool:
    """Resend the reproducer and check the same evidence recurs within ``windows`` monitor windows.

    Verdict evidence needs an anomaly of the same class with onset after the
    send; response evidence needs the same response again.
    """
    rep = finding.reproducer
    if rep is None:
        return False
    want = finding.verdict.cls if finding.verdict is not None else _EXPECTED_VERDICT.get(finding.cls)
    clock = harness.clock
    monitor = None
    if want is not None:
        if harness.scope is None:
            raise ValueError("verdict evidence needs a monitor")
        monitor = LiveMonitor(harness.scope, clock, settings)
        try:
            monitor.warm_up(warm_up if warm_up is not None else 1000 * MS)
        except InsufficientData as exc:
            raise TargetUnreachable(f"no output signal: {exc}") from None
    timeout = timeout if timeout is not None else 500 * MS
    try:
        session = connect_and_handshake(harness.target, model, timeout, clock, verbatim=rep.verbatim_handshake)
    except (ConnectFailed, HandshakeError) as exc:
        raise TargetUnreachable(str(exc)) from None
    sent_at = clock.now()
    obs = observe(session, rep.wire(model, session.learned_token_values), 0, timeout, clock)
    session.close()
    if want is None:
        return obs.response is not None and obs.response == rep.expected_response
    deadline = sent_at + windows * monitor.window
    step = max(monitor.period // 2, 1)
    hit = False
    while not hit and clock.now() < deadline:
        clock.sleep(step)
        hit = any(a.cls is want and a.onset >= sent_at for a in monitor.poll())
    if not hit:
        hit = any(a.cls is want and a.onset >= sent_at for a in monitor.finish())
    return hit
