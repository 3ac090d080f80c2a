"""The fuzzing campaign: calibrate, replay, fuzz, monitor, report.

One logical sender. The monitor is polled between sends and while waiting for
the target, so edge ingestion interleaves with sending by timestamp; with a
virtual clock the whole run is deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .clock import MS
from .events import NetworkObservation, Origin, SentCase, TcpEvent
from .fuzz import HandshakeError, SessionHandle, SessionState, connect_and_handshake, observe
from .harness import MOCK_TARGET, MockHarness, TcpHarness
from .model import ProtocolModel
from .monitor import (Anomaly, InsufficientData, LiveMonitor, MonitorSettings, Verdict, VerdictClass,
                      anomaly_verdict)
from .mutate import FuzzCase, campaign_cases, parse_weights, plain_case
from .report import CampaignReport, build_report
from .transport import ConnectFailed

log = logging.getLogger(__name__)


class AbortedTargetUnreachable(RuntimeError):
    def __init__(self, message: str, report: Optional[CampaignReport] = None):
        super().__init__(message)
        self.report = report


def _ms(value: float) -> int:
    return int(round(value * MS))


@dataclass(frozen=True)
class CampaignConfig:
    target: str = field(default="mock", metadata={"help": "ip:port of the device, or 'mock' for the in-process "
                                                           "mock device on a virtual clock"})
    model: Optional[str] = field(default=None, metadata={"help": "path of the protocol model JSON"})
    seed: int = field(default=0, metadata={"help": "64-bit campaign seed; all randomness derives from it"})
    budget: int = field(default=1000, metadata={"help": "number of fuzz cases (>= 1)"})
    connect_timeout_ms: float = field(default=1000, metadata={"help": "TCP connect timeout"})
    response_timeout_ms: float = field(default=500, metadata={"help": "wait for each response"})
    inter_case_delay_ms: float = field(default=50, metadata={"help": "pause after each case"})
    retry_delay_ms: float = field(default=100, metadata={"help": "pause between failed connection attempts"})
    max_connect_failures: int = field(default=50, metadata={"help": "consecutive failed connections before "
                                                                    "the campaign aborts"})
    weights: dict = field(default_factory=dict, metadata={"help": "strategy name -> weight overrides"})
    templates: tuple = field(default=(), metadata={"help": "command template ids to fuzz (default: all)"})
    monitor: Optional[str] = field(default=None, metadata={"help": "ip:port of the edge stream (TCP targets)"})
    no_monitor: bool = field(default=False, metadata={"help": "run without a monitor; outages become verdicts"})
    warmup_ms: float = field(default=1000, metadata={"help": "edge collection before the baseline estimate"})
    jitter_tolerance: float = field(default=0.2, metadata={"help": "allowed edge deviation, fraction of a period"})
    stop_on_first_finding: bool = field(default=False, metadata={"help": "stop at the first finding"})
    reuse_session: bool = field(default=False, metadata={"help": "keep one session across cases while it lives"})
    calibrate: bool = field(default=True, metadata={"help": "send each command unmutated first to learn "
                                                            "its normal effect"})
    replay_phase: bool = field(default=True, metadata={"help": "replay recorded commands verbatim, handshake "
                                                               "included, before fuzzing"})
    report: Optional[str] = field(default=None, metadata={"help": "directory for report.ndjson and summary.txt"})

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.max_connect_failures < 1:
            raise ValueError("max_connect_failures must be at least 1")
        for name in ("connect_timeout_ms", "response_timeout_ms", "warmup_ms"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("inter_case_delay_ms", "retry_delay_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        parse_weights(self.weights)
        object.__setattr__(self, "templates", tuple(self.templates))

    @property
    def monitor_settings(self) -> MonitorSettings:
        return MonitorSettings(jitter_tolerance=self.jitter_tolerance)


class Campaign:
    def __init__(self, config: CampaignConfig, model: ProtocolModel, harness):
        self.config = config
        self.model = model
        self.harness = harness
        self.clock = harness.clock
        self.weights = parse_weights(config.weights)
        self.sent: list[SentCase] = []
        self.observations: list[NetworkObservation] = []
        self.verdicts: list[Verdict] = []
        self.restarts: list[int] = []
        self.session: Optional[SessionHandle] = None
        self.failures = 0
        self.outage_start: Optional[int] = None
        self.next_id = 0
        self.monitor: Optional[LiveMonitor] = None
        if not config.no_monitor:
            if harness.scope is None:
                raise ValueError("no monitor configured: give a monitor address or set no_monitor")
            self.monitor = LiveMonitor(harness.scope, self.clock, config.monitor_settings)

    # -- helpers --------------------------------------------------------------

    def _header(self) -> dict:
        c = self.config
        return {"seed": c.seed, "budget": c.budget, "target": c.target, "model_path": c.model,
                "monitor": None if self.monitor is None else (c.monitor or "builtin"),
                "templates": [t.id for t in self.model.commands]}

    def report(self, aborted: Optional[str] = None) -> CampaignReport:
        return build_report(self.sent, self.observations, self.verdicts, self._header(), self.model,
                            self.restarts, aborted)

    def _record_anomalies(self, anomalies: list[Anomaly]) -> None:
        self.verdicts.extend(anomaly_verdict(a) for a in anomalies)

    def _poll(self) -> None:
        if self.monitor is None:
            return
        self._record_anomalies(self.monitor.poll())
        if self.monitor.stalled and self.harness.can_restart:
            self._restart()

    def _restart(self) -> None:
        log.info("restarting target at %d", self.clock.now())
        self.harness.restart()
        self.restarts.append(self.clock.now())
        if self.monitor is not None:
            self.monitor.target_restarted()
        self.failures = 0

    def _outage_verdict(self, cls: VerdictClass) -> None:
        """Monitor-less stand-in: an outage becomes a verdict starting at the first failed attempt."""
        start, now = self.outage_start, self.clock.now()
        self.verdicts.append(Verdict((start, now), cls, (now - start) / 1e9, start))
        self.outage_start = None

    def _establish(self, verbatim: bool) -> SessionHandle:
        c = self.config
        while True:
            try:
                session = connect_and_handshake(self.harness.target, self.model, _ms(c.connect_timeout_ms),
                                                self.clock, verbatim=verbatim)
            except (ConnectFailed, HandshakeError) as exc:
                log.debug("session attempt failed: %s", exc)
                self.failures += 1
                if self.outage_start is None:
                    self.outage_start = self.clock.now()
                if self.failures >= c.max_connect_failures:
                    if self.monitor is None and self.harness.can_restart:
                        self._outage_verdict(VerdictClass.STALLED)
                        self._restart()
                        continue
                    raise AbortedTargetUnreachable(
                        f"{self.failures} consecutive failed connections to {self.harness.target}: {exc}")
                self.clock.sleep(_ms(c.retry_delay_ms))
                self._poll()
                continue
            if self.monitor is None and self.outage_start is not None and self.failures:
                self._outage_verdict(VerdictClass.REBOOT_SIGNATURE)
            self.failures = 0
            self.outage_start = None
            return session

    def _send(self, case: FuzzCase, origin: Origin) -> tuple[SentCase, NetworkObservation]:
        c = self.config
        reuse = c.reuse_session and origin is Origin.FUZZ
        if reuse and self.session is not None and self.session.state is SessionState.HANDSHAKE_DONE:
            session = self.session
        else:
            session = self._establish(verbatim=origin is Origin.REPLAY)
        learned = session.learned_token_values
        if origin is Origin.REPLAY:
            wire = case.bytes
        else:
            wire = case.wire_bytes(self.model, learned)
        tampered = any(ti in learned and wire[off:off + w] != learned[ti]
                       for ti, off, w in self.model.echo_sites(case.template_id) if off + w <= len(wire))
        sent = SentCase(case, origin, self.clock.now(), wire, tampered)
        obs = observe(session, wire, case.case_id, _ms(c.response_timeout_ms), self.clock)
        self.sent.append(sent)
        self.observations.append(obs)
        if reuse and obs.tcp_event is TcpEvent.RESPONSE_RECEIVED:
            self.session = session
        else:
            session.close()
            self.session = None
        self.clock.sleep(_ms(c.inter_case_delay_ms))
        self._poll()
        return sent, obs

    def _has_finding(self) -> bool:
        return bool(self.report().findings)

    def _settle(self) -> None:
        """Give the last case time to show an effect, then close the monitor."""
        if self.session is not None:
            self.session.close()
            self.session = None
        if self.monitor is None:
            return
        horizon = self.clock.now() + Fraction(self.config.monitor_settings.reboot_max_periods + 3) * self.monitor.period
        step = max(self.monitor.period // 2, 1)
        while self.clock.now() < horizon:
            self.clock.sleep(step)
            self._poll()
        self._record_anomalies(self.monitor.finish())

    # -- phases -----------------------------------------------------------------

    def run(self) -> CampaignReport:
        c = self.config
        try:
            if self.monitor is not None:
                try:
                    self.monitor.warm_up(_ms(c.warmup_ms))
                except InsufficientData as exc:
                    raise AbortedTargetUnreachable(f"no output signal from the target: {exc}") from None
            templates = [self.model.command(t) for t in c.templates] if c.templates else list(self.model.commands)
            if c.calibrate:
                for t in templates:
                    self._send(plain_case(self._take_id(), t), Origin.CALIBRATION)
            if c.replay_phase:
                for t in templates:
                    self._send(plain_case(self._take_id(), t), Origin.REPLAY)
            cases = campaign_cases(self.model, c.budget, c.seed, self.weights, first_id=self.next_id,
                                   template_ids=[t.id for t in templates])
            for case in cases:
                self._send(case, Origin.FUZZ)
                if c.stop_on_first_finding and self._has_finding():
                    break
            self._settle()
        except AbortedTargetUnreachable as exc:
            if self.monitor is not None and self.monitor.analyzer is not None:
                self._record_anomalies(self.monitor.finish())
            elif self.outage_start is not None and self.sent:
                # a target that never answered is not an outage we caused
                self._outage_verdict(VerdictClass.STALLED)
            exc.report = self.report(aborted=str(exc))
            raise
        return self.report()

    def _take_id(self) -> int:
        self.next_id += 1
        return self.next_id - 1


def run_campaign(config: CampaignConfig, model: Optional[ProtocolModel] = None, harness=None) -> CampaignReport:
    """Run a campaign. ``harness`` defaults to the one named by ``config.target``."""
    if model is None:
        if config.model is None:
            raise ValueError("campaign needs a model")
        model = ProtocolModel.load(config.model)
    if not model.commands:
        raise ValueError("model has no command templates")
    own = harness is None
    if own:
        harness = MockHarness() if config.target == MOCK_TARGET else TcpHarness(config.target, config.monitor,
                                                                                model.server_port)
    try:
        return Campaign(config, model, harness).run()
    finally:
        if own:
            harness.close()
