"""plcfuzz command line: analyze, fuzz, mock-device, replay, record, report.

Exit codes: 0 success (fuzz: no findings), 1 findings or failed verification
or runtime error, 2 usage error or aborted campaign.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .campaign import AbortedTargetUnreachable, run_campaign
from .capture import MalformedCapture, read_capture, reassemble, segment_messages
from .clock import MS
from .config import ConfigError, GlobalConfig, describe_keys, load_config, override
from .events import Origin, SentCase
from .fuzz import HandshakeError, connect_and_handshake, recorded_handshake, replay
from .harness import MOCK_TARGET, MockHarness, TcpHarness
from .inference import NotEnoughSessions, StructureMismatch, analyze_sessions, as_fraction
from .mockdevice.protocol import DeviceConfig
from .mockdevice.recorder import record_capture
from .mockdevice.server import MockDeviceServer
from .model import ProtocolModel
from .monitor import InsufficientData, LiveMonitor, MonitorSettings, anomaly_verdict
from .mutate import FuzzCase, plain_case
from .report import TargetUnreachable, build_report, load_report, verify_finding
from .transport import ConnectFailed

log = logging.getLogger("plcfuzz")

EXIT_OK, EXIT_FINDINGS, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plcfuzz", description="Fuzz proprietary TCP PLC protocols learned from "
                                "captures, with an output-signal monitor and a mock target.",
                                epilog=describe_keys(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"plcfuzz {__version__}")
    p.add_argument("--config", help="YAML config file; command-line flags override it")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="subcommand", required=True)

    a = sub.add_parser("analyze", help="learn a protocol model from captures")
    a.add_argument("--pcap", nargs="+", help="capture files")
    a.add_argument("--out", help="model JSON to write")
    a.add_argument("--handshake-len", type=int)
    a.add_argument("--threshold", type=float)
    a.add_argument("--server-port", type=int)

    f = sub.add_parser("fuzz", help="run a fuzzing campaign")
    f.add_argument("--model")
    f.add_argument("--target", help="ip:port or 'mock'")
    f.add_argument("--budget", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--monitor", help="ip:port of the edge stream")
    f.add_argument("--no-monitor", action="store_true", default=None)
    f.add_argument("--report", help="output directory")
    f.add_argument("--stop-on-first-finding", action="store_true", default=None)
    f.add_argument("--vulns", help="mock target only: V1..V4 list, 'all' or 'none'")

    m = sub.add_parser("mock-device", help="serve the mock PLC until interrupted")
    m.add_argument("--host")
    m.add_argument("--port", type=int)
    m.add_argument("--scope-port", type=int)
    m.add_argument("--token", type=lambda s: int(s, 0))
    m.add_argument("--vulns")

    r = sub.add_parser("replay", help="send one command, a capture or a finding's reproducer")
    r.add_argument("--model")
    r.add_argument("--target")
    how = r.add_mutually_exclusive_group()
    how.add_argument("--command")
    how.add_argument("--pcap")
    how.add_argument("--finding", type=int, help="finding id from --report")
    r.add_argument("--report", help="report.ndjson (with --finding)")
    r.add_argument("--handshake-only", action="store_true", default=None)
    r.add_argument("--monitor")
    r.add_argument("--vulns", help="mock target only")

    c = sub.add_parser("record", help="record IDE sessions against the mock device into a pcap")
    c.add_argument("--out")
    c.add_argument("--sessions", type=int)
    c.add_argument("--token", type=lambda s: int(s, 0))
    c.add_argument("--vulns")

    s = sub.add_parser("report", help="print a campaign report, optionally re-verifying findings")
    s.add_argument("--input")
    s.add_argument("--verify", action="store_true", default=None)
    s.add_argument("--model")
    s.add_argument("--target")
    s.add_argument("--monitor")
    s.add_argument("--vulns", help="mock target only")
    return p


def _device(cfg: GlobalConfig, vulns=None, token=None, **extra) -> DeviceConfig:
    return override(cfg.mock_device, vulnerabilities=vulns, token=token, **extra)


def _harness(target: str, monitor: Optional[str], device: DeviceConfig, port: int):
    if target == MOCK_TARGET:
        return MockHarness(device)
    return TcpHarness(target, monitor, port)


def _load_model(path: Optional[str]) -> ProtocolModel:
    if not path:
        raise UsageError("a model is required (--model)")
    return ProtocolModel.load(path)


def cmd_analyze(args, cfg: GlobalConfig) -> int:
    a = override(cfg.analyze, pcap=args.pcap, out=args.out, handshake_len=args.handshake_len,
                 threshold=args.threshold, server_port=args.server_port)
    if not a.pcap:
        raise UsageError("analyze needs at least one --pcap")
    if not a.out:
        raise UsageError("analyze needs --out")
    sessions = []
    for path in a.pcap:
        try:
            sessions.extend(reassemble(read_capture(Path(path).read_bytes())))
        except MalformedCapture as exc:
            raise MalformedCapture(f"{path}: {exc.detail}", exc.offset) from None
    model = analyze_sessions(sessions, a.handshake_len, as_fraction(a.threshold), a.server_port)
    model.save(a.out)
    print(f"model written to {a.out}")
    f = model.framing
    print(f"server port {model.server_port}; length field "
          + (f"offset {f.offset} width {f.width} {f.byteorder}" if f else "none"))
    for k, step in enumerate(model.handshake):
        print(f"handshake/{k} {step.direction.value} {len(step.template)}B mask {step.mask}")
    for n, tok in enumerate(model.tokens):
        echoes = ", ".join(f"{r}@{o}" for r, o in tok.echoes)
        print(f"token {n}: handshake/{tok.source_step}@{tok.source_offset} width {tok.width} -> {echoes}")
    for cmd in model.commands:
        print(f"{cmd.id} {len(cmd.template)}B mask {cmd.mask}")
    if model.unexplained:
        print("unexplained variable bytes: " + ", ".join(f"{r}@{o}" for r, o in model.unexplained))
    return EXIT_OK


def cmd_fuzz(args, cfg: GlobalConfig) -> int:
    try:
        c = override(cfg.fuzz, model=args.model, target=args.target, budget=args.budget, seed=args.seed,
                     monitor=args.monitor, no_monitor=args.no_monitor, report=args.report,
                     stop_on_first_finding=args.stop_on_first_finding)
        device = _device(cfg, args.vulns)
        model = _load_model(c.model)
        if c.target != MOCK_TARGET and not c.monitor and not c.no_monitor:
            raise UsageError("TCP targets need --monitor or --no-monitor")
    except (ConfigError, UsageError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        harness = _harness(c.target, c.monitor, device, model.server_port)
    except (ConnectFailed, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = run_campaign(c, model, harness)
    except AbortedTargetUnreachable as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        if exc.report is not None:
            _emit(exc.report, c.report)
        return EXIT_USAGE
    finally:
        harness.close()
    _emit(report, c.report)
    return EXIT_FINDINGS if report.findings else EXIT_OK


def _emit(report, directory: Optional[str]) -> None:
    if directory:
        records, summary = report.write(directory)
        print(f"report: {records}  summary: {summary}")
    print(report.summary(), end="")


def cmd_mock_device(args, cfg: GlobalConfig) -> int:
    device = _device(cfg, args.vulns, args.token, host=args.host, listen_port=args.port,
                     scope_port=args.scope_port)
    server = MockDeviceServer(device)
    try:
        server.start()
    except OSError as exc:
        print(f"error: cannot bind ports {device.listen_port}/{device.scope_port}: {exc}", file=sys.stderr)
        return EXIT_FINDINGS
    print(f"mock device listening on {device.host}:{server.port}, edges on {server.scope_port}", flush=True)
    done = threading.Event()
    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, lambda *_: done.set())
    try:
        while not done.wait(0.2):
            pass
    finally:
        server.stop()
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    print("mock device stopped", flush=True)
    return EXIT_OK


def _watch(monitor: Optional[LiveMonitor], clock, since: int, windows: int) -> list:
    if monitor is None:
        return []
    deadline = since + windows * monitor.window
    while clock.now() < deadline:
        clock.sleep(max(monitor.period // 2, 1))
        monitor.poll()
    monitor.finish()
    return [anomaly_verdict(a) for a in monitor.anomalies if a.onset >= since]


def cmd_replay(args, cfg: GlobalConfig) -> int:
    r = override(cfg.replay, model=args.model, target=args.target, command=args.command, pcap=args.pcap,
                 report=args.report, finding=args.finding, handshake_only=args.handshake_only,
                 monitor=args.monitor)
    model = _load_model(r.model)
    chosen = [x for x in (r.command, r.pcap, r.finding) if x is not None]
    if len(chosen) > 1:
        raise UsageError("choose one of --command, --pcap, --finding")
    if not chosen and not r.handshake_only:
        raise UsageError("replay needs --command, --pcap, --finding or --handshake-only")
    if r.command is not None:
        try:
            template = model.command(r.command)
        except KeyError:
            raise UsageError(f"unknown command id {r.command!r} (model has "
                             f"{', '.join(c.id for c in model.commands) or 'none'})") from None
    device = _device(cfg, args.vulns)
    harness = _harness(r.target, r.monitor, device, model.server_port)
    timeout = int(r.timeout_ms * MS)
    clock = harness.clock
    try:
        if r.finding is not None:
            if not r.report:
                raise UsageError("--finding needs --report")
            _, findings = load_report(r.report)
            match = [f for f in findings if f.finding_id == r.finding]
            if not match:
                raise UsageError(f"no finding {r.finding} in {r.report}")
            ok = verify_finding(match[0], harness, model, windows=r.watch_windows, timeout=timeout)
            print(f"finding {r.finding} ({match[0].cls.value}): {'confirmed' if ok else 'not confirmed'}")
            return EXIT_OK if ok else EXIT_FINDINGS
        monitor = None
        if harness.scope is not None and not r.handshake_only:
            monitor = LiveMonitor(harness.scope, clock, MonitorSettings())
            monitor.warm_up(1000 * MS)
        if r.pcap is not None:
            sessions = [s for s in reassemble(read_capture(Path(r.pcap).read_bytes()))
                        if s.server[1] == model.server_port]
            if not sessions:
                raise UsageError(f"{r.pcap} has no session on port {model.server_port}")
            live_model, messages = recorded_handshake(model, segment_messages(sessions[0], model.framing))
            session = connect_and_handshake(harness.target, live_model, timeout, clock, verbatim=True)
            origin, refs = Origin.REPLAY, None
        else:
            session = connect_and_handshake(harness.target, model, timeout, clock)
            messages = [] if r.handshake_only else [template.template]
            origin, refs = Origin.FUZZ, ([] if r.handshake_only else [template.id])
        print(f"session {session.state.value}; learned tokens "
              + (", ".join(f"{i}={v.hex()}" for i, v in sorted(session.learned_token_values.items())) or "none"))
        if r.handshake_only:
            session.close()
            return EXIT_OK
        start = clock.now()
        observations = replay(session, messages, timeout, clock, model if refs else None, refs)
        session.close()
        for i, o in enumerate(observations):
            resp = o.response.hex() if o.response is not None else "-"
            print(f"message {i}: {o.tcp_event.value} latency {o.latency / 1e6:.1f} ms response {resp}")
        verdicts = _watch(monitor, clock, start, r.watch_windows)
        for v in verdicts:
            print(f"verdict {v.cls.value} at {v.onset} ({v.detail:.2f} periods)")
        if origin is Origin.FUZZ:
            cases = [plain_case(0, template)]
        else:
            cases = [FuzzCase(i, f"capture/{i}", (), m, 0) for i, m in enumerate(messages)]
        sent = [SentCase(c, origin, start, m, False) for c, m in zip(cases, messages)]
        report = build_report(sent, observations, verdicts, {"target": r.target}, model)
        for f in report.findings:
            print(f"outcome: {f.cls.value}")
        if not verdicts:
            print("outcome: no anomaly observed" if monitor else "outcome: no monitor attached")
        return EXIT_OK
    finally:
        harness.close()


def cmd_record(args, cfg: GlobalConfig) -> int:
    rc = override(cfg.record, out=args.out, sessions=args.sessions)
    if not rc.out:
        raise UsageError("record needs --out")
    device = _device(cfg, args.vulns, args.token)
    data = record_capture(device, rc.sessions, client_port=rc.client_port)
    Path(rc.out).write_bytes(data)
    print(f"wrote {rc.sessions} session(s), token {device.token:#04x}, to {rc.out}")
    return EXIT_OK


def cmd_report(args, cfg: GlobalConfig) -> int:
    rp = override(cfg.report, input=args.input, verify=args.verify, model=args.model, target=args.target,
                  monitor=args.monitor)
    if not rp.input:
        raise UsageError("report needs --input")
    header, findings = load_report(rp.input)
    print(f"report schema {header.get('schema')} seed {header.get('seed')} target {header.get('target')}")
    print(f"findings: {len(findings)}")
    for f in findings:
        print(f"#{f.finding_id} {f.cls.value} template={f.template_id} via={f.signature} cases={f.occurrences}")
    if not rp.verify:
        return EXIT_OK
    model = _load_model(rp.model)
    device = _device(cfg, args.vulns)
    failed = 0
    for f in findings:
        if f.reproducer is None:
            print(f"#{f.finding_id}: no reproducer")
            continue
        harness = _harness(rp.target, rp.monitor, device, model.server_port)
        try:
            ok = verify_finding(f, harness, model)
        finally:
            harness.close()
        failed += not ok
        print(f"#{f.finding_id}: {'confirmed' if ok else 'not confirmed'}")
    return EXIT_FINDINGS if failed else EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "fuzz": cmd_fuzz, "mock-device": cmd_mock_device, "replay": cmd_replay,
            "record": cmd_record, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else GlobalConfig()
        return COMMANDS[args.subcommand](args, cfg)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    except MalformedCapture as exc:
        print(f"error: malformed capture: {exc}", file=sys.stderr)
    except (NotEnoughSessions, StructureMismatch, InsufficientData, HandshakeError, ConnectFailed,
            TargetUnreachable, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_FINDINGS


if __name__ == "__main__":
    sys.exit(main())
