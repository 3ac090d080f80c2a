"""Output-signal monitoring.

The device toggles one output every half cycle; the monitor sees the resulting
edges as ``<timestamp_ns>,<H|L>`` records and classifies tumbling windows as
Normal, Delayed, Stalled, RebootSignature or InsufficientData.

All threshold comparisons are exact (Fraction arithmetic) so verdicts do not
change when every timestamp is shifted or scaled by an integer factor.
"""

from __future__ import annotations

import bisect
import enum
import math
import re
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, NamedTuple, Optional, Sequence, Union

RECORD_RE = re.compile(r"^([0-9]+),(H|L)\n$")


class Level(enum.Enum):
    LOW = "L"
    HIGH = "H"

    def toggled(self) -> "Level":
        return Level.HIGH if self is Level.LOW else Level.LOW


@dataclass(frozen=True, order=True)
class Edge:
    timestamp: int
    level: Level = field(compare=False)


class MalformedEdgeRecord(ValueError):
    pass


class InsufficientData(ValueError):
    pass


def parse_edge_record(line: str) -> Edge:
    m = RECORD_RE.match(line)
    if m is None:
        raise MalformedEdgeRecord(f"bad edge record {line!r}")
    return Edge(int(m.group(1)), Level(m.group(2)))


def format_edge(edge: Edge) -> str:
    return f"{edge.timestamp},{edge.level.value}\n"


@dataclass
class EdgeSeries:
    edges: list[Edge] = field(default_factory=list)
    malformed: int = 0
    rejected: int = 0

    def __len__(self):
        return len(self.edges)

    def __iter__(self):
        return iter(self.edges)

    def __getitem__(self, i):
        return self.edges[i]

    def append(self, edge: Edge) -> bool:
        """Add an edge if it keeps the series alternating and strictly increasing."""
        if self.edges:
            last = self.edges[-1]
            if edge.timestamp <= last.timestamp or edge.level is last.level:
                self.rejected += 1
                return False
        self.edges.append(edge)
        return True


def ingest_edges(records: Union[str, bytes, Iterable[str]], series: Optional[EdgeSeries] = None) -> EdgeSeries:
    """Parse edge records; bad or out-of-order records are skipped and counted."""
    series = series if series is not None else EdgeSeries()
    if isinstance(records, bytes):
        records = records.decode("ascii", errors="replace")
    if isinstance(records, str):
        records = records.splitlines(keepends=True)
    for line in records:
        if isinstance(line, bytes):
            line = line.decode("ascii", errors="replace")
        if not line:
            continue
        if not line.endswith("\n"):
            line += "\n"  # final record at end of stream
        try:
            edge = parse_edge_record(line)
        except MalformedEdgeRecord:
            series.malformed += 1
            continue
        series.append(edge)
    return series


@dataclass(frozen=True)
class SignalBaseline:
    period: int
    duty: float = 0.5
    jitter_tolerance: float = 0.2

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be positive")
        if not 0 < self.duty < 1:
            raise ValueError("duty must lie in (0, 1)")
        if not 0 < self.jitter_tolerance < 1:
            raise ValueError("jitter tolerance must lie in (0, 1)")


@dataclass(frozen=True)
class MonitorSettings:
    jitter_tolerance: float = 0.2
    stall_periods: float = 3
    reboot_min_periods: float = 2
    reboot_max_periods: float = 10
    window_periods: float = 10

    def __post_init__(self):
        if not 0 < self.jitter_tolerance < 1:
            raise ValueError("jitter_tolerance must lie in (0, 1)")
        if not 0 < self.reboot_min_periods <= self.reboot_max_periods:
            raise ValueError("need 0 < reboot_min_periods <= reboot_max_periods")
        if self.stall_periods <= 0 or self.window_periods <= 0:
            raise ValueError("stall_periods and window_periods must be positive")


def estimate_baseline(edges: Sequence[Edge], jitter_tolerance: float = 0.2) -> SignalBaseline:
    """Median rising-to-rising period and median high time."""
    edges = list(edges)
    if len(edges) < 8:
        raise InsufficientData(f"need at least 8 edges, got {len(edges)}")
    rises = [i for i, e in enumerate(edges) if e.level is Level.HIGH]
    periods = [edges[b].timestamp - edges[a].timestamp for a, b in zip(rises, rises[1:])]
    highs = [edges[i + 1].timestamp - edges[i].timestamp for i in rises if i + 1 < len(edges)]
    if not periods or not highs:
        raise InsufficientData("no complete cycle in edge series")
    period = round(statistics.median(periods))
    duty = statistics.median(highs) / period
    return SignalBaseline(period, min(max(duty, 1e-6), 1 - 1e-6), jitter_tolerance)


class VerdictClass(enum.Enum):
    NORMAL = "Normal"
    DELAYED = "Delayed"
    STALLED = "Stalled"
    REBOOT_SIGNATURE = "RebootSignature"
    INSUFFICIENT_DATA = "InsufficientData"

    @property
    def anomalous(self) -> bool:
        return self in (VerdictClass.DELAYED, VerdictClass.STALLED, VerdictClass.REBOOT_SIGNATURE)


_SEVERITY = {VerdictClass.STALLED: 3, VerdictClass.REBOOT_SIGNATURE: 2, VerdictClass.DELAYED: 1}


@dataclass(frozen=True)
class Verdict:
    """Classification of one window.

    ``detail`` is in periods: the largest timing deviation for Delayed, the
    silence length for Stalled and RebootSignature, 0 otherwise. ``onset`` is
    when the anomaly began (the first missed or late edge) and is what case
    attribution keys on.
    """

    window: tuple[int, int]
    cls: VerdictClass
    detail: float = 0.0
    onset: Optional[int] = None


@dataclass(frozen=True)
class Anomaly:
    cls: VerdictClass
    onset: int
    end: int
    magnitude: Fraction  # periods


@dataclass
class _Gap:
    onset: int
    end: int
    length: int
    expected: Fraction
    intervals: int = 0
    clean: bool = True


class SignalAnalyzer:
    """Single-pass anomaly detector over an edge stream.

    Feed edges in order; ``anomalies`` collects settled events. ``finish``
    closes the stream at an observation horizon.
    """

    def __init__(self, baseline: SignalBaseline, settings: MonitorSettings = MonitorSettings()):
        self.baseline = baseline
        self.settings = settings
        self.period = baseline.period
        self.duty = Fraction(baseline.duty)
        self.tolerance = Fraction(baseline.jitter_tolerance) * self.period
        self.reboot_min = Fraction(settings.reboot_min_periods) * self.period
        self.reboot_max = Fraction(settings.reboot_max_periods) * self.period
        self.stall = Fraction(settings.stall_periods) * self.period
        self.anomalies: list[Anomaly] = []
        self.last: Optional[Edge] = None
        self._delay: Optional[list] = None  # [onset, end, max deviation]
        self._gap: Optional[_Gap] = None

    def expected_after(self, level: Level) -> Fraction:
        high = self.duty * self.period
        return high if level is Level.HIGH else self.period - high

    def feed(self, edge: Edge) -> None:
        prev = self.last
        self.last = edge
        if prev is None:
            return
        gap = edge.timestamp - prev.timestamp
        expected = self.expected_after(prev.level)
        deviation = abs(gap - expected)
        if self._gap is not None and gap >= self.reboot_min and self._gap.intervals >= 1 and self._gap.clean:
            self._settle_gap()  # resumed cleanly, then a fresh silence: two events
        if self._gap is not None:
            g = self._gap
            g.intervals += 1
            g.clean = g.clean and deviation <= self.tolerance
            if g.intervals >= 2 or not g.clean:
                self._settle_gap()
            return
        if gap >= self.reboot_min:
            self._close_delay()
            onset = math.floor(prev.timestamp + expected)
            if gap > self.reboot_max:
                self.anomalies.append(Anomaly(VerdictClass.STALLED, onset, edge.timestamp,
                                              Fraction(gap, self.period)))
            else:
                self._gap = _Gap(onset, edge.timestamp, gap, expected)
        elif deviation > self.tolerance:
            onset = min(edge.timestamp, math.floor(prev.timestamp + expected))
            dev = deviation / self.period
            if self._delay is None:
                self._delay = [onset, edge.timestamp, dev]
            else:
                self._delay[1] = edge.timestamp
                self._delay[2] = max(self._delay[2], dev)
        else:
            self._close_delay()

    def _close_delay(self) -> None:
        if self._delay is not None:
            onset, end, dev = self._delay
            self.anomalies.append(Anomaly(VerdictClass.DELAYED, onset, end, dev))
            self._delay = None

    def _settle_gap(self) -> None:
        g = self._gap
        self._gap = None
        if g.clean and g.intervals >= 1:
            cls, mag = VerdictClass.REBOOT_SIGNATURE, Fraction(g.length, self.period)
        elif g.length > self.stall:
            cls, mag = VerdictClass.STALLED, Fraction(g.length, self.period)
        else:
            cls, mag = VerdictClass.DELAYED, (g.length - g.expected) / self.period
        self.anomalies.append(Anomaly(cls, g.onset, g.end, mag))

    def silence(self, now: int) -> int:
        """Time since the last edge (0 before any edge)."""
        return 0 if self.last is None else now - self.last.timestamp

    def finish(self, end_time: Optional[int] = None) -> list[Anomaly]:
        self._close_delay()
        if self._gap is not None:
            self._settle_gap()
        if end_time is not None and self.last is not None:
            tail = end_time - self.last.timestamp
            if tail > self.stall:
                onset = math.floor(self.last.timestamp + self.expected_after(self.last.level))
                self.anomalies.append(Anomaly(VerdictClass.STALLED, onset, end_time,
                                              Fraction(tail, self.period)))
        return self.anomalies


def find_anomalies(edges: Sequence[Edge], baseline: SignalBaseline, settings: MonitorSettings = MonitorSettings(),
                   end_time: Optional[int] = None) -> list[Anomaly]:
    analyzer = SignalAnalyzer(baseline, settings)
    for e in edges:
        analyzer.feed(e)
    return analyzer.finish(end_time)


def classify(edges: Sequence[Edge], baseline: SignalBaseline, window: Optional[int] = None,
             end_time: Optional[int] = None, settings: Optional[MonitorSettings] = None) -> list[Verdict]:
    """Tumbling-window verdicts over an edge series.

    Windows start at the first edge and are ``window`` ns long (default
    ``window_periods`` baseline periods). ``end_time`` is the observation
    horizon; silence between the last edge and it counts. A trailing partial
    window with fewer than two edges and no anomaly is not reported.
    """
    edges = list(edges)
    if not edges:
        return []
    if settings is None:
        settings = MonitorSettings(jitter_tolerance=baseline.jitter_tolerance)
    if window is None:
        window = math.ceil(Fraction(settings.window_periods) * baseline.period)
    if window <= 0:
        raise ValueError("window must be positive")
    anomalies = find_anomalies(edges, baseline, settings, end_time)
    origin = edges[0].timestamp
    end = max(edges[-1].timestamp, end_time if end_time is not None else origin)
    stamps = [e.timestamp for e in edges]
    count = (end - origin) // window + 1
    verdicts = []
    for k in range(count):
        ws, we = origin + k * window, origin + (k + 1) * window
        n_edges = bisect.bisect_left(stamps, we) - bisect.bisect_left(stamps, ws)
        hits = [a for a in anomalies if a.onset < we and a.end >= ws]
        if hits:
            top = max(_SEVERITY[a.cls] for a in hits)
            chosen = [a for a in hits if _SEVERITY[a.cls] == top]
            first = min(chosen, key=lambda a: a.onset)
            detail = float(max(a.magnitude for a in chosen))
            verdicts.append(Verdict((ws, we), first.cls, detail, first.onset))
        elif n_edges < 2:
            if we > end:
                continue
            verdicts.append(Verdict((ws, we), VerdictClass.INSUFFICIENT_DATA))
        else:
            verdicts.append(Verdict((ws, we), VerdictClass.NORMAL))
    return verdicts


class Attribution(NamedTuple):
    case_id: Optional[int]
    verdict: Verdict
    ambiguity: Optional[int]  # ns between the attributed case and the one before it


def correlate(verdicts: Sequence[Verdict], cases: Sequence[tuple[int, int]]) -> list[Attribution]:
    """Attribute each anomalous verdict to the latest case sent at or before its onset."""
    times = [t for _, t in cases]
    out = []
    for v in verdicts:
        if not v.cls.anomalous:
            continue
        start = v.onset if v.onset is not None else v.window[0]
        i = bisect.bisect_right(times, start) - 1
        if i < 0:
            out.append(Attribution(None, v, None))
            continue
        ambiguity = times[i] - times[i - 1] if i > 0 else None
        out.append(Attribution(cases[i][0], v, ambiguity))
    return out


class LiveMonitor:
    """Polls an edge source and runs a :class:`SignalAnalyzer` incrementally.

    ``scope`` needs a ``poll()`` returning new edges; ``clock`` supplies now.
    A silence longer than the reboot bound is reported as Stalled as soon as it
    is observed, and sets ``stalled`` so the caller can restart the target.
    """

    def __init__(self, scope, clock, settings: MonitorSettings = MonitorSettings()):
        self.scope = scope
        self.clock = clock
        self.settings = settings
        self.series = EdgeSeries()
        self.baseline: Optional[SignalBaseline] = None
        self.analyzer: Optional[SignalAnalyzer] = None
        self.anomalies: list[Anomaly] = []
        self.stalled = False
        self._seen = 0

    @property
    def period(self) -> int:
        return self.baseline.period

    @property
    def window(self) -> int:
        return math.ceil(Fraction(self.settings.window_periods) * self.period)

    def warm_up(self, duration: int, attempts: int = 5) -> SignalBaseline:
        """Collect edges until a baseline can be estimated."""
        for _ in range(attempts):
            self.clock.sleep(duration)
            self._ingest()
            try:
                self.baseline = estimate_baseline(self.series.edges, self.settings.jitter_tolerance)
                break
            except InsufficientData:
                continue
        else:
            raise InsufficientData(f"only {len(self.series)} edges after warm-up")
        self._rearm()
        for e in self.series.edges:
            self.analyzer.feed(e)
        return self.baseline

    def _rearm(self) -> None:
        self.analyzer = SignalAnalyzer(self.baseline, self.settings)
        self._seen = 0
        self.stalled = False

    def _ingest(self) -> list[Edge]:
        fresh = []
        for e in self.scope.poll():
            if self.series.append(e):
                fresh.append(e)
        return fresh

    def poll(self) -> list[Anomaly]:
        """New settled anomalies since the previous call."""
        fresh = self._ingest()
        if self.stalled and fresh:
            self._rearm()
        a = self.analyzer
        for e in fresh:
            a.feed(e)
        now = self.clock.now()
        if not self.stalled and a.last is not None and a.silence(now) > a.reboot_max:
            last = a.last
            a.finish()
            onset = math.floor(last.timestamp + a.expected_after(last.level))
            a.anomalies.append(Anomaly(VerdictClass.STALLED, onset, now,
                                       Fraction(now - last.timestamp, self.period)))
            self.stalled = True
        out = a.anomalies[self._seen:]
        self._seen = len(a.anomalies)
        self.anomalies.extend(out)
        return out

    def target_restarted(self) -> None:
        """Forget the pre-restart signal so the restart gap is not analyzed."""
        self._ingest()
        self._rearm()

    def finish(self) -> list[Anomaly]:
        out = self.poll()
        if not self.stalled:
            a = self.analyzer
            a.finish(self.clock.now())
            tail = a.anomalies[self._seen:]
            self._seen = len(a.anomalies)
            self.anomalies.extend(tail)
            out += tail
        return out


def anomaly_verdict(a: Anomaly) -> Verdict:
    return Verdict((a.onset, a.end), a.cls, float(a.magnitude), a.onset)
