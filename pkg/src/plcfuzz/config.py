"""YAML configuration: one section per subcommand, validated before any action.

Every section is a dataclass whose field metadata carries the help text, so
the CLI help can list every key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .campaign import CampaignConfig
from .inference import DEFAULT_HANDSHAKE_LEN
from .mockdevice.protocol import DeviceConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnalyzeConfig:
    pcap: tuple = field(default=(), metadata={"help": "capture files (pcap or pcap-ng) to learn from"})
    out: Optional[str] = field(default=None, metadata={"help": "where to write the model JSON"})
    handshake_len: int = field(default=DEFAULT_HANDSHAKE_LEN, metadata={"help": "messages in the handshake prefix"})
    threshold: float = field(default=0.9, metadata={"help": "similarity threshold for command clustering"})
    server_port: Optional[int] = field(default=None, metadata={"help": "protocol port (default: most common)"})

    def __post_init__(self):
        object.__setattr__(self, "pcap", tuple(self.pcap))
        if self.handshake_len < 1:
            raise ValueError("handshake_len must be at least 1")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")


@dataclass(frozen=True)
class ReplayConfig:
    model: Optional[str] = field(default=None, metadata={"help": "protocol model JSON"})
    target: str = field(default="mock", metadata={"help": "ip:port, or 'mock' for the in-process device"})
    command: Optional[str] = field(default=None, metadata={"help": "command template id to send"})
    pcap: Optional[str] = field(default=None, metadata={"help": "capture whose first session is replayed verbatim"})
    report: Optional[str] = field(default=None, metadata={"help": "report.ndjson holding the finding to replay"})
    finding: Optional[int] = field(default=None, metadata={"help": "finding id inside that report"})
    handshake_only: bool = field(default=False, metadata={"help": "stop after the handshake"})
    monitor: Optional[str] = field(default=None, metadata={"help": "ip:port of the edge stream (TCP targets)"})
    timeout_ms: float = field(default=500, metadata={"help": "connect and response timeout"})
    watch_windows: int = field(default=2, metadata={"help": "monitor windows to watch after sending"})

    def __post_init__(self):
        if self.timeout_ms <= 0 or self.watch_windows < 1:
            raise ValueError("timeout_ms and watch_windows must be positive")


@dataclass(frozen=True)
class ReportConfig:
    input: Optional[str] = field(default=None, metadata={"help": "report.ndjson to read"})
    verify: bool = field(default=False, metadata={"help": "re-run every finding's reproducer"})
    model: Optional[str] = field(default=None, metadata={"help": "protocol model JSON, needed to verify"})
    target: str = field(default="mock", metadata={"help": "where to verify: ip:port or 'mock'"})
    monitor: Optional[str] = field(default=None, metadata={"help": "edge stream for verification on TCP targets"})


@dataclass(frozen=True)
class RecordConfig:
    out: Optional[str] = field(default=None, metadata={"help": "capture file to write"})
    sessions: int = field(default=1, metadata={"help": "recorded IDE sessions in the capture"})
    client_port: int = field(default=49152, metadata={"help": "first client port"})

    def __post_init__(self):
        if self.sessions < 1:
            raise ValueError("sessions must be at least 1")


SECTIONS: dict[str, type] = {
    "analyze": AnalyzeConfig,
    "fuzz": CampaignConfig,
    "mock-device": DeviceConfig,
    "replay": ReplayConfig,
    "report": ReportConfig,
    "record": RecordConfig,
}


@dataclass(frozen=True)
class GlobalConfig:
    analyze: AnalyzeConfig = field(default_factory=AnalyzeConfig)
    fuzz: CampaignConfig = field(default_factory=CampaignConfig)
    mock_device: DeviceConfig = field(default_factory=DeviceConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    record: RecordConfig = field(default_factory=RecordConfig)

    def section(self, name: str):
        return getattr(self, name.replace("-", "_"))


def build_section(name: str, values: Mapping[str, Any]):
    cls = SECTIONS[name]
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def parse_config(doc: Optional[Mapping]) -> GlobalConfig:
    doc = doc or {}
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a mapping of sections")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    built = {}
    for name, values in doc.items():
        if values is None:
            values = {}
        if not isinstance(values, Mapping):
            raise ConfigError(f"section {name} must be a mapping")
        built[name.replace("-", "_")] = build_section(name, values)
    return GlobalConfig(**built)


def load_config(path) -> GlobalConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc)


def section_values(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def override(obj, **changes):
    """Rebuild a section with the non-None ``changes`` applied (and re-validated)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    name = next(n for n, c in SECTIONS.items() if isinstance(obj, c))
    return build_section(name, {**section_values(obj), **changes})


def describe_keys() -> str:
    """Every config key with its default and help text."""
    lines = ["configuration file (YAML), one section per subcommand:"]
    for name, cls in SECTIONS.items():
        lines.append(f"  {name}:")
        for f in dataclasses.fields(cls):
            if f.default is not dataclasses.MISSING:
                default = f.default
            else:
                default = f.default_factory()
            if isinstance(default, frozenset):
                default = sorted(v.value for v in default)
            lines.append(f"    {f.name} (default {default!r}): {f.metadata.get('help', '')}")
    return "\n".join(lines)
