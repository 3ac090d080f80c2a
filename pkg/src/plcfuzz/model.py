"""Protocol model types and their JSON document format."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .capture import Direction, LengthFieldSpec

MODEL_FORMAT = "plcfuzz-model"
MODEL_VERSION = 1


class FieldKind(enum.Enum):
    CONSTANT = "C"
    VARIABLE = "V"
    LENGTH = "L"


@dataclass(frozen=True)
class ByteMask:
    """Per-position classification of a template. ``values`` holds the template bytes."""

    kinds: tuple[FieldKind, ...]
    values: bytes

    def __post_init__(self):
        if len(self.kinds) != len(self.values):
            raise ValueError("mask length must equal template length")

    def __len__(self):
        return len(self.kinds)

    @classmethod
    def from_samples(cls, samples: Sequence[bytes], framing: Optional[LengthFieldSpec] = None) -> "ByteMask":
        first = samples[0]
        if any(len(s) != len(first) for s in samples):
            raise ValueError("samples must share one length")
        kinds = []
        for i, b in enumerate(first):
            if framing is not None and framing.offset <= i < framing.end:
                kinds.append(FieldKind.LENGTH)
            elif all(s[i] == b for s in samples):
                kinds.append(FieldKind.CONSTANT)
            else:
                kinds.append(FieldKind.VARIABLE)
        return cls(tuple(kinds), bytes(first))

    @classmethod
    def parse(cls, text: str, values: bytes) -> "ByteMask":
        return cls(tuple(FieldKind(c) for c in text), values)

    def __str__(self):
        return "".join(k.value for k in self.kinds)

    def positions(self, kind: FieldKind) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k is kind]

    def with_kind(self, positions: Iterable[int], kind: FieldKind) -> "ByteMask":
        kinds = list(self.kinds)
        for p in positions:
            kinds[p] = kind
        return ByteMask(tuple(kinds), self.values)

    def variable_runs(self) -> list[tuple[int, int]]:
        """Maximal runs of VARIABLE positions as (start, stop)."""
        runs = []
        start = None
        for i, k in enumerate(self.kinds + (None,)):
            if k is FieldKind.VARIABLE and start is None:
                start = i
            elif k is not FieldKind.VARIABLE and start is not None:
                runs.append((start, i))
                start = None
        return runs


@dataclass(frozen=True)
class HandshakeStep:
    direction: Direction
    template: bytes
    mask: ByteMask


def step_ref(step: int) -> str:
    return f"handshake/{step}"


@dataclass(frozen=True)
class TokenBinding:
    """A server-issued value that the client echoes back.

    ``echoes`` lists (ref, offset) pairs where ref is ``handshake/<step>`` or a
    command template id.
    """

    source_step: int
    source_offset: int
    width: int
    echoes: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("token width must be >= 1")

    @property
    def direction(self) -> Direction:
        return Direction.SERVER_TO_CLIENT

    def with_echoes(self, extra: Iterable[tuple[str, int]]) -> "TokenBinding":
        merged = tuple(dict.fromkeys(self.echoes + tuple(extra)))
        return TokenBinding(self.source_step, self.source_offset, self.width, merged)


@dataclass(frozen=True)
class CommandTemplate:
    id: str
    template: bytes
    mask: ByteMask
    label: Optional[str] = None
    response: Optional[bytes] = None

    def __post_init__(self):
        if not self.template:
            raise ValueError("command template must be non-empty")
        if len(self.mask) != len(self.template):
            raise ValueError("mask not aligned with template")

    @property
    def direction(self) -> Direction:
        return Direction.CLIENT_TO_SERVER


@dataclass(frozen=True)
class ProtocolModel:
    handshake: tuple[HandshakeStep, ...]
    tokens: tuple[TokenBinding, ...] = ()
    commands: tuple[CommandTemplate, ...] = ()
    framing: Optional[LengthFieldSpec] = None
    server_port: int = 1962
    unexplained: tuple[tuple[str, int], ...] = field(default=())

    def __post_init__(self):
        if not self.handshake:
            raise ValueError("protocol model needs a non-empty handshake")
        for tok in self.tokens:
            if self.handshake[tok.source_step].direction is not Direction.SERVER_TO_CLIENT:
                raise ValueError(f"token source step {tok.source_step} is not server-to-client")
            for ref, off in tok.echoes:
                if off + tok.width > len(self.template_for(ref)):
                    raise ValueError(f"echo {ref}@{off} out of range")

    def template_for(self, ref: str) -> bytes:
        if ref.startswith("handshake/"):
            return self.handshake[int(ref.split("/", 1)[1])].template
        return self.command(ref).template

    def mask_for(self, ref: str) -> ByteMask:
        if ref.startswith("handshake/"):
            return self.handshake[int(ref.split("/", 1)[1])].mask
        return self.command(ref).mask

    def command(self, command_id: str) -> CommandTemplate:
        for c in self.commands:
            if c.id == command_id:
                return c
        raise KeyError(command_id)

    def echo_sites(self, ref: str) -> list[tuple[int, int, int]]:
        """(token index, offset, width) for every token echoed inside ``ref``."""
        return [(ti, off, tok.width)
                for ti, tok in enumerate(self.tokens)
                for r, off in tok.echoes if r == ref]

    def token_positions(self, ref: str) -> set[int]:
        return {off + k for _, off, w in self.echo_sites(ref) for k in range(w)}

    def with_unexplained(self) -> "ProtocolModel":
        covered = set()
        for tok in self.tokens:
            covered.update((step_ref(tok.source_step), tok.source_offset + k) for k in range(tok.width))
            for ref, off in tok.echoes:
                covered.update((ref, off + k) for k in range(tok.width))
        refs = [step_ref(i) for i in range(len(self.handshake))] + [c.id for c in self.commands]
        loose = tuple((ref, p) for ref in refs
                      for p in self.mask_for(ref).positions(FieldKind.VARIABLE)
                      if (ref, p) not in covered)
        return ProtocolModel(self.handshake, self.tokens, self.commands, self.framing,
                             self.server_port, loose)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "server_port": self.server_port,
            "framing": None if self.framing is None else {
                "offset": self.framing.offset,
                "width": self.framing.width,
                "byteorder": self.framing.byteorder,
            },
            "handshake": [
                {"step": i, "direction": s.direction.value, "bytes": s.template.hex(), "mask": str(s.mask)}
                for i, s in enumerate(self.handshake)
            ],
            "tokens": [
                {
                    "id": f"tok{i}",
                    "source": {"step": t.source_step, "offset": t.source_offset, "width": t.width},
                    "echoes": [{"ref": r, "offset": o} for r, o in t.echoes],
                }
                for i, t in enumerate(self.tokens)
            ],
            "commands": [
                {
                    "id": c.id,
                    "label": c.label,
                    "bytes": c.template.hex(),
                    "mask": str(c.mask),
                    "response": None if c.response is None else c.response.hex(),
                }
                for c in self.commands
            ],
            "unexplained": [{"ref": r, "offset": o} for r, o in self.unexplained],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ProtocolModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} document")
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')}")
        fr = doc.get("framing")
        framing = None if fr is None else LengthFieldSpec(fr["offset"], fr["width"], fr["byteorder"])
        handshake = []
        for s in doc["handshake"]:
            data = bytes.fromhex(s["bytes"])
            handshake.append(HandshakeStep(Direction(s["direction"]), data, ByteMask.parse(s["mask"], data)))
        tokens = tuple(
            TokenBinding(t["source"]["step"], t["source"]["offset"], t["source"]["width"],
                         tuple((e["ref"], e["offset"]) for e in t["echoes"]))
            for t in doc.get("tokens", [])
        )
        commands = []
        for c in doc.get("commands", []):
            data = bytes.fromhex(c["bytes"])
            resp = c.get("response")
            commands.append(CommandTemplate(c["id"], data, ByteMask.parse(c["mask"], data), c.get("label"),
                                            None if resp is None else bytes.fromhex(resp)))
        unexplained = tuple((u["ref"], u["offset"]) for u in doc.get("unexplained", []))
        return cls(tuple(handshake), tokens, tuple(commands), framing, doc["server_port"], unexplained)

    @classmethod
    def loads(cls, text: str) -> "ProtocolModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ProtocolModel":
        return cls.loads(Path(path).read_text())
