"""Mutation strategies and deterministic fuzz-case generation.

Every case owns a 64-bit seed derived from the campaign seed and the case's
position in the stream, so one case can be regenerated without the others.
Token echo positions are left alone by every strategy except TokenCorrupt,
which stores an XOR mask and is applied after live token substitution.
"""

from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence, Union

from .model import CommandTemplate, FieldKind, ProtocolModel

MAX_MESSAGE = 4096
BOUNDARY_BYTES = (0x00, 0x01, 0x7F, 0x80, 0xFF)
EXTEND_SIZES = (1, 16, 17, 64, 256)
STACK_PROBABILITY = 0.2


class Strategy(enum.Enum):
    RANDOM_AT_VARIABLE = "RandomAtVariable"
    BYTE_SET = "ByteSet"
    BIT_FLIP = "BitFlip"
    LENGTH_OVERWRITE = "LengthOverwrite"
    TRUNCATE = "Truncate"
    EXTEND = "Extend"
    TOKEN_CORRUPT = "TokenCorrupt"


DEFAULT_WEIGHTS: Mapping[Strategy, float] = {
    Strategy.RANDOM_AT_VARIABLE: 30,
    Strategy.BYTE_SET: 25,
    Strategy.BIT_FLIP: 15,
    Strategy.LENGTH_OVERWRITE: 15,
    Strategy.TRUNCATE: 7,
    Strategy.EXTEND: 5,
    Strategy.TOKEN_CORRUPT: 3,
}


def parse_weights(raw: Optional[Mapping[str, float]]) -> dict[Strategy, float]:
    """Strategy weights keyed by name; missing strategies keep their default."""
    weights = dict(DEFAULT_WEIGHTS)
    for name, w in (raw or {}).items():
        try:
            strat = Strategy(name)
        except ValueError:
            raise ValueError(f"unknown strategy {name!r}") from None
        if w < 0:
            raise ValueError(f"weight for {name} must be non-negative")
        weights[strat] = w
    if not any(weights.values()):
        raise ValueError("at least one strategy weight must be positive")
    return weights


@dataclass(frozen=True)
class Mutation:
    """One edit.

    ``payload`` is the replacement bytes (RandomAtVariable, ByteSet,
    LengthOverwrite), the appended bytes (Extend), an XOR mask (TokenCorrupt),
    a bit index (BitFlip) or the number of bytes removed (Truncate, whose
    ``offset`` is the kept prefix length).
    """

    strategy: Strategy
    offset: int
    payload: Union[bytes, int]

    def to_dict(self) -> dict:
        p = self.payload.hex() if isinstance(self.payload, bytes) else self.payload
        return {"strategy": self.strategy.value, "offset": self.offset, "payload": p}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Mutation":
        strat = Strategy(d["strategy"])
        p = d["payload"]
        return cls(strat, int(d["offset"]), p if isinstance(p, int) else bytes.fromhex(p))


def apply_mutation(data: bytes, m: Mutation) -> bytes:
    buf = bytearray(data)
    s = m.strategy
    if s is Strategy.EXTEND:
        if m.offset != len(buf):
            raise ValueError("Extend must start at the end of the message")
        return bytes(buf + m.payload)
    if s is Strategy.TRUNCATE:
        if not 0 <= m.offset < len(buf) or m.offset + m.payload != len(buf):
            raise ValueError("Truncate out of range")
        return bytes(buf[:m.offset])
    if s is Strategy.BIT_FLIP:
        if not 0 <= m.offset < len(buf) or not 0 <= m.payload < 8:
            raise ValueError("BitFlip out of range")
        buf[m.offset] ^= 1 << m.payload
        return bytes(buf)
    end = m.offset + len(m.payload)
    if m.offset < 0 or end > len(buf):
        raise ValueError(f"{s.value} out of range")
    if s is Strategy.TOKEN_CORRUPT:
        for k, x in enumerate(m.payload):
            buf[m.offset + k] ^= x
    else:
        buf[m.offset:end] = m.payload
    return bytes(buf)


def apply_mutations(data: bytes, mutations: Sequence[Mutation]) -> bytes:
    for m in mutations:
        data = apply_mutation(data, m)
    return data


def substitute_tokens(template: bytes, model: ProtocolModel, ref: str, learned: Mapping[int, bytes]) -> bytes:
    buf = bytearray(template)
    for ti, off, width in model.echo_sites(ref):
        if ti in learned:
            buf[off:off + width] = learned[ti]
    return bytes(buf)


def derive_seed(seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{seed & (2**64 - 1)}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class FuzzCase:
    case_id: int
    template_id: str
    mutations: tuple[Mutation, ...]
    bytes: bytes
    rng_seed: int

    @property
    def token_tampered(self) -> bool:
        return any(m.strategy is Strategy.TOKEN_CORRUPT for m in self.mutations)

    @property
    def signature(self) -> str:
        return "+".join(m.strategy.value for m in self.mutations) or "none"

    def wire_bytes(self, model: ProtocolModel, learned: Mapping[int, bytes]) -> bytes:
        template = model.command(self.template_id).template
        return apply_mutations(substitute_tokens(template, model, self.template_id, learned), self.mutations)


def plain_case(case_id: int, template: CommandTemplate) -> FuzzCase:
    return FuzzCase(case_id, template.id, (), template.template, 0)


class _Surface:
    """Where each strategy may touch a template."""

    def __init__(self, template: CommandTemplate, model: ProtocolModel):
        ref = template.id
        n = len(template.template)
        self.length = n
        self.tokens = sorted(model.token_positions(ref))
        self.sites = model.echo_sites(ref)
        kinds = template.mask.kinds
        self.mutable = [p for p in range(n) if p not in self.tokens and kinds[p] is not FieldKind.LENGTH]
        loose = {p for r, p in model.unexplained if r == ref}
        variable = {p for p in template.mask.positions(FieldKind.VARIABLE)} | loose
        self.focus = sorted(p for p in variable if p not in self.tokens) or self.mutable
        f = model.framing
        self.framing = f if f is not None and n >= f.end else None

    def allowed(self, s: Strategy) -> bool:
        if s in (Strategy.RANDOM_AT_VARIABLE, Strategy.BYTE_SET, Strategy.BIT_FLIP):
            return bool(self.focus if s is Strategy.RANDOM_AT_VARIABLE else self.mutable)
        if s is Strategy.LENGTH_OVERWRITE:
            return self.framing is not None
        if s is Strategy.TRUNCATE:
            return self.length >= 2
        if s is Strategy.EXTEND:
            return self.length < MAX_MESSAGE
        return bool(self.sites)

    def draw(self, s: Strategy, rng: random.Random) -> Mutation:
        if s is Strategy.RANDOM_AT_VARIABLE:
            return Mutation(s, rng.choice(self.focus), bytes([rng.randrange(256)]))
        if s is Strategy.BYTE_SET:
            return Mutation(s, rng.choice(self.mutable), bytes([rng.choice(BOUNDARY_BYTES)]))
        if s is Strategy.BIT_FLIP:
            return Mutation(s, rng.choice(self.mutable), rng.randrange(8))
        if s is Strategy.LENGTH_OVERWRITE:
            f = self.framing
            candidates = sorted({0, 1, max(self.length - 1, 0), min(self.length + 1, f.max_value), f.max_value})
            return Mutation(s, f.offset, f.encode(rng.choice(candidates)))
        if s is Strategy.TRUNCATE:
            keep = rng.randrange(1, self.length)
            return Mutation(s, keep, self.length - keep)
        if s is Strategy.EXTEND:
            room = MAX_MESSAGE - self.length
            size = min(rng.choice(EXTEND_SIZES + (room,)), room)
            return Mutation(s, self.length, rng.randbytes(size))
        _, off, width = rng.choice(self.sites)
        mask = bytearray(rng.randbytes(width))
        if not any(mask):
            mask[rng.randrange(width)] = rng.randrange(1, 256)
        return Mutation(s, off, bytes(mask))


def generate_case(case_id: int, template: CommandTemplate, model: ProtocolModel, rng_seed: int,
                  weights: Optional[Mapping[Strategy, float]] = None) -> FuzzCase:
    weights = DEFAULT_WEIGHTS if weights is None else weights
    surface = _Surface(template, model)
    strategies = [s for s in Strategy if weights.get(s, 0) > 0 and surface.allowed(s)]
    if not strategies:
        raise ValueError(f"no applicable strategy for template {template.id}")
    w = [weights[s] for s in strategies]
    rng = random.Random(rng_seed)
    count = 2 if rng.random() < STACK_PROBABILITY else 1
    mutations = []
    for _ in range(count):
        s = rng.choices(strategies, w)[0]
        mutations.append(surface.draw(s, rng))
        if s in (Strategy.TRUNCATE, Strategy.EXTEND):
            break  # length changes end the stack
    data = apply_mutations(template.template, mutations)
    return FuzzCase(case_id, template.id, tuple(mutations), data, rng_seed)


def generate_cases(template: CommandTemplate, model: ProtocolModel, budget: int, seed: int,
                   weights: Optional[Mapping[Strategy, float]] = None, first_id: int = 0) -> Iterator[FuzzCase]:
    if budget < 1:
        raise ValueError("budget must be at least 1")
    for i in range(budget):
        yield generate_case(first_id + i, template, model, derive_seed(seed, i), weights)


def campaign_cases(model: ProtocolModel, budget: int, seed: int,
                   weights: Optional[Mapping[Strategy, float]] = None, first_id: int = 0,
                   template_ids: Optional[Sequence[str]] = None) -> Iterator[FuzzCase]:
    """Round-robin over the command templates; case i uses seed derive_seed(seed, i)."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    templates = [model.command(t) for t in template_ids] if template_ids else list(model.commands)
    if not templates:
        raise ValueError("model has no command templates to fuzz")
    for i in range(budget):
        t = templates[i % len(templates)]
        yield generate_case(first_id + i, t, model, derive_seed(seed, i), weights)
