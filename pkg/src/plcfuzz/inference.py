"""Recover handshake, session tokens, commands and framing from captured sessions."""

from __future__ import annotations

import logging
from collections import Counter
from fractions import Fraction
from typing import Iterable, Optional, Sequence, Union

from .capture import (Direction, LengthFieldSpec, Message, TcpSession, read_capture, reassemble,
                      segment_messages)
from .model import (ByteMask, CommandTemplate, FieldKind, HandshakeStep, ProtocolModel, TokenBinding,
                    step_ref)
from .similarity import similarity

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = Fraction(9, 10)
DEFAULT_HANDSHAKE_LEN = 3


class StructureMismatch(ValueError):
    pass


class NotEnoughSessions(ValueError):
    pass


def as_fraction(value: Union[float, Fraction, int, str]) -> Fraction:
    """Exact threshold; floats go through their shortest repr so 0.9 means 9/10."""
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def _payload(m: Union[Message, bytes]) -> bytes:
    return m.payload if isinstance(m, Message) else bytes(m)


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def groups(self) -> list[list[int]]:
        out: dict[int, list[int]] = {}
        for i in range(len(self.parent)):
            out.setdefault(self.find(i), []).append(i)
        return sorted(out.values(), key=lambda g: g[0])


def cluster_messages(messages: Sequence[Union[Message, bytes]], threshold=DEFAULT_THRESHOLD) -> list[list[int]]:
    """Single-linkage clusters of message indices at ``similarity >= threshold``."""
    threshold = as_fraction(threshold)
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    payloads = [_payload(m) for m in messages]
    # identical payloads always share a cluster; compare each distinct payload once
    distinct: dict[bytes, int] = {}
    ds = _DisjointSet(len(payloads))
    for i, p in enumerate(payloads):
        if p in distinct:
            ds.union(distinct[p], i)
        else:
            distinct[p] = i
    reps = list(distinct.items())
    for x in range(len(reps)):
        a, ia = reps[x]
        for y in range(x + 1, len(reps)):
            b, ib = reps[y]
            if Fraction(2 * min(len(a), len(b)), len(a) + len(b)) < threshold:
                continue
            if ds.find(ia) != ds.find(ib) and similarity(a, b) >= threshold:
                ds.union(ia, ib)
    return ds.groups()


def infer_length_field(messages: Sequence[Union[Message, bytes]], max_offset: int = 8) -> Optional[LengthFieldSpec]:
    """Find a field that equals the total message length in every message."""
    payloads = [_payload(m) for m in messages]
    if len(payloads) < 4 or len({len(p) for p in payloads}) < 2:
        return None
    for offset in range(max_offset + 1):
        for width in (1, 2, 4):
            for order in ("big", "little") if width > 1 else ("big",):
                spec = LengthFieldSpec(offset, width, order)
                if all(len(p) >= spec.end and spec.decode(p) == len(p) for p in payloads):
                    return spec
    return None


def align_handshake(sessions: Sequence[TcpSession], prefix_len: int = DEFAULT_HANDSHAKE_LEN,
                    framing: Optional[LengthFieldSpec] = None) -> list[HandshakeStep]:
    if len(sessions) < 2:
        raise NotEnoughSessions("handshake alignment needs at least two sessions")
    steps = []
    for k in range(prefix_len):
        observed = []
        for s in sessions:
            if len(s.messages) <= k:
                raise StructureMismatch(f"session {s.session_id} has only {len(s.messages)} messages")
            observed.append(s.messages[k])
        directions = {m.direction for m in observed}
        lengths = {len(m.payload) for m in observed}
        if len(directions) > 1:
            raise StructureMismatch(f"handshake step {k}: direction differs across sessions")
        if len(lengths) > 1:
            raise StructureMismatch(f"handshake step {k}: lengths {sorted(lengths)} differ across sessions")
        payloads = [m.payload for m in observed]
        usable = framing if framing is not None and len(payloads[0]) >= framing.end else None
        steps.append(HandshakeStep(observed[0].direction, payloads[0], ByteMask.from_samples(payloads, usable)))
    return steps


def _echo_offsets(values: Sequence[bytes], targets: Sequence[bytes], skip: set[int]) -> list[int]:
    width = len(values[0])
    hits = []
    for o in range(len(targets[0]) - width + 1):
        if any(o <= p < o + width for p in skip):
            continue
        if all(t[o:o + width] == v for t, v in zip(targets, values)):
            hits.append(o)
    return hits


def detect_tokens(handshake: Sequence[HandshakeStep], sessions: Sequence[TcpSession]) -> list[TokenBinding]:
    """Correlate variable server-sent runs with later client-sent bytes."""
    bindings = []
    for s, step in enumerate(handshake):
        if step.direction is not Direction.SERVER_TO_CLIENT:
            continue
        for start, stop in step.mask.variable_runs():
            whole = _bind_run(handshake, sessions, s, start, stop)
            if whole is not None:
                bindings.append(whole)
                continue
            # the run as a whole is not echoed; try its bytes one by one
            for i in range(start, stop) if stop - start > 1 else ():
                single = _bind_run(handshake, sessions, s, i, i + 1)
                if single is not None:
                    bindings.append(single)
                else:
                    log.info("unexplained variable byte: step %d offset %d", s, i)
            if stop - start == 1:
                log.info("unexplained variable byte: step %d offset %d", s, start)
    return bindings


def _bind_run(handshake, sessions, s: int, start: int, stop: int) -> Optional[TokenBinding]:
    values = [sess.messages[s].payload[start:stop] for sess in sessions]
    echoes = []
    for c in range(s + 1, len(handshake)):
        if handshake[c].direction is not Direction.CLIENT_TO_SERVER:
            continue
        targets = [sess.messages[c].payload for sess in sessions]
        skip = set(handshake[c].mask.positions(FieldKind.LENGTH))
        echoes.extend((step_ref(c), o) for o in _echo_offsets(values, targets, skip))
    if not echoes:
        return None
    return TokenBinding(s, start, stop - start, tuple(echoes))


def token_values(tokens: Sequence[TokenBinding], session: TcpSession) -> list[bytes]:
    return [session.messages[t.source_step].payload[t.source_offset:t.source_offset + t.width]
            for t in tokens]


def _token_cover(payload: bytes, values: Sequence[bytes]) -> set[int]:
    cover = set()
    for v in values:
        for o in range(len(payload) - len(v) + 1):
            if payload[o:o + len(v)] == v:
                cover.update(range(o, o + len(v)))
    return cover


def identify_commands(sessions: Sequence[TcpSession], handshake_len: int = DEFAULT_HANDSHAKE_LEN,
                      threshold=DEFAULT_THRESHOLD, tokens: Sequence[TokenBinding] = (),
                      framing: Optional[LengthFieldSpec] = None) -> tuple[list[CommandTemplate], list[TokenBinding]]:
    """Command templates seen identically (modulo token echoes) in at least two sessions.

    Returns the templates and the token bindings extended with echoes found in them.
    """
    items = []  # (session index, message index, payload)
    for si, sess in enumerate(sessions):
        for mi, m in enumerate(sess.messages[handshake_len:], start=handshake_len):
            if m.direction is Direction.CLIENT_TO_SERVER:
                items.append((si, mi, m.payload))
    tokvals = [token_values(tokens, s) for s in sessions]
    covers = [_token_cover(p, tokvals[si]) for si, _, p in items]

    groups = []
    for cluster in cluster_messages([p for _, _, p in items], threshold):
        by_len: dict[int, list[int]] = {}
        for idx in cluster:
            by_len.setdefault(len(items[idx][2]), []).append(idx)
        for members in by_len.values():
            ds = _DisjointSet(len(members))
            for x in range(len(members)):
                for y in range(x + 1, len(members)):
                    a, b = members[x], members[y]
                    pa, pb = items[a][2], items[b][2]
                    shared = covers[a] & covers[b]
                    if all(pa[p] == pb[p] or p in shared for p in range(len(pa))):
                        ds.union(x, y)
            for g in ds.groups():
                sub = sorted(members[i] for i in g)
                if len({items[i][0] for i in sub}) >= 2:
                    groups.append(sub)
    groups.sort(key=lambda g: (items[g[0]][0], items[g[0]][1]))

    templates = []
    extra_echoes: dict[int, list[tuple[str, int]]] = {}
    for n, sub in enumerate(groups):
        cid = f"cmd-{n}"
        payloads = [items[i][2] for i in sub]
        usable = framing if framing is not None and len(payloads[0]) >= framing.end else None
        mask = ByteMask.from_samples(payloads, usable)
        skip = set(mask.positions(FieldKind.LENGTH))
        echo_positions = []
        for ti, tok in enumerate(tokens):
            vals = [tokvals[items[i][0]][ti] for i in sub]
            if len(set(vals)) < 2:
                continue
            for o in _echo_offsets(vals, payloads, skip):
                extra_echoes.setdefault(ti, []).append((cid, o))
                echo_positions.extend(range(o, o + tok.width))
        mask = mask.with_kind(echo_positions, FieldKind.VARIABLE)
        si, mi, _ = items[sub[0]]
        msgs = sessions[si].messages
        response = None
        if mi + 1 < len(msgs) and msgs[mi + 1].direction is Direction.SERVER_TO_CLIENT:
            response = msgs[mi + 1].payload
        templates.append(CommandTemplate(cid, payloads[0], mask, None, response))
    bound = [t.with_echoes(extra_echoes.get(i, ())) for i, t in enumerate(tokens)]
    return templates, bound


def dominant_server_port(sessions: Iterable[TcpSession]) -> Optional[int]:
    counts = Counter(s.server[1] for s in sessions)
    if not counts:
        return None
    return min(counts, key=lambda p: (-counts[p], p))


def analyze_sessions(sessions: Sequence[TcpSession], handshake_len: int = DEFAULT_HANDSHAKE_LEN,
                     threshold=DEFAULT_THRESHOLD, server_port: Optional[int] = None) -> ProtocolModel:
    """Full analysis pipeline over reassembled sessions."""
    port = server_port if server_port is not None else dominant_server_port(sessions)
    sessions = [s for s in sessions if s.server[1] == port]
    framing = infer_length_field([m for s in sessions for m in s.messages])
    if framing is not None:
        sessions = [segment_messages(s, framing) for s in sessions]
    handshake = align_handshake(sessions, handshake_len, framing)
    tokens = detect_tokens(handshake, sessions)
    commands, tokens = identify_commands(sessions, handshake_len, threshold, tokens, framing)
    model = ProtocolModel(tuple(handshake), tuple(tokens), tuple(commands), framing, port)
    return model.with_unexplained()


def analyze_captures(captures: Sequence[bytes], handshake_len: int = DEFAULT_HANDSHAKE_LEN,
                     threshold=DEFAULT_THRESHOLD, server_port: Optional[int] = None) -> ProtocolModel:
    sessions = []
    for data in captures:
        sessions.extend(reassemble(read_capture(data)))
    return analyze_sessions(sessions, handshake_len, threshold, server_port)
