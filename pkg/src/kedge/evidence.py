"""Append-only, hash-chained evidence log.

Each line of a persisted log is one canonical JSON object::

    {"digest": ..., "event": {...}, "index": n, "prev_digest": ...}

``digest`` is SHA-256 over the canonical encoding of
``{"event": ..., "index": ..., "prev_digest": ...}``. The first entry links
to 64 zero hex digits.
"""
from __future__ import annotations

import copy
import hashlib
import json
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

from . import canonical
from .errors import KedgeError

ZERO_DIGEST = canonical.ZERO_DIGEST


class EventKind(str, Enum):
    INTENT_PROPOSED = "IntentProposed"
    CONTEXT_SNAPSHOTTED = "ContextSnapshotted"
    DECISION_RENDERED = "DecisionRendered"
    CONTRACT_ISSUED = "ContractIssued"
    EXECUTION_OUTCOME = "ExecutionOutcome"


# kind -> exact payload key set
PAYLOAD_FIELDS: dict[EventKind, frozenset[str]] = {
    EventKind.INTENT_PROPOSED: frozenset(
        {"action", "actor", "batch_id", "facts", "origin_tick", "target"}
    ),
    EventKind.CONTEXT_SNAPSHOTTED: frozenset({"attributes", "resource_scope", "snapshot_tick"}),
    EventKind.DECISION_RENDERED: frozenset(
        {
            "conflicts_with",
            "evaluated_rules",
            "explanation",
            "outcome",
            "policy_digest",
            "priority",
            "reason",
            "recency",
        }
    ),
    EventKind.CONTRACT_ISSUED: frozenset(
        {"action", "contract_id", "issued_at", "resource_scope", "valid_from", "valid_until"}
    ),
    EventKind.EXECUTION_OUTCOME: frozenset(
        {
            "action",
            "actor_role",
            "authorization",
            "completed_at",
            "contract_id",
            "effect",
            "resource",
            "token_id",
        }
    ),
}


class ChainError(KedgeError):
    pass


class TimeRegression(ChainError):
    pass


class DanglingIntent(ChainError):
    pass


class DuplicateEvent(ChainError):
    pass


class MalformedEvent(ChainError):
    pass


class UnknownIntent(ChainError):
    pass


class OutOfBounds(ChainError):
    pass


class ChainCorrupt(ChainError):
    def __init__(self, report: VerificationReport):
        super().__init__(f"chain verification failed: {report.describe()}")
        self.report = report


def check_payload(kind: EventKind, payload: Any) -> None:
    if not isinstance(payload, dict):
        raise MalformedEvent(f"{kind.value} payload must be an object")
    keys = frozenset(payload)
    expected = PAYLOAD_FIELDS[kind]
    if keys != expected:
        missing = sorted(expected - keys)
        extra = sorted(keys - expected)
        raise MalformedEvent(f"{kind.value} payload fields mismatch: missing={missing} extra={extra}")


@dataclass(frozen=True)
class LifecycleEvent:
    event_id: str
    kind: EventKind
    intent_id: str
    payload: dict[str, Any]
    logical_time: int
    actor_id: str = "system"

    def to_dict(self) -> dict[str, Any]:
        return {
            "actor_id": self.actor_id,
            "event_id": self.event_id,
            "intent_id": self.intent_id,
            "kind": self.kind.value,
            "logical_time": self.logical_time,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, data: Any) -> LifecycleEvent:
        if not isinstance(data, dict) or set(data) != {
            "actor_id", "event_id", "intent_id", "kind", "logical_time", "payload"
        }:
            raise MalformedEvent("event object has wrong field set")
        try:
            kind = EventKind(data["kind"])
        except ValueError:
            raise MalformedEvent(f"unknown event kind {data['kind']!r}") from None
        for name in ("actor_id", "event_id", "intent_id"):
            if not isinstance(data[name], str):
                raise MalformedEvent(f"{name} must be a string")
        tick = data["logical_time"]
        if not isinstance(tick, int) or isinstance(tick, bool):
            raise MalformedEvent("logical_time must be an integer")
        check_payload(kind, data["payload"])
        return cls(data["event_id"], kind, data["intent_id"], data["payload"], tick, data["actor_id"])


def entry_digest(index: int, prev_digest: str, event: LifecycleEvent | dict[str, Any]) -> str:
    body = event.to_dict() if isinstance(event, LifecycleEvent) else event
    return canonical.digest({"event": body, "index": index, "prev_digest": prev_digest})


@dataclass(frozen=True)
class ChainEntry:
    index: int
    event: LifecycleEvent
    prev_digest: str
    digest: str

    @property
    def kind(self) -> EventKind:
        return self.event.kind

    @property
    def intent_id(self) -> str:
        return self.event.intent_id

    @property
    def payload(self) -> dict[str, Any]:
        return self.event.payload

    @property
    def logical_time(self) -> int:
        return self.event.logical_time

    def to_dict(self) -> dict[str, Any]:
        return {
            "digest": self.digest,
            "event": self.event.to_dict(),
            "index": self.index,
            "prev_digest": self.prev_digest,
        }

    def to_line(self) -> str:
        return canonical.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Any) -> ChainEntry:
        if not isinstance(data, dict) or set(data) != {"digest", "event", "index", "prev_digest"}:
            raise MalformedEvent("entry object has wrong field set")
        index = data["index"]
        if not isinstance(index, int) or isinstance(index, bool):
            raise MalformedEvent("index must be an integer")
        for name in ("digest", "prev_digest"):
            if not isinstance(data[name], str):
                raise MalformedEvent(f"{name} must be a string")
        return cls(index, LifecycleEvent.from_dict(data["event"]), data["prev_digest"], data["digest"])


@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    checked: int
    index: int | None = None
    failure: str | None = None
    detail: str = ""

    def describe(self) -> str:
        if self.ok:
            return f"OK ({self.checked} entries)"
        return f"{self.failure} at index {self.index}: {self.detail}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "checked": self.checked,
            "index": self.index,
            "failure": self.failure,
            "detail": self.detail,
        }


class _Verifier:
    """Incremental checker; feed entries in order."""

    def __init__(self) -> None:
        self.prev_digest = ZERO_DIGEST
        self.prev_time: int | None = None
        self.intents: set[str] = set()
        self.event_ids: set[str] = set()
        self.count = 0

    def fail(self, kind: str, detail: str) -> VerificationReport:
        return VerificationReport(False, self.count, self.count, kind, detail)

    def feed(self, entry: ChainEntry, recomputed: str | None = None) -> VerificationReport | None:
        n = self.count
        # structural checks first so a rewritten link is reported as such
        if entry.index != n:
            return self.fail("IndexMismatch", f"entry claims index {entry.index}")
        if entry.prev_digest != self.prev_digest:
            return self.fail("LinkMismatch", "prev_digest does not match predecessor digest")
        if recomputed is None:
            recomputed = entry_digest(entry.index, entry.prev_digest, entry.event)
        if recomputed != entry.digest:
            return self.fail("DigestMismatch", "stored digest does not recompute")
        if self.prev_time is not None and entry.logical_time < self.prev_time:
            return self.fail("TimeRegression", f"tick {entry.logical_time} < {self.prev_time}")
        ev = entry.event
        if ev.event_id in self.event_ids:
            return self.fail("DuplicateEvent", f"event_id {ev.event_id!r} repeats")
        if ev.kind is EventKind.INTENT_PROPOSED:
            self.intents.add(ev.intent_id)
        elif ev.intent_id not in self.intents:
            return self.fail("DanglingIntent", f"intent {ev.intent_id!r} never proposed")
        self.event_ids.add(ev.event_id)
        self.prev_digest = entry.digest
        self.prev_time = entry.logical_time
        self.count += 1
        return None


def verify_chain(log: Iterable[ChainEntry]) -> VerificationReport:
    v = _Verifier()
    for entry in log:
        bad = v.feed(entry)
        if bad is not None:
            return bad
    return VerificationReport(True, v.count)


def verify_lines(lines: Iterable[bytes]) -> VerificationReport:
    """Verify raw persisted lines, including byte-level canonical form."""
    v = _Verifier()
    for raw in lines:
        raw = raw.rstrip(b"\n")
        try:
            data = json.loads(raw.decode("utf-8"), parse_float=canonical.no_floats, parse_constant=canonical.no_floats)
            entry = ChainEntry.from_dict(data)
            if canonical.dumps_checked(data).encode("utf-8") != raw:
                return v.fail("Malformed", "line is not in canonical form")
            # keys sort, so a canonical line is the hashed body with a leading digest member
            head = b'{"digest":"' + entry.digest.encode("utf-8") + b'",'
            if not raw.startswith(head):
                return v.fail("Malformed", "line does not lead with its digest")
            recomputed = hashlib.sha256(b"{" + raw[len(head):]).hexdigest()
        except (UnicodeDecodeError, ValueError, TypeError, MalformedEvent) as exc:
            return v.fail("Malformed", str(exc))
        bad = v.feed(entry, recomputed)
        if bad is not None:
            return bad
    return VerificationReport(True, v.count)


def verify_file(path: str | Path) -> VerificationReport:
    data = Path(path).read_bytes()
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    return verify_lines(lines)


class EvidenceChain(Sequence[ChainEntry]):
    """The log itself. Single writer; readers may iterate any appended prefix.

    When ``path`` is given every append is also written through to that file.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.entries: list[ChainEntry] = []
        self._by_intent: dict[str, list[int]] = {}
        self._event_ids: set[str] = set()
        self.path = Path(path) if path is not None else None
        self._fh = None

    # -- sequence protocol
    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i):  # type: ignore[override]
        return self.entries[i]

    def __iter__(self) -> Iterator[ChainEntry]:
        return iter(self.entries)

    @property
    def head_digest(self) -> str:
        return self.entries[-1].digest if self.entries else ZERO_DIGEST

    @property
    def last_tick(self) -> int | None:
        return self.entries[-1].logical_time if self.entries else None

    def has_intent(self, intent_id: str) -> bool:
        return intent_id in self._by_intent

    def append(self, event: LifecycleEvent) -> ChainEntry:
        check_payload(event.kind, event.payload)
        last = self.last_tick
        if last is not None and event.logical_time < last:
            raise TimeRegression(f"tick {event.logical_time} precedes last tick {last}")
        if event.kind is not EventKind.INTENT_PROPOSED and event.intent_id not in self._by_intent:
            raise DanglingIntent(f"intent {event.intent_id!r} has no IntentProposed entry")
        if event.event_id in self._event_ids:
            raise DuplicateEvent(f"event_id {event.event_id!r} already in log")
        # detach from caller-owned payload so later mutation cannot alter the log
        event = LifecycleEvent(
            event.event_id,
            event.kind,
            event.intent_id,
            copy.deepcopy(event.payload),
            event.logical_time,
            event.actor_id,
        )
        index = len(self.entries)
        prev = self.head_digest
        entry = ChainEntry(index, event, prev, entry_digest(index, prev, event))
        self.entries.append(entry)
        self._by_intent.setdefault(event.intent_id, []).append(index)
        self._event_ids.add(event.event_id)
        if self.path is not None:
            self._write(entry)
        return entry

    def record(
        self,
        kind: EventKind,
        intent_id: str,
        payload: dict[str, Any],
        logical_time: int,
        actor_id: str = "system",
    ) -> ChainEntry:
        """Append an event whose id is derived from its log position."""
        event_id = f"e{len(self.entries)}"
        return self.append(LifecycleEvent(event_id, kind, intent_id, payload, logical_time, actor_id))

    def lineage(self, intent_id: str) -> list[ChainEntry]:
        try:
            return [self.entries[i] for i in self._by_intent[intent_id]]
        except KeyError:
            raise UnknownIntent(intent_id) from None

    def read_range(self, from_index: int, to_index: int) -> list[ChainEntry]:
        if not 0 <= from_index <= to_index <= len(self.entries):
            raise OutOfBounds(f"range [{from_index}, {to_index}) outside log of length {len(self.entries)}")
        return self.entries[from_index:to_index]

    def _write(self, entry: ChainEntry) -> None:
        if self._fh is None:
            self._fh = open(self.path, "a", encoding="utf-8", newline="\n")
        self._fh.write(entry.to_line() + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for entry in self.entries:
                fh.write(entry.to_line() + "\n")

    @classmethod
    def from_entries(cls, entries: Iterable[ChainEntry], path: str | Path | None = None) -> EvidenceChain:
        """Adopt already-hashed entries after verifying them."""
        entries = list(entries)
        report = verify_chain(entries)
        if not report.ok:
            raise ChainCorrupt(report)
        chain = cls(path)
        chain.entries = entries
        for entry in entries:
            chain._by_intent.setdefault(entry.intent_id, []).append(entry.index)
            chain._event_ids.add(entry.event.event_id)
        return chain

    @classmethod
    def load(cls, path: str | Path, *, writable: bool = False) -> EvidenceChain:
        """Load and verify a persisted log. Raises ChainCorrupt on any defect."""
        path = Path(path)
        report = verify_file(path)
        if not report.ok:
            raise ChainCorrupt(report)
        entries = [
            ChainEntry.from_dict(json.loads(line))
            for line in path.read_text(encoding="utf-8").splitlines()
        ]
        return cls.from_entries(entries, path if writable else None)


def lineage(log: EvidenceChain, intent_id: str) -> list[ChainEntry]:
    return log.lineage(intent_id)


def read_range(log: EvidenceChain, from_index: int, to_index: int) -> list[ChainEntry]:
    return log.read_range(from_index, to_index)


def append(log: EvidenceChain, event: LifecycleEvent) -> ChainEntry:
    return log.append(event)
