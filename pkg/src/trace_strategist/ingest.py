"""Loading, validating and sessionizing raw platform event logs.

Two input formats are understood. JSON Lines is canonical; each line is an
object with ``timestamp`` (or ``ts``), ``student_id`` (or ``student``),
``session_id`` (or ``session``), ``stream``, ``kind``, ``target`` and an
optional ``payload`` object. CSV files use the fixed header
``timestamp,student_id,session_id,stream,kind,target,payload`` where the
payload cell holds a JSON object (or is empty).

Malformed records never disappear: they are returned as :class:`Reject`
entries carrying the 1-based line number.
"""

from __future__ import annotations

import csv
import io
import json
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Union

STREAMS = ("navigation", "mouse", "keyboard")
CSV_HEADER = ("timestamp", "student_id", "session_id", "stream", "kind", "target", "payload")

_ALIASES = {
    "timestamp": ("timestamp", "ts"),
    "student_id": ("student_id", "student"),
    "session_id": ("session_id", "session"),
}


class IngestError(Exception):
    """Fatal problem reading an event source."""


@dataclass(frozen=True, slots=True)
class RawEvent:
    timestamp: int
    student_id: str
    session_id: str
    stream: str
    kind: str
    target: str
    payload: tuple[tuple[str, str], ...] = ()

    def to_json(self) -> dict:
        rec = {
            "timestamp": self.timestamp,
            "student_id": self.student_id,
            "session_id": self.session_id,
            "stream": self.stream,
            "kind": self.kind,
            "target": self.target,
        }
        if self.payload:
            rec["payload"] = dict(self.payload)
        return rec


@dataclass(frozen=True)
class Reject:
    line_no: int
    reason: str


@dataclass
class EventStream:
    student_id: str
    session_id: str
    events: list[RawEvent] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, str]:
        return (self.student_id, self.session_id)

    def __len__(self) -> int:
        return len(self.events)


def _pick(rec: dict, name: str):
    for alias in _ALIASES.get(name, (name,)):
        if alias in rec and rec[alias] not in (None, ""):
            return rec[alias]
    return None


def _build_event(rec: dict) -> RawEvent:
    """Validate one decoded record; raise ValueError with a short reason."""
    missing = [n for n in ("timestamp", "student_id", "session_id") if _pick(rec, n) is None]
    if missing:
        raise ValueError("missing " + ",".join(missing))
    ts = _pick(rec, "timestamp")
    if isinstance(ts, bool):
        raise ValueError("timestamp not an integer")
    if isinstance(ts, str):
        try:
            ts = int(ts)
        except ValueError:
            raise ValueError("timestamp not an integer") from None
    elif isinstance(ts, float):
        if not ts.is_integer():
            raise ValueError("timestamp not an integer")
        ts = int(ts)
    elif not isinstance(ts, int):
        raise ValueError("timestamp not an integer")
    if ts < 0:
        raise ValueError("negative timestamp")
    stream = rec.get("stream")
    if stream not in STREAMS:
        raise ValueError(f"invalid stream {stream!r}")
    kind = rec.get("kind")
    target = rec.get("target")
    if not isinstance(kind, str) or not kind:
        raise ValueError("missing kind")
    if target is None:
        target = ""
    payload = rec.get("payload") or {}
    if not isinstance(payload, dict):
        raise ValueError("payload not an object")
    return RawEvent(
        timestamp=ts,
        student_id=sys.intern(str(_pick(rec, "student_id"))),
        session_id=sys.intern(str(_pick(rec, "session_id"))),
        stream=sys.intern(stream),
        kind=sys.intern(kind),
        target=sys.intern(str(target)),
        payload=tuple((str(k), str(v)) for k, v in payload.items()),
    )


def _read_bytes(source: Union[bytes, str, Path, BinaryIO]) -> str:
    try:
        if isinstance(source, bytes):
            data = source
        elif isinstance(source, (str, Path)):
            data = Path(source).read_bytes()
        else:
            data = source.read()
        return data.decode("utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot read event source: {exc}") from exc


def parse_log(source, format: str = "jsonl") -> tuple[list[RawEvent], list[Reject]]:
    """Parse an event log into events (file order) and per-line rejects."""
    text = _read_bytes(source)
    events: list[RawEvent] = []
    rejects: list[Reject] = []
    if format == "jsonl":
        loads = json.loads
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not an object")
                events.append(_build_event(rec))
            except json.JSONDecodeError:
                rejects.append(Reject(line_no, "invalid json"))
            except ValueError as exc:
                rejects.append(Reject(line_no, str(exc)))
    elif format == "csv":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            return events, rejects
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise IngestError(f"unexpected csv header {header!r}")
        for row in reader:
            line_no = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_HEADER):
                rejects.append(Reject(line_no, f"expected {len(CSV_HEADER)} columns, got {len(row)}"))
                continue
            rec = dict(zip(CSV_HEADER, row))
            try:
                rec["payload"] = json.loads(rec["payload"]) if rec["payload"].strip() else {}
                events.append(_build_event(rec))
            except json.JSONDecodeError:
                rejects.append(Reject(line_no, "invalid payload json"))
            except ValueError as exc:
                rejects.append(Reject(line_no, str(exc)))
    else:
        raise ValueError(f"unknown format {format!r}")
    return events, rejects


def read_events(path: Union[str, Path]) -> tuple[list[RawEvent], list[Reject]]:
    """Parse a file, choosing the format from its suffix."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"events file not found: {path}")
    fmt = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    return parse_log(path, fmt)


def sessionize(events: Iterable[RawEvent]) -> list[EventStream]:
    """Group events per (student, session), stably sorted by timestamp.

    Streams come out ordered by first appearance of their key.
    """
    groups: dict[tuple[str, str], list[RawEvent]] = defaultdict(list)
    for ev in events:
        groups[(ev.student_id, ev.session_id)].append(ev)
    streams = []
    for (student, session), evs in groups.items():
        evs.sort(key=lambda e: e.timestamp)  # list.sort is stable
        streams.append(EventStream(student, session, evs))
    return streams


def write_events_jsonl(events: Iterable[RawEvent], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_json(), separators=(",", ":")))
            fh.write("\n")


def write_rejects(rejects: Iterable[Reject], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["line_no", "reason"])
        for r in rejects:
            w.writerow([r.line_no, r.reason])
