"""Event stream parsing and prone/supine session construction.

A session is a maximal interval during which the patient stays in one
position. Long supine sessions additionally spawn artificial supine
sessions at re-measurement times, so that every moment a proning
decision could have been made yields an observation.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone

log = logging.getLogger(__name__)

POSITIONS = ("prone", "supine")
EVENT_KINDS = ("position", "measurement", "medication")

# Variables whose joint re-measurement allows re-checking the inclusion
# criteria mid-session.
BUNDLE_VARIABLES = ("pao2", "peep", "fio2")
BUNDLE_WINDOW = timedelta(hours=1)
ARTIFICIAL_MARGIN = timedelta(hours=8)

DEFAULT_COLUMNS = {
    "patient_id": "patient_id",
    "timestamp": "timestamp",
    "kind": "kind",
    "name": "name",
    "value": "value",
}


@dataclass(frozen=True)
class PositionChange:
    position: str


@dataclass(frozen=True)
class Measurement:
    variable: str
    value: float


@dataclass(frozen=True)
class MedicationRecord:
    name: str
    administered: bool = True


@dataclass(frozen=True)
class Event:
    patient_id: str
    timestamp: datetime
    payload: PositionChange | Measurement | MedicationRecord


@dataclass(frozen=True)
class Session:
    patient_id: str
    start: datetime
    end: datetime
    position: str
    provenance: str = "original"
    parent_end: datetime | None = None

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError(f"session start {self.start} must precede end {self.end}")
        if self.position not in POSITIONS:
            raise ValueError(f"position must be one of {POSITIONS}, got {self.position!r}")
        if self.provenance == "artificial":
            if self.position != "supine":
                raise ValueError("artificial sessions must be supine")
            if self.parent_end is not None and self.end != self.parent_end:
                raise ValueError("artificial session must end with its parent")

    @property
    def duration(self) -> timedelta:
        return self.end - self.start


@dataclass(frozen=True)
class RecordError:
    line: int
    message: str


@dataclass
class ParseResult:
    events: list[Event] = field(default_factory=list)
    errors: list[RecordError] = field(default_factory=list)
    unknown_variable_warnings: int = 0
    out_of_order_warnings: int = 0

    def by_patient(self) -> dict[str, list[Event]]:
        out: dict[str, list[Event]] = {}
        for ev in self.events:
            out.setdefault(ev.patient_id, []).append(ev)
        return out


def parse_timestamp(text: str) -> datetime:
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    ts = datetime.fromisoformat(raw)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def parse_events(source, schema: dict[str, str] | None = None,
                 known_variables: set[str] | None = None) -> ParseResult:
    """Parse a delimited event stream into per-patient, time-sorted events.

    Malformed records are collected as line-numbered errors rather than
    aborting the parse. Unknown measurement variables are retained and
    tallied as warnings.
    """
    cols = dict(DEFAULT_COLUMNS)
    if schema:
        cols.update(schema)
    if isinstance(source, (bytes, bytearray)):
        source = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        source = io.StringIO(source)

    result = ParseResult()
    reader = csv.DictReader(source)
    if reader.fieldnames is None:
        return result

    for lineno, row in enumerate(reader, start=2):
        try:
            patient = (row[cols["patient_id"]] or "").strip()
            kind = (row[cols["kind"]] or "").strip().lower()
            name = (row[cols["name"]] or "").strip()
            value = (row.get(cols["value"]) or "").strip()
            if not patient:
                raise ValueError("empty patient_id")
            ts = parse_timestamp(row[cols["timestamp"]])
            payload = _build_payload(kind, name, value, known_variables, result)
        except (KeyError, ValueError, TypeError) as err:
            result.errors.append(RecordError(line=lineno, message=str(err)))
            continue
        result.events.append(Event(patient_id=patient, timestamp=ts, payload=payload))

    per_patient = result.by_patient()
    for events in per_patient.values():
        stamps = [e.timestamp for e in events]
        if stamps != sorted(stamps):
            result.out_of_order_warnings += 1
    result.events = sorted(result.events, key=lambda e: (e.patient_id, e.timestamp))
    return result


def _build_payload(kind, name, value, known_variables, result):
    if kind == "position":
        pos = name.lower()
        if pos not in POSITIONS:
            raise ValueError(f"position must be one of {POSITIONS}, got {pos!r}")
        return PositionChange(position=pos)
    if kind == "measurement":
        v = float(value)
        if not math.isfinite(v):
            raise ValueError(f"non-finite measurement value {value!r}")
        var = name.lower()
        if known_variables is not None and var not in known_variables:
            result.unknown_variable_warnings += 1
            log.warning("unknown measurement variable %r retained", var)
        return Measurement(variable=var, value=v)
    if kind == "medication":
        return MedicationRecord(name=name.lower(), administered=True)
    raise ValueError(f"kind must be one of {EVENT_KINDS}, got {kind!r}")


def build_sessions(events: list[Event]) -> list[Session]:
    """Slice one patient's sorted events into maximal constant-position sessions.

    The timeline is assumed to start supine (proning is the active
    intervention) and is truncated at the last event. Repeated changes to
    the current position are ignored.
    """
    if not events:
        return []
    patient = events[0].patient_id
    first, last = events[0].timestamp, events[-1].timestamp

    sessions: list[Session] = []
    position = "supine"
    seg_start = first
    for ev in events:
        if not isinstance(ev.payload, PositionChange):
            continue
        new_pos = ev.payload.position
        if new_pos == position:
            if ev.timestamp != seg_start:
                log.warning(
                    "patient %s: duplicate position change to %s at %s ignored",
                    patient, new_pos, ev.timestamp,
                )
            continue
        if ev.timestamp > seg_start:
            sessions.append(Session(patient, seg_start, ev.timestamp, position))
        position = new_pos
        seg_start = ev.timestamp
    if last > seg_start:
        sessions.append(Session(patient, seg_start, last, position))
    return sessions


def _bundle_times(events, start, end):
    """Times at which PaO2, PEEP and FiO2 were all re-measured within one window."""
    times: dict[str, list[datetime]] = {v: [] for v in BUNDLE_VARIABLES}
    for ev in events:
        if isinstance(ev.payload, Measurement) and ev.payload.variable in times:
            if start < ev.timestamp <= end:
                times[ev.payload.variable].append(ev.timestamp)
    if any(not ts for ts in times.values()):
        return []
    candidates = sorted({t for ts in times.values() for t in ts})
    qualifying = []
    for t in candidates:
        if all(any(t - BUNDLE_WINDOW <= m <= t for m in ts) for ts in times.values()):
            qualifying.append(t)
    # One artificial session per bundle window: accept a qualifying time
    # only if it clears the previously accepted one by a full window.
    accepted: list[datetime] = []
    for t in qualifying:
        if not accepted or t - accepted[-1] > BUNDLE_WINDOW:
            accepted.append(t)
    return accepted


def spawn_artificial_sessions(sessions: list[Session], events: list[Event]) -> list[Session]:
    """Append artificial supine sessions at qualifying re-measurement times.

    A bundle time t spawns [t, end] when t falls strictly inside the
    original supine session and leaves at least the 8h margin before its
    end. Original sessions are returned unchanged.
    """
    out = list(sessions)
    for sess in sessions:
        if sess.provenance != "original" or sess.position != "supine":
            continue
        latest = sess.end - ARTIFICIAL_MARGIN
        if latest <= sess.start:
            continue
        patient_events = [e for e in events if e.patient_id == sess.patient_id]
        for t in _bundle_times(patient_events, sess.start, latest):
            out.append(
                Session(
                    patient_id=sess.patient_id,
                    start=t,
                    end=sess.end,
                    position="supine",
                    provenance="artificial",
                    parent_end=sess.end,
                )
            )
    return out


def sessions_from_events(parse: ParseResult) -> list[Session]:
    """Full per-patient pipeline: original sessions plus artificial spawns."""
    out: list[Session] = []
    for patient, events in sorted(parse.by_patient().items()):
        original = build_sessions(events)
        out.extend(spawn_artificial_sessions(original, events))
    return out


def _format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_sessions_csv(sessions: list[Session], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["patient_id", "start", "end", "position", "provenance"])
    for s in sessions:
        writer.writerow([s.patient_id, _format_ts(s.start), _format_ts(s.end), s.position, s.provenance])


def read_sessions_csv(stream) -> list[Session]:
    reader = csv.DictReader(stream)
    out = []
    for row in reader:
        parent_end = parse_timestamp(row["end"]) if row["provenance"] == "artificial" else None
        out.append(
            Session(
                patient_id=row["patient_id"],
                start=parse_timestamp(row["start"]),
                end=parse_timestamp(row["end"]),
                position=row["position"],
                provenance=row["provenance"],
                parent_end=parent_end,
            )
        )
    return out
