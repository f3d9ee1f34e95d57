"""Gossip event log ingestion: parsing, validation, filtering and warm-start split."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import IO, Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)


class IngestError(ValueError):
    """Base class for data errors raised while reading event logs."""


class EmptyInput(IngestError):
    pass


class MissingColumn(IngestError):
    pass


class MalformedRow(IngestError):
    def __init__(self, row_index: int, reason: str):
        super().__init__(f"row {row_index}: {reason}")
        self.row_index = row_index
        self.reason = reason


class Implementation(str, Enum):
    LND = "LND"
    CLN = "CLN"
    ECLAIR = "Eclair"
    LDK = "LDK"
    OTHER = "Other"

    @classmethod
    def parse(cls, value: str | None) -> "Implementation | None":
        if value is None:
            return None
        v = value.strip()
        if not v:
            return None
        lowered = v.lower()
        for impl in cls:
            if impl.value.lower() == lowered:
                return impl
        aliases = {"c-lightning": cls.CLN, "core-lightning": cls.CLN, "corelightning": cls.CLN}
        return aliases.get(lowered, cls.OTHER)


POLICY_FIELDS = (
    "fee_base_msat",
    "fee_rate_milli_msat",
    "min_htlc",
    "max_htlc_msat",
    "time_lock_delta",
    "disabled",
    "last_update",
    "implementation",
)

EVENT_FIELDS = (
    "gossip_ts",
    "ts",
    "height",
    "transaction_id",
    "vout",
    "src",
    "dst",
    "capacity",
    "block_avg_fee_rate",
    "channel_status",
    "event_label",
)

CSV_COLUMNS = EVENT_FIELDS + tuple(f"src_{f}" for f in POLICY_FIELDS) + tuple(
    f"dst_{f}" for f in POLICY_FIELDS
)

# columns that may legitimately be blank
_OPTIONAL_EVENT_FIELDS = {"ts", "height", "block_avg_fee_rate"}

OPENING = "opening"
CLOSING = "closing"
EVENT_LABELS = ("open", "mutual", "forced", "penalty")


@dataclass(frozen=True)
class PolicySnapshot:
    """Routing policy announced for one channel direction. ``None`` marks an absent field."""

    fee_base_msat: int | None = None
    fee_rate_milli_msat: int | None = None
    min_htlc: int | None = None
    max_htlc_msat: int | None = None
    time_lock_delta: int | None = None
    disabled: bool | None = None
    last_update: int | None = None
    implementation: Implementation | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["implementation"] = self.implementation.value if self.implementation else None
        return d


@dataclass(frozen=True)
class GossipEvent:
    gossip_ts: int
    chain_ts: int | None
    height: int | None
    channel_id: str
    src: str
    dst: str
    capacity: int
    block_avg_fee_rate: float | None
    channel_status: str
    event_label: str
    src_policy: PolicySnapshot = field(default_factory=PolicySnapshot)
    dst_policy: PolicySnapshot = field(default_factory=PolicySnapshot)

    @property
    def edge(self) -> tuple[str, str]:
        return (self.src, self.dst)

    @property
    def is_opening(self) -> bool:
        return self.channel_status == OPENING

    def reversed(self) -> "GossipEvent":
        """The same channel event seen from the opposite direction."""
        return replace(
            self, src=self.dst, dst=self.src, src_policy=self.dst_policy, dst_policy=self.src_policy
        )

    def dedup_key(self) -> tuple:
        return (self.channel_id, self.src, self.dst, self.channel_status, self.gossip_ts)


@dataclass(frozen=True)
class EventLog:
    events: tuple[GossipEvent, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[GossipEvent]:
        return iter(self.events)

    def timestamps(self) -> list[int]:
        return sorted({e.gossip_ts for e in self.events})

    def with_events(self, events: Iterable[GossipEvent], **meta) -> "EventLog":
        return EventLog(tuple(events), {**self.meta, **meta})


# ---------------------------------------------------------------------------
# field coercion
# ---------------------------------------------------------------------------


def _blank(value) -> bool:
    return value is None or (isinstance(value, str) and value.strip() in ("", "nan", "NaN", "None", "null"))


def _opt_int(value, name: str) -> int | None:
    if _blank(value):
        return None
    if isinstance(value, bool):
        return int(value)
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise ValueError(f"{name}: not a number: {value!r}") from None
    if f != f or f < 0:
        raise ValueError(f"{name}: must be a non-negative number, got {value!r}")
    return int(f)


def _opt_float(value, name: str) -> float | None:
    if _blank(value):
        return None
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise ValueError(f"{name}: not a number: {value!r}") from None
    if f != f or f < 0:
        raise ValueError(f"{name}: must be a non-negative number, got {value!r}")
    return f


def _opt_bool(value, name: str) -> bool | None:
    if _blank(value):
        return None
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("true", "1", "1.0", "t", "yes"):
        return True
    if v in ("false", "0", "0.0", "f", "no"):
        return False
    raise ValueError(f"{name}: not a boolean: {value!r}")


def _policy_from_mapping(m: dict, prefix: str = "") -> PolicySnapshot:
    p = PolicySnapshot(
        fee_base_msat=_opt_int(m.get(prefix + "fee_base_msat"), prefix + "fee_base_msat"),
        fee_rate_milli_msat=_opt_int(m.get(prefix + "fee_rate_milli_msat"), prefix + "fee_rate_milli_msat"),
        min_htlc=_opt_int(m.get(prefix + "min_htlc"), prefix + "min_htlc"),
        max_htlc_msat=_opt_int(m.get(prefix + "max_htlc_msat"), prefix + "max_htlc_msat"),
        time_lock_delta=_opt_int(m.get(prefix + "time_lock_delta"), prefix + "time_lock_delta"),
        disabled=_opt_bool(m.get(prefix + "disabled"), prefix + "disabled"),
        last_update=_opt_int(m.get(prefix + "last_update"), prefix + "last_update"),
        implementation=Implementation.parse(
            None if _blank(m.get(prefix + "implementation")) else str(m.get(prefix + "implementation"))
        ),
    )
    if p.min_htlc is not None and p.max_htlc_msat is not None and p.min_htlc > p.max_htlc_msat:
        raise ValueError(f"{prefix}min_htlc exceeds {prefix}max_htlc_msat")
    return p


def _event_from_mapping(m: dict, src_policy: PolicySnapshot, dst_policy: PolicySnapshot) -> GossipEvent:
    for name in EVENT_FIELDS:
        if name not in _OPTIONAL_EVENT_FIELDS and _blank(m.get(name)):
            raise ValueError(f"{name}: required value is empty")
    gossip_ts = _opt_int(m["gossip_ts"], "gossip_ts")
    capacity = _opt_int(m["capacity"], "capacity")
    status = str(m["channel_status"]).strip().lower()
    if status not in (OPENING, CLOSING):
        raise ValueError(f"channel_status: unknown value {m['channel_status']!r}")
    label = str(m["event_label"]).strip().lower()
    if label not in EVENT_LABELS:
        raise ValueError(f"event_label: unknown value {m['event_label']!r}")
    if status == OPENING and label != "open":
        raise ValueError(f"opening event carries label {label!r}")
    if status == CLOSING and label == "open":
        raise ValueError("closing event carries label 'open'")
    src, dst = str(m["src"]).strip(), str(m["dst"]).strip()
    if src == dst:
        raise ValueError("src equals dst")
    vout = _opt_int(m["vout"], "vout")
    return GossipEvent(
        gossip_ts=gossip_ts,
        chain_ts=_opt_int(m.get("ts"), "ts"),
        height=_opt_int(m.get("height"), "height"),
        channel_id=f"{str(m['transaction_id']).strip()}:{vout}",
        src=src,
        dst=dst,
        capacity=capacity,
        block_avg_fee_rate=_opt_float(m.get("block_avg_fee_rate"), "block_avg_fee_rate"),
        channel_status=status,
        event_label=label,
        src_policy=src_policy,
        dst_policy=dst_policy,
    )


# ---------------------------------------------------------------------------
# parsing / serialization
# ---------------------------------------------------------------------------


def _iter_csv(text: str) -> Iterator[GossipEvent | Exception]:
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise MissingColumn(f"missing columns: {', '.join(missing)}")
    for i, row in enumerate(reader):
        try:
            yield _event_from_mapping(
                row, _policy_from_mapping(row, "src_"), _policy_from_mapping(row, "dst_")
            )
        except ValueError as exc:
            yield MalformedRow(i, str(exc))


def _iter_jsonl(text: str) -> Iterator[GossipEvent | Exception]:
    first = True
    for i, line in enumerate(l for l in text.splitlines() if l.strip()):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            yield MalformedRow(i, f"invalid JSON: {exc.msg}")
            continue
        if not isinstance(obj, dict):
            yield MalformedRow(i, "not a JSON object")
            continue
        if first:
            missing = [c for c in EVENT_FIELDS + ("src_policy", "dst_policy") if c not in obj]
            if missing:
                raise MissingColumn(f"missing fields: {', '.join(missing)}")
            first = False
        try:
            yield _event_from_mapping(
                obj,
                _policy_from_mapping(obj.get("src_policy") or {}),
                _policy_from_mapping(obj.get("dst_policy") or {}),
            )
        except ValueError as exc:
            yield MalformedRow(i, str(exc))


def parse_events(
    raw: bytes | str | IO,
    format: str = "csv",
    *,
    strict: bool = False,
    synthesize_twins: bool = True,
    source: str | None = None,
) -> EventLog:
    """Parse a gossip event log and return it sorted by ``gossip_ts``.

    Malformed rows are dropped and reported in ``meta["rejected"]`` as
    ``(row_index, reason)`` pairs, or raised as :class:`MalformedRow` when
    ``strict`` is set. Closing and opening events that arrive without their
    reverse-direction twin get one synthesized when ``synthesize_twins`` is
    true. Duplicates of (channel, direction, status, gossip_ts) keep the
    first occurrence.
    """
    if hasattr(raw, "read"):
        raw = raw.read()
    text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    if not text.strip():
        raise EmptyInput("input contains no data")
    if format == "csv":
        rows = _iter_csv(text)
    elif format == "jsonl":
        rows = _iter_jsonl(text)
    else:
        raise ValueError(f"unknown format {format!r}")

    events: list[GossipEvent] = []
    rejected: list[tuple[int, str]] = []
    for item in rows:
        if isinstance(item, MalformedRow):
            if strict:
                raise item
            rejected.append((item.row_index, item.reason))
        else:
            events.append(item)
    if not events and not rejected:
        raise EmptyInput("input contains a header but no rows")
    if rejected:
        logger.warning("rejected %d malformed rows", len(rejected))

    seen: set[tuple] = set()
    unique: list[GossipEvent] = []
    for e in events:
        k = e.dedup_key()
        if k in seen:
            continue
        seen.add(k)
        unique.append(e)
    n_duplicates = len(events) - len(unique)

    n_twins = 0
    if synthesize_twins:
        twins = []
        for e in unique:
            k = (e.channel_id, e.dst, e.src, e.channel_status, e.gossip_ts)
            if k not in seen:
                seen.add(k)
                twins.append(e.reversed())
        n_twins = len(twins)
        if twins:
            # a twin sorts right behind its original (stable sort on gossip_ts)
            merged = []
            twin_of = {(t.channel_id, t.dst, t.src, t.channel_status, t.gossip_ts): t for t in twins}
            for e in unique:
                merged.append(e)
                t = twin_of.get(e.dedup_key())
                if t is not None:
                    merged.append(t)
            unique = merged

    unique.sort(key=lambda e: e.gossip_ts)
    meta = {
        "source": source,
        "format": format,
        "rows_read": len(events) + len(rejected),
        "rejected": rejected,
        "duplicates_dropped": n_duplicates,
        "twins_synthesized": n_twins,
    }
    return EventLog(tuple(unique), meta)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _event_flat(e: GossipEvent) -> dict:
    txid, vout = e.channel_id.rsplit(":", 1)
    row = {
        "gossip_ts": e.gossip_ts,
        "ts": e.chain_ts,
        "height": e.height,
        "transaction_id": txid,
        "vout": int(vout),
        "src": e.src,
        "dst": e.dst,
        "capacity": e.capacity,
        "block_avg_fee_rate": e.block_avg_fee_rate,
        "channel_status": e.channel_status,
        "event_label": e.event_label,
    }
    return row


def serialize_events(log: EventLog | Sequence[GossipEvent], format: str = "csv") -> str:
    """Write events in the same flat CSV / nested JSONL layout that :func:`parse_events` reads."""
    events = log.events if isinstance(log, EventLog) else log
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in events:
            row = _event_flat(e)
            vals = [row[c] for c in EVENT_FIELDS]
            for pol in (e.src_policy, e.dst_policy):
                vals.extend(getattr(pol, f) for f in POLICY_FIELDS)
            w.writerow([_fmt(v) for v in vals])
        return buf.getvalue()
    if format == "jsonl":
        lines = []
        for e in events:
            obj = _event_flat(e)
            obj["src_policy"] = e.src_policy.to_dict()
            obj["dst_policy"] = e.dst_policy.to_dict()
            lines.append(json.dumps(obj, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")
    raise ValueError(f"unknown format {format!r}")


def read_events(path: str, format: str | None = None, **kwargs) -> EventLog:
    if format is None:
        format = "jsonl" if str(path).endswith((".jsonl", ".json")) else "csv"
    with open(path, "rb") as fh:
        return parse_events(fh.read(), format, source=str(path), **kwargs)


def write_events(log: EventLog, path: str, format: str | None = None) -> None:
    if format is None:
        format = "jsonl" if str(path).endswith((".jsonl", ".json")) else "csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(serialize_events(log, format))


# ---------------------------------------------------------------------------
# transformations
# ---------------------------------------------------------------------------


def filter_parallel_channels(log: EventLog) -> EventLog:
    """Drop every unordered node pair that is linked by more than one channel.

    All events of all channels of such a pair are removed, in both
    directions. Removal counts go to ``meta["parallel_filter"]``.
    """
    channels_by_pair: dict[frozenset, set[str]] = defaultdict(set)
    for e in log.events:
        channels_by_pair[frozenset((e.src, e.dst))].add(e.channel_id)
    bad = {pair for pair, chans in channels_by_pair.items() if len(chans) > 1}
    kept = tuple(e for e in log.events if frozenset((e.src, e.dst)) not in bad)
    report = {
        "pairs_total": len(channels_by_pair),
        "pairs_removed": len(bad),
        "events_total": len(log.events),
        "events_removed": len(log.events) - len(kept),
    }
    return EventLog(kept, {**log.meta, "parallel_filter": report})


def split_warm_start(log: EventLog) -> tuple[EventLog, EventLog]:
    """Split off the initial full-network snapshot (all events at the first ``gossip_ts``)."""
    if not log.events:
        raise EmptyInput("cannot split an empty log")
    t0 = min(e.gossip_ts for e in log.events)
    warm = tuple(e for e in log.events if e.gossip_ts == t0)
    rest = tuple(e for e in log.events if e.gossip_ts != t0)
    return (
        EventLog(warm, {**log.meta, "role": "warm", "warm_ts": t0}),
        EventLog(rest, {**log.meta, "role": "timeline", "warm_ts": t0}),
    )


@dataclass
class Stats:
    events: int = 0
    timestamps: int = 0
    nodes: int = 0
    channels: int = 0
    opening: int = 0
    closing: int = 0
    labels: dict = field(default_factory=lambda: {k: 0 for k in EVENT_LABELS})
    first_ts: int | None = None
    last_ts: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def dataset_stats(log: EventLog | Sequence[GossipEvent]) -> Stats:
    events = log.events if isinstance(log, EventLog) else tuple(log)
    if not events:
        return Stats()
    labels = Counter(e.event_label for e in events)
    nodes = set()
    for e in events:
        nodes.add(e.src)
        nodes.add(e.dst)
    ts = [e.gossip_ts for e in events]
    return Stats(
        events=len(events),
        timestamps=len(set(ts)),
        nodes=len(nodes),
        channels=len({e.channel_id for e in events}),
        opening=sum(1 for e in events if e.channel_status == OPENING),
        closing=sum(1 for e in events if e.channel_status == CLOSING),
        labels={k: labels.get(k, 0) for k in EVENT_LABELS},
        first_ts=min(ts),
        last_ts=max(ts),
    )
