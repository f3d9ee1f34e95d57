"""Chronological splits and lookahead closure labels for open edges."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Mapping

import numpy as np

from .ingest import CLOSING, EventLog, GossipEvent
from .state import DAY, GraphState, open_edges_at


class Label(IntEnum):
    OPEN = 0
    FORCED = 1
    MUTUAL = 2

    @classmethod
    def from_event_label(cls, label: str) -> "Label":
        if label == "mutual":
            return cls.MUTUAL
        if label in ("forced", "penalty"):
            return cls.FORCED
        return cls.OPEN


CLASS_NAMES = ("open", "forced", "mutual")


class DegenerateTimeline(ValueError):
    pass


class ClosureIndex:
    """Per directed edge, the sorted closure times and their labels."""

    def __init__(self, closures: Mapping[tuple[str, str], list[tuple[int, Label]]]):
        self._times: dict[tuple[str, str], list[int]] = {}
        self._labels: dict[tuple[str, str], list[Label]] = {}
        for edge, items in closures.items():
            self._times[edge] = [t for t, _ in items]
            self._labels[edge] = [lab for _, lab in items]

    def __getitem__(self, edge) -> list[tuple[int, Label]]:
        return list(zip(self._times.get(edge, ()), self._labels.get(edge, ())))

    def __contains__(self, edge) -> bool:
        return edge in self._times

    def __len__(self) -> int:
        return len(self._times)

    def edges(self):
        return self._times.keys()

    def next_closure(self, edge, t: int) -> tuple[int, Label] | None:
        """First closure strictly after ``t``."""
        times = self._times.get(edge)
        if not times:
            return None
        i = bisect_right(times, t)
        if i == len(times):
            return None
        return times[i], self._labels[edge][i]


def build_closure_index(timeline: EventLog | Iterable[GossipEvent], warm: EventLog | Iterable[GossipEvent] = ()) -> ClosureIndex:
    per_edge: dict[tuple[str, str], dict[int, Label]] = {}
    for log in (warm, timeline):
        for e in log:
            if e.channel_status != CLOSING:
                continue
            slot = per_edge.setdefault(e.edge, {})
            # first closure seen at a timestamp wins
            slot.setdefault(e.gossip_ts, Label.from_event_label(e.event_label))
    return ClosureIndex({edge: sorted(d.items()) for edge, d in per_edge.items()})


@dataclass(frozen=True)
class SplitBoundaries:
    train_end_ts: float
    val_end_ts: float
    data_end_ts: float
    data_start_ts: float = 0.0

    def split_of(self, ts: float) -> str:
        if ts <= self.train_end_ts:
            return "train"
        if ts <= self.val_end_ts:
            return "val"
        return "test"


def chronological_split(
    timeline: EventLog | Iterable[GossipEvent] | Iterable[int],
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> SplitBoundaries:
    """Split boundaries placed on the time axis (not on event counts)."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    ts = [x if isinstance(x, (int, float, np.integer)) else x.gossip_ts for x in timeline]
    if not ts:
        raise DegenerateTimeline("empty timeline")
    t_min, t_max = min(ts), max(ts)
    if t_min == t_max:
        raise DegenerateTimeline(f"all events share timestamp {t_min}")
    span = t_max - t_min
    return SplitBoundaries(
        train_end_ts=t_min + fractions[0] * span,
        val_end_ts=t_min + (fractions[0] + fractions[1]) * span,
        data_end_ts=t_max,
        data_start_ts=t_min,
    )


def label_edge(index: ClosureIndex, edge: tuple[str, str], t: int, delta: int) -> Label:
    """Label of the earliest closure in ``(t, t + delta]``; OPEN when there is none."""
    nxt = index.next_closure(edge, t)
    if nxt is None or nxt[0] > t + delta:
        return Label.OPEN
    return nxt[1]


def label_snapshot(state: GraphState, index: ClosureIndex, delta: int) -> dict[tuple[str, str], Label]:
    t = state.current_ts
    return {(s, d): label_edge(index, (s, d), t, delta) for s, d, _ in open_edges_at(state)}


def labels_from_next_closure(next_gap: np.ndarray, next_label: np.ndarray, delta: float) -> np.ndarray:
    """Vectorised relabeling: ``next_gap`` is seconds to the first later closure (inf if none)."""
    return np.where(next_gap <= delta, next_label, Label.OPEN).astype(np.int8)


def closure_lifetimes(log: EventLog | Iterable[GossipEvent]) -> np.ndarray:
    """Lifetimes in days of channels whose opening and closing are both observed."""
    opened: dict[str, int] = {}
    lifetimes = []
    for e in log:
        if e.channel_status == CLOSING:
            t0 = opened.pop(e.channel_id, None)
            if t0 is not None:
                lifetimes.append((e.gossip_ts - t0) / DAY)
        else:
            opened.setdefault(e.channel_id, e.gossip_ts)
    return np.asarray(lifetimes, dtype=float)
