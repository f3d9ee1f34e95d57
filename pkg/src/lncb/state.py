"""Replayable graph state: the full set of open directed edges plus per-node event counts.

This stands in for a sampled neighbor loader and a learned memory module:
every open edge is kept, and each node carries running counts of the
openings, forced closures and mutual closures it took part in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .ingest import GossipEvent, OPENING

CHECKPOINT_VERSION = 1
DAY = 86_400
DEFAULT_RECENCY_CAP = 180 * DAY


class OutOfOrderEvent(ValueError):
    pass


class UnknownNode(KeyError):
    pass


@dataclass(frozen=True)
class OpenEdgeRecord:
    channel_id: str
    open_gossip_ts: int
    opening_event: GossipEvent


@dataclass
class NodeStats:
    count_open: int = 0
    count_forced: int = 0
    count_mutual: int = 0
    last_update_ts: int | None = None

    def counts(self) -> tuple[int, int, int]:
        return (self.count_open, self.count_forced, self.count_mutual)


@dataclass
class GraphState:
    open_edges: dict[tuple[str, str], OpenEdgeRecord] = field(default_factory=dict)
    node_stats: dict[str, NodeStats] = field(default_factory=dict)
    current_ts: int | None = None
    close_of_unknown_edge: int = 0
    recency_cap: int = DEFAULT_RECENCY_CAP

    def copy(self) -> "GraphState":
        return GraphState(
            open_edges=dict(self.open_edges),
            node_stats={
                k: NodeStats(v.count_open, v.count_forced, v.count_mutual, v.last_update_ts)
                for k, v in self.node_stats.items()
            },
            current_ts=self.current_ts,
            close_of_unknown_edge=self.close_of_unknown_edge,
            recency_cap=self.recency_cap,
        )

    def apply(self, e: GossipEvent) -> "GraphState":
        return apply_event(self, e)

    def replay(self, events) -> "GraphState":
        for e in events:
            apply_event(self, e)
        return self

    def node(self, node_id: str) -> NodeStats:
        stats = self.node_stats.get(node_id)
        if stats is None:
            stats = self.node_stats[node_id] = NodeStats()
        return stats

    # -- checkpointing -----------------------------------------------------

    def to_json(self) -> str:
        from .ingest import serialize_events

        edges = sorted(self.open_edges.items())
        return json.dumps(
            {
                "version": CHECKPOINT_VERSION,
                "current_ts": self.current_ts,
                "close_of_unknown_edge": self.close_of_unknown_edge,
                "recency_cap": self.recency_cap,
                "open_edges": [
                    {"src": s, "dst": d, "channel_id": r.channel_id, "open_gossip_ts": r.open_gossip_ts}
                    for (s, d), r in edges
                ],
                "opening_events": serialize_events([r.opening_event for _, r in edges], "jsonl"),
                "node_stats": {
                    k: [v.count_open, v.count_forced, v.count_mutual, v.last_update_ts]
                    for k, v in sorted(self.node_stats.items())
                },
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GraphState":
        from .ingest import parse_events

        obj = json.loads(text)
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported state checkpoint version {obj.get('version')!r}")
        state = cls(
            current_ts=obj["current_ts"],
            close_of_unknown_edge=obj["close_of_unknown_edge"],
            recency_cap=obj["recency_cap"],
        )
        if obj["open_edges"]:
            opening = parse_events(obj["opening_events"], "jsonl", strict=True, synthesize_twins=False)
            by_edge = {ev.edge: ev for ev in opening.events}
            for item in obj["open_edges"]:
                key = (item["src"], item["dst"])
                state.open_edges[key] = OpenEdgeRecord(item["channel_id"], item["open_gossip_ts"], by_edge[key])
        for k, (o, f, m, ts) in obj["node_stats"].items():
            state.node_stats[k] = NodeStats(o, f, m, ts)
        return state


def apply_event(state: GraphState, e: GossipEvent) -> GraphState:
    """Apply one event in place and return the state.

    Openings insert the directed edge with a frozen copy of the opening
    event; closings remove it. Both endpoints get their counters and
    last-seen timestamp updated. Closing an edge that is not open is
    tolerated and counted in ``close_of_unknown_edge``.
    """
    if state.current_ts is not None and e.gossip_ts < state.current_ts:
        raise OutOfOrderEvent(f"event at {e.gossip_ts} precedes current time {state.current_ts}")
    src, dst = state.node(e.src), state.node(e.dst)
    if e.channel_status == OPENING:
        state.open_edges[e.edge] = OpenEdgeRecord(e.channel_id, e.gossip_ts, e)
        src.count_open += 1
        dst.count_open += 1
    else:
        if state.open_edges.pop(e.edge, None) is None:
            state.close_of_unknown_edge += 1
        if e.event_label == "mutual":
            src.count_mutual += 1
            dst.count_mutual += 1
        else:  # forced and penalty
            src.count_forced += 1
            dst.count_forced += 1
    src.last_update_ts = e.gossip_ts
    dst.last_update_ts = e.gossip_ts
    state.current_ts = e.gossip_ts
    return state


def open_edges_at(state: GraphState) -> tuple[tuple[str, str, OpenEdgeRecord], ...]:
    """Immutable snapshot of the open edges, sorted by (src, dst)."""
    return tuple((s, d, rec) for (s, d), rec in sorted(state.open_edges.items()))


def recency(state: GraphState, node: str, t: int, *, sentinel: bool = True) -> int:
    """Seconds since ``node`` last took part in an event.

    Nodes that were never seen get ``state.recency_cap`` unless ``sentinel``
    is off, in which case :class:`UnknownNode` is raised.
    """
    stats = state.node_stats.get(node)
    if stats is None or stats.last_update_ts is None:
        if not sentinel:
            raise UnknownNode(node)
        return state.recency_cap
    if t < stats.last_update_ts:
        raise ValueError(f"query time {t} precedes last update {stats.last_update_ts} of {node}")
    return t - stats.last_update_ts
