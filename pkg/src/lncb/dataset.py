"""Materialised snapshot dataset.

One replay of the timeline produces, for every distinct ``gossip_ts``, the
open edges after that timestamp's events were applied together with their
raw tabular features, time deltas and the gap to their next closure. Labels
for any lookahead window follow from the stored gaps, so a sweep over
windows reuses the same replay.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureSchema, Scaler, edge_raw_row, fit_scaler, _node_columns
from .ingest import EventLog, OPENING, filter_parallel_channels, split_warm_start
from .labeling import (
    CLASS_NAMES,
    ClosureIndex,
    Label,
    SplitBoundaries,
    build_closure_index,
    chronological_split,
    labels_from_next_closure,
)
from .state import DAY, GraphState, apply_event

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1


class NoSnapshots(ValueError):
    pass


@dataclass
class SnapshotDataset:
    delta: float
    boundaries: SplitBoundaries
    include_chain: bool
    snap_ts: np.ndarray  # (S,)
    snap_split: np.ndarray  # (S,) index into SPLITS
    offsets: np.ndarray  # (S+1,)
    edge_rows: np.ndarray  # (R, n_edge) raw features of opening events
    edge_ref: np.ndarray  # (N,)
    src: np.ndarray  # (N,) node index
    dst: np.ndarray  # (N,)
    counts: np.ndarray  # (N, 6)
    deltas: np.ndarray  # (N, 3) seconds: edge age, src recency, dst recency
    next_gap: np.ndarray  # (N,) seconds to next closure, inf if none
    next_label: np.ndarray  # (N,)
    node_names: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._labels_cache: dict[float, np.ndarray] = {}

    @property
    def n_instances(self) -> int:
        return int(self.offsets[-1])

    def labels(self, delta: float | None = None) -> np.ndarray:
        d = float(self.delta if delta is None else delta)
        if d not in self._labels_cache:
            self._labels_cache[d] = labels_from_next_closure(self.next_gap, self.next_label, d)
        return self._labels_cache[d]

    def snapshots(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.snap_split == SPLITS.index(split))

    def snapshot_slice(self, s: int) -> slice:
        return slice(int(self.offsets[s]), int(self.offsets[s + 1]))

    def split_index(self, split: str) -> np.ndarray:
        snaps = self.snapshots(split)
        if len(snaps) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(self.offsets[s], self.offsets[s + 1]) for s in snaps])

    def tabular_raw(self, idx) -> np.ndarray:
        return np.concatenate([self.edge_rows[self.edge_ref[idx]], self.counts[idx].astype(float)], axis=1)

    def edge_age_days(self, idx) -> np.ndarray:
        return self.deltas[idx, 0] / DAY

    def label_distribution(self, split: str = "train", delta: float | None = None) -> np.ndarray:
        y = self.labels(delta)[self.split_index(split)]
        if len(y) == 0:
            return np.full(3, 1 / 3)
        return np.bincount(y, minlength=3) / len(y)

    def fit_scaler(self, schema: FeatureSchema | None = None) -> Scaler:
        """Fit on train-split instances (edge rows of the open edges plus node counts)."""
        schema = schema or FeatureSchema(include_chain=self.include_chain)
        idx = self.split_index("train")
        if len(idx) == 0:
            raise NoSnapshots("training split holds no snapshots")
        edge_scaler = fit_scaler(self.edge_rows[np.unique(self.edge_ref[idx])], schema.edge_columns)
        node_scaler = fit_scaler(self.counts[idx].astype(float), _node_columns())
        return Scaler(
            edge_scaler.names + node_scaler.names,
            np.concatenate([edge_scaler.numeric, node_scaler.numeric]),
            np.concatenate([edge_scaler.min, node_scaler.min]),
            np.concatenate([edge_scaler.max, node_scaler.max]),
        )

    # -- persistence -------------------------------------------------------

    def save(self, path: str) -> None:
        meta = {
            "version": FORMAT_VERSION,
            "delta": self.delta,
            "boundaries": [
                self.boundaries.train_end_ts,
                self.boundaries.val_end_ts,
                self.boundaries.data_end_ts,
                self.boundaries.data_start_ts,
            ],
            "include_chain": self.include_chain,
            "meta": self.meta,
        }
        np.savez_compressed(
            path,
            meta=np.asarray(json.dumps(meta)),
            snap_ts=self.snap_ts,
            snap_split=self.snap_split,
            offsets=self.offsets,
            edge_rows=self.edge_rows,
            edge_ref=self.edge_ref,
            src=self.src,
            dst=self.dst,
            counts=self.counts,
            deltas=self.deltas,
            next_gap=self.next_gap,
            next_label=self.next_label,
            node_names=self.node_names.astype(str),
        )

    @classmethod
    def load(cls, path: str) -> "SnapshotDataset":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta["version"] != FORMAT_VERSION:
                raise ValueError(f"unsupported dataset version {meta['version']}")
            arrays = {k: z[k] for k in z.files if k != "meta"}
        b = meta["boundaries"]
        return cls(
            delta=meta["delta"],
            boundaries=SplitBoundaries(b[0], b[1], b[2], b[3]),
            include_chain=meta["include_chain"],
            meta=meta["meta"],
            **arrays,
        )

    def labeled_snapshot_csv(self, split: str, delta: float | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["snapshot_ts", "src", "dst", "label"])
        y = self.labels(delta)
        for s in self.snapshots(split):
            sl = self.snapshot_slice(s)
            ts = int(self.snap_ts[s])
            for a, b, lab in zip(self.node_names[self.src[sl]], self.node_names[self.dst[sl]], y[sl]):
                w.writerow([ts, a, b, CLASS_NAMES[lab]])
        return buf.getvalue()


def build_dataset(
    log: EventLog,
    *,
    delta_days: float = 180,
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
    include_chain: bool = False,
    filter_parallel: bool = True,
) -> SnapshotDataset:
    """Filter, split, replay and materialise every post-warm-start snapshot."""
    if filter_parallel:
        log = filter_parallel_channels(log)
    warm, timeline = split_warm_start(log)
    if not timeline.events:
        raise NoSnapshots("log holds only the warm-start snapshot")
    index = build_closure_index(timeline, warm)
    bounds = chronological_split(timeline, fractions)
    delta = float(delta_days) * DAY

    node_ids: dict[str, int] = {}
    edge_rows: list[np.ndarray] = []
    # per open edge: (src_i, dst_i, edge_ref, open_ts, next_close_ts, next_close_label)
    open_info: dict[tuple[str, str], tuple] = {}
    counts = np.zeros((0, 3), dtype=np.int64)
    last = np.zeros(0, dtype=np.int64)

    def node_index(n: str) -> int:
        nonlocal counts, last
        i = node_ids.get(n)
        if i is None:
            i = node_ids[n] = len(node_ids)
            if i >= len(last):
                grow = max(1024, len(last))
                counts = np.concatenate([counts, np.zeros((grow, 3), dtype=np.int64)])
                last = np.concatenate([last, np.zeros(grow, dtype=np.int64)])
        return i

    def next_closure(edge, t):
        nxt = index.next_closure(edge, t)
        return (np.inf, 0) if nxt is None else (float(nxt[0]), int(nxt[1]))

    state = GraphState(recency_cap=int(delta))

    def apply(e):
        apply_event(state, e)
        si, di = node_index(e.src), node_index(e.dst)
        if e.channel_status == OPENING:
            edge_rows.append(edge_raw_row(e, include_chain))
            open_info[e.edge] = (si, di, len(edge_rows) - 1, e.gossip_ts, *next_closure(e.edge, e.gossip_ts))
            col = 0
        else:
            open_info.pop(e.edge, None)
            col = 2 if e.event_label == "mutual" else 1
        counts[si, col] += 1
        counts[di, col] += 1
        last[si] = e.gossip_ts
        last[di] = e.gossip_ts

    for e in warm.events:
        apply(e)

    snap_ts, snap_split, offsets = [], [], [0]
    chunks: dict[str, list[np.ndarray]] = {k: [] for k in ("edge_ref", "src", "dst", "counts", "deltas", "gap", "label")}
    events = timeline.events
    i = 0
    while i < len(events):
        ts = events[i].gossip_ts
        while i < len(events) and events[i].gossip_ts == ts:
            apply(events[i])
            i += 1
        if open_info:
            info = np.array(list(open_info.values()), dtype=float)
            si = info[:, 0].astype(np.int64)
            di = info[:, 1].astype(np.int64)
            order = np.lexsort((di, si))
            info, si, di = info[order], si[order], di[order]
            nc_ts, nc_lab = info[:, 4], info[:, 5].astype(np.int8)
            stale = nc_ts <= ts
            if stale.any():  # closure at or before ts that did not close the edge
                keys = np.array(list(open_info.keys()), dtype=object)[order]
                for j in np.flatnonzero(stale):
                    nc_ts[j], nc_lab[j] = next_closure(tuple(keys[j]), ts)
            chunks["edge_ref"].append(info[:, 2].astype(np.int64))
            chunks["src"].append(si)
            chunks["dst"].append(di)
            chunks["counts"].append(np.concatenate([counts[si], counts[di]], axis=1))
            chunks["deltas"].append(np.stack([ts - info[:, 3], ts - last[si], ts - last[di]], axis=1).astype(float))
            chunks["gap"].append(nc_ts - ts)
            chunks["label"].append(nc_lab)
            n = len(si)
        else:
            n = 0
        snap_ts.append(ts)
        snap_split.append(SPLITS.index(bounds.split_of(ts)))
        offsets.append(offsets[-1] + n)

    def cat(key, shape, dtype):
        return np.concatenate(chunks[key]).astype(dtype) if chunks[key] else np.zeros(shape, dtype)

    n_edge = len(FeatureSchema(include_chain=include_chain).edge_columns)
    names = np.empty(len(node_ids), dtype=object)
    for n, k in node_ids.items():
        names[k] = n
    ds = SnapshotDataset(
        delta=delta,
        boundaries=bounds,
        include_chain=include_chain,
        snap_ts=np.asarray(snap_ts, dtype=np.int64),
        snap_split=np.asarray(snap_split, dtype=np.int8),
        offsets=np.asarray(offsets, dtype=np.int64),
        edge_rows=np.asarray(edge_rows, dtype=float).reshape(-1, n_edge),
        edge_ref=cat("edge_ref", 0, np.int64),
        src=cat("src", 0, np.int32),
        dst=cat("dst", 0, np.int32),
        counts=cat("counts", (0, 6), np.int32),
        deltas=cat("deltas", (0, 3), float),
        next_gap=cat("gap", 0, float),
        next_label=cat("label", 0, np.int8),
        node_names=names.astype(str),
        meta={
            "parallel_filter": log.meta.get("parallel_filter"),
            "warm_events": len(warm),
            "timeline_events": len(timeline),
            "close_of_unknown_edge": state.close_of_unknown_edge,
        },
    )
    logger.info("built %d snapshots, %d instances", len(snap_ts), ds.n_instances)
    return ds


def class_distribution(ds: SnapshotDataset, delta: float | None = None, dedup_edges: bool = False) -> dict:
    """Label shares over all (edge, snapshot) instances, or over distinct edges (latest instance)."""
    y = ds.labels(delta)
    idx = np.concatenate([ds.split_index(s) for s in SPLITS])
    if dedup_edges and len(idx):
        key = ds.src[idx].astype(np.int64) * (len(ds.node_names) + 1) + ds.dst[idx]
        # the last instance of each edge wins
        _, first_rev = np.unique(key[::-1], return_index=True)
        idx = idx[::-1][first_rev]
    counts = np.bincount(y[idx], minlength=3) if len(idx) else np.zeros(3, int)
    total = max(int(counts.sum()), 1)
    return {name: counts[i] / total for i, name in enumerate(CLASS_NAMES)} | {"instances": int(counts.sum())}
