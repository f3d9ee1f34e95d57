"""Model inputs: scaled edge features, node event counts and learnable time encodings."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ingest import GossipEvent, Implementation
from .state import DAY, GraphState, OpenEdgeRecord, recency

GROUPS = ("edge", "node", "time")
POLICY_NUMERIC = ("fee_base_msat", "fee_rate_milli_msat", "min_htlc", "max_htlc_msat", "time_lock_delta", "last_update")
IMPLEMENTATIONS = tuple(Implementation)
NODE_COUNTS = ("count_open", "count_forced", "count_mutual")
TIME_SCALARS = ("edge_age", "src_recency", "dst_recency")
CLIP_LO, CLIP_HI = -0.5, 1.5


class SchemaMismatch(ValueError):
    pass


class EmptyTrainingSet(ValueError):
    pass


class EdgeNotOpen(KeyError):
    pass


def _edge_columns(include_chain: bool) -> list[tuple[str, bool]]:
    """(name, is_numeric) for the edge block, in order."""
    cols = [("capacity", True), ("block_avg_fee_rate", True)]
    if include_chain:
        cols += [("height", True), ("chain_ts", True)]
    cols += [("block_avg_fee_rate_missing", False)]
    if include_chain:
        cols += [("height_missing", False), ("chain_ts_missing", False)]
    for side in ("src", "dst"):
        cols += [(f"{side}_{f}", True) for f in POLICY_NUMERIC]
        cols.append((f"{side}_disabled", False))
        cols += [(f"{side}_{f}_missing", False) for f in POLICY_NUMERIC + ("disabled",)]
        cols += [(f"{side}_impl_{impl.value}", False) for impl in IMPLEMENTATIONS]
    return cols


def _node_columns() -> list[tuple[str, bool]]:
    return [(f"{side}_{c}", True) for side in ("src", "dst") for c in NODE_COUNTS]


@dataclass(frozen=True)
class FeatureSchema:
    """Frozen feature order. The tabular part is edge columns followed by node counts."""

    groups: tuple[str, ...] = GROUPS
    d_time: int = 128
    include_chain: bool = False

    def __post_init__(self):
        bad = set(self.groups) - set(GROUPS)
        if bad:
            raise ValueError(f"unknown feature groups {sorted(bad)}")
        if not self.groups:
            raise ValueError("at least one feature group is required")
        object.__setattr__(self, "groups", tuple(g for g in GROUPS if g in self.groups))

    @property
    def edge_columns(self) -> list[tuple[str, bool]]:
        return _edge_columns(self.include_chain)

    @property
    def tabular_columns(self) -> list[tuple[str, bool]]:
        return self.edge_columns + _node_columns()

    @property
    def n_edge(self) -> int:
        return len(self.edge_columns)

    def tabular_selection(self) -> np.ndarray:
        """Indices into the full tabular row that the enabled groups keep."""
        idx = []
        if "edge" in self.groups:
            idx.extend(range(self.n_edge))
        if "node" in self.groups:
            idx.extend(range(self.n_edge, self.n_edge + len(NODE_COUNTS) * 2))
        return np.asarray(idx, dtype=np.intp)

    def names(self) -> list[str]:
        cols = self.tabular_columns
        names = [cols[i][0] for i in self.tabular_selection()]
        if "time" in self.groups:
            for scalar in TIME_SCALARS:
                names += [f"{scalar}[{i}]" for i in range(self.d_time)]
        return names

    @property
    def width(self) -> int:
        return len(self.tabular_selection()) + (3 * self.d_time if "time" in self.groups else 0)

    def source_of(self) -> list[str]:
        """For every input column, the reported feature it rolls up to."""
        cols = self.tabular_columns
        src = [cols[i][0] for i in self.tabular_selection()]
        if "time" in self.groups:
            for scalar in TIME_SCALARS:
                src += [scalar] * self.d_time
        return src

    def manifest(self) -> dict:
        return {
            "groups": list(self.groups),
            "d_time": self.d_time,
            "include_chain": self.include_chain,
            "features": self.names(),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_manifest(cls, m: dict) -> "FeatureSchema":
        schema = cls(tuple(m["groups"]), int(m["d_time"]), bool(m["include_chain"]))
        if m.get("features") is not None and m["features"] != schema.names():
            raise SchemaMismatch("feature manifest does not match this version's feature order")
        return schema


def edge_raw_row(e: GossipEvent, include_chain: bool = False) -> np.ndarray:
    """Unscaled edge features for one opening event; missing numerics are NaN."""
    nan = float("nan")

    def num(v):
        return nan if v is None else float(v)

    row = [float(e.capacity), num(e.block_avg_fee_rate)]
    if include_chain:
        row += [num(e.height), num(e.chain_ts)]
    row.append(float(e.block_avg_fee_rate is None))
    if include_chain:
        row += [float(e.height is None), float(e.chain_ts is None)]
    for pol in (e.src_policy, e.dst_policy):
        vals = [getattr(pol, f) for f in POLICY_NUMERIC]
        row += [num(v) for v in vals]
        row.append(float(bool(pol.disabled)))
        row += [float(v is None) for v in vals]
        row.append(float(pol.disabled is None))
        impl = pol.implementation or Implementation.OTHER
        row += [float(impl is i) for i in IMPLEMENTATIONS]
    return np.asarray(row, dtype=float)


@dataclass
class Scaler:
    """log1p followed by min-max scaling of the numeric columns; binary columns pass through."""

    names: list[str]
    numeric: np.ndarray
    min: np.ndarray
    max: np.ndarray

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "numeric": self.numeric.astype(bool).tolist(),
            "min": self.min.tolist(),
            "max": self.max.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(list(d["names"]), np.asarray(d["numeric"], bool), np.asarray(d["min"], float), np.asarray(d["max"], float))


def fit_scaler(train_rows, columns: list[tuple[str, bool]]) -> Scaler:
    rows = np.asarray(train_rows, dtype=float)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptyTrainingSet("cannot fit a scaler on zero rows")
    if rows.shape[1] != len(columns):
        raise SchemaMismatch(f"rows have {rows.shape[1]} columns, schema has {len(columns)}")
    numeric = np.array([is_num for _, is_num in columns], dtype=bool)
    vals = rows[:, numeric]
    if np.any(vals < 0):
        raise ValueError("numeric features must be non-negative for log1p scaling")
    logged = np.log1p(vals)
    lo = np.full(len(columns), 0.0)
    hi = np.full(len(columns), 1.0)
    with warnings.catch_warnings():
        # all-NaN columns are handled below
        warnings.simplefilter("ignore", RuntimeWarning)
        nmin = np.nanmin(logged, axis=0)
        nmax = np.nanmax(logged, axis=0)
    nmin = np.where(np.isnan(nmin), 0.0, nmin)
    nmax = np.where(np.isnan(nmax), nmin + 1.0, nmax)
    nmax = np.where(nmax <= nmin, nmin + 1.0, nmax)
    lo[numeric] = nmin
    hi[numeric] = nmax
    return Scaler([n for n, _ in columns], numeric, lo, hi)


def transform(scaler: Scaler, rows) -> np.ndarray:
    """Scale raw rows (1-D or 2-D). Missing numeric values map to 0, the train minimum."""
    x = np.asarray(rows, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != len(scaler.names):
        raise SchemaMismatch(f"row has {x.shape[1]} columns, scaler expects {len(scaler.names)}")
    out = x.copy()
    num = scaler.numeric
    with np.errstate(invalid="ignore"):
        z = (np.log1p(np.maximum(x[:, num], 0.0)) - scaler.min[num]) / (scaler.max[num] - scaler.min[num])
    z = np.clip(z, CLIP_LO, CLIP_HI)
    out[:, num] = np.where(np.isnan(z), 0.0, z)
    return out[0] if single else out


@dataclass
class TimeEncoder:
    """cos(omega * days + phase) with learnable frequencies and phases."""

    omega: np.ndarray
    phase: np.ndarray

    @classmethod
    def init(cls, d_time: int = 128) -> "TimeEncoder":
        # periods from ~6 days to ~170 years (omega in rad/day)
        omega = 10.0 ** (-np.linspace(0.0, 4.0, d_time)) if d_time > 1 else np.ones(1)
        return cls(omega.astype(float), np.zeros(d_time))

    @property
    def d_time(self) -> int:
        return self.omega.shape[0]

    def encode(self, delta_seconds) -> np.ndarray:
        days = np.asarray(delta_seconds, dtype=float) / DAY
        return np.cos(np.multiply.outer(days, self.omega) + self.phase)

    def backward(self, delta_seconds, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients wrt (omega, phase) given dL/d(encode(delta))."""
        days = np.asarray(delta_seconds, dtype=float).reshape(-1) / DAY
        g = grad_out.reshape(days.shape[0], -1)
        s = -np.sin(np.multiply.outer(days, self.omega) + self.phase) * g
        return days @ s, s.sum(axis=0)


def encode_time(enc: TimeEncoder, delta_seconds) -> np.ndarray:
    if np.any(np.asarray(delta_seconds) < 0):
        raise ValueError("time deltas must be non-negative")
    return enc.encode(delta_seconds)


def node_counts(state: GraphState, src: str, dst: str) -> np.ndarray:
    out = []
    for n in (src, dst):
        s = state.node_stats.get(n)
        out += list(s.counts()) if s is not None else [0, 0, 0]
    return np.asarray(out, dtype=float)


def time_scalars(state: GraphState, rec: OpenEdgeRecord, src: str, dst: str, t: int) -> np.ndarray:
    return np.asarray(
        [t - rec.open_gossip_ts, recency(state, src, t), recency(state, dst, t)], dtype=float
    )


def assemble_batch(tabular_raw, deltas, scaler: Scaler, enc: TimeEncoder | None, schema: FeatureSchema) -> np.ndarray:
    """Vectorised assembly: ``tabular_raw`` is (n, edge+node) unscaled, ``deltas`` is (n, 3) seconds."""
    tab = transform(scaler, np.atleast_2d(tabular_raw))[:, schema.tabular_selection()]
    blocks = [tab]
    if "time" in schema.groups:
        d = np.atleast_2d(np.asarray(deltas, dtype=float))
        enc_out = enc.encode(d)  # (n, 3, d_time)
        blocks.append(enc_out.reshape(d.shape[0], -1))
    return np.concatenate(blocks, axis=1)


def assemble(
    edge: tuple[str, str],
    state: GraphState,
    t: int,
    scaler: Scaler,
    enc: TimeEncoder | None,
    schema: FeatureSchema,
) -> np.ndarray:
    """Feature vector for one open edge at time ``t``."""
    rec = state.open_edges.get(tuple(edge))
    if rec is None:
        raise EdgeNotOpen(edge)
    if t < rec.open_gossip_ts:
        raise ValueError("query time precedes the edge opening")
    src, dst = edge
    tab = np.concatenate([edge_raw_row(rec.opening_event, schema.include_chain), node_counts(state, src, dst)])
    deltas = time_scalars(state, rec, src, dst, t)
    return assemble_batch(tab[None, :], deltas[None, :], scaler, enc, schema)[0]
