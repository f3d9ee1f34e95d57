"""Synthetic gossip streams with a known closure schedule.

Each node draws a reliability in [0, 1]. A channel between ``a`` and ``b``
closes with daily probability ``h0 * (1 - min(rel_a, rel_b))``; a closure is
forced with probability ``forced_share`` and mutual otherwise. Closure times
are drawn when the channel opens, so the emitted schedule is exact ground
truth for the labeling code.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .ingest import CLOSING, OPENING, EventLog, GossipEvent, Implementation, PolicySnapshot
from .state import DAY

IMPL_CHOICES = (Implementation.LND, Implementation.CLN, Implementation.ECLAIR, Implementation.LDK, Implementation.OTHER)
IMPL_PROBS = (0.7, 0.15, 0.07, 0.05, 0.03)


class InvalidParams(ValueError):
    pass


@dataclass(frozen=True)
class SynthParams:
    n_nodes: int = 1000
    span_days: int = 400
    snapshots_per_day: int = 1
    open_rate: float = 15.0  # expected channel openings per snapshot
    initial_channels: int = 2000
    h0: float = 0.1  # daily closure probability for a fully unreliable pair
    forced_share: float = 0.45
    reliability_a: float = 0.5  # Beta(a, b) reliability prior, mass piled near 1
    reliability_b: float = 0.1
    missing_rate: float = 0.02
    warm_closures: bool = True
    t0: int = 1_654_732_800  # 2022-06-09 00:00 UTC
    seed: int = 0

    def validate(self) -> None:
        if self.n_nodes < 2:
            raise InvalidParams("need at least two nodes")
        if self.span_days < 0 or self.snapshots_per_day < 1:
            raise InvalidParams("span_days must be >= 0 and snapshots_per_day >= 1")
        for name in ("open_rate", "initial_channels", "h0", "missing_rate", "reliability_a", "reliability_b"):
            if getattr(self, name) < 0:
                raise InvalidParams(f"{name} must be non-negative")
        if not 0 <= self.forced_share <= 1 or self.h0 > 1 or self.missing_rate > 1:
            raise InvalidParams("probabilities must lie in [0, 1]")
        if self.reliability_a == 0 or self.reliability_b == 0:
            raise InvalidParams("Beta prior parameters must be positive")


@dataclass
class SynthResult:
    log: EventLog
    schedule: list[tuple[str, int, str]]  # (channel_id, close_ts, label)
    reliability: np.ndarray
    node_names: list[str]
    counters: dict = field(default_factory=dict)

    def schedule_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel_id", "close_ts", "label"])
        w.writerows(self.schedule)
        return buf.getvalue()


def _policy(rng: np.random.Generator, base: dict, capacity: int, ts: int, missing: float) -> PolicySnapshot:
    vals = {
        "fee_base_msat": base["fee_base_msat"],
        "fee_rate_milli_msat": base["fee_rate_milli_msat"],
        "min_htlc": 1000,
        "max_htlc_msat": capacity * 1000,
        "time_lock_delta": base["time_lock_delta"],
        "disabled": bool(rng.random() < 0.05),
        "last_update": int(ts - rng.integers(0, DAY)),
        "implementation": base["implementation"],
    }
    drop = rng.random(len(vals)) < missing
    return PolicySnapshot(**{k: (None if d else v) for (k, v), d in zip(vals.items(), drop)})


def generate(params: SynthParams = SynthParams()) -> SynthResult:
    params.validate()
    rng = np.random.default_rng(params.seed)
    n = params.n_nodes
    names = [f"node{i:05d}" for i in range(n)]
    rel = rng.beta(params.reliability_a, params.reliability_b, size=n)
    node_policy = [
        {
            "fee_base_msat": int(rng.integers(0, 5001)),
            "fee_rate_milli_msat": int(rng.integers(0, 10_001)),
            "time_lock_delta": int(rng.choice([40, 80, 144])),
            "implementation": IMPL_CHOICES[rng.choice(len(IMPL_CHOICES), p=IMPL_PROBS)],
        }
        for _ in range(n)
    ]

    spd = params.snapshots_per_day
    n_snap = params.span_days * spd + 1
    step = DAY // spd
    snap_ts = params.t0 + step * np.arange(n_snap)
    used_pairs: set[frozenset] = set()
    events_by_snap: list[list[GossipEvent]] = [[] for _ in range(n_snap)]
    schedule: list[tuple[str, int, str]] = []
    counters = {"channels": 0, "closures": 0, "forced": 0, "mutual": 0}
    tx_counter = 0

    def new_pair():
        while True:
            a, b = rng.choice(n, size=2, replace=False)
            key = frozenset((int(a), int(b)))
            if key not in used_pairs:
                used_pairs.add(key)
                return int(a), int(b)

    def paired(e: GossipEvent) -> list[GossipEvent]:
        return [e, e.reversed()]

    def open_channel(k: int, may_close: bool):
        nonlocal tx_counter
        a, b = new_pair()
        ts = int(snap_ts[k])
        capacity = int(10 ** rng.uniform(5, 8))
        txid = f"{int(rng.integers(0, 2**62)):016x}{tx_counter:08x}"
        tx_counter += 1
        cid = f"{txid}:{int(rng.integers(0, 4))}"
        fee = None if rng.random() < params.missing_rate else round(float(rng.uniform(1, 50)), 3)
        chain_ts = ts - int(rng.integers(600, 6 * 3600))
        height = 740_000 + (chain_ts - params.t0) // 600
        sp = _policy(rng, node_policy[a], capacity, ts, params.missing_rate)
        dp = _policy(rng, node_policy[b], capacity, ts, params.missing_rate)
        common = dict(chain_ts=chain_ts, height=height, channel_id=cid, capacity=capacity, block_avg_fee_rate=fee)
        opening = GossipEvent(
            gossip_ts=ts, src=names[a], dst=names[b], channel_status=OPENING, event_label="open",
            src_policy=sp, dst_policy=dp, **common,
        )
        events_by_snap[k].extend(paired(opening))
        counters["channels"] += 1

        h_day = params.h0 * (1.0 - min(rel[a], rel[b]))
        p = 1.0 - (1.0 - h_day) ** (1.0 / spd)
        if not may_close or p <= 0:
            return
        gap = int(rng.geometric(p))
        kc = k + gap
        if kc >= n_snap:
            return
        label = "forced" if rng.random() < params.forced_share else "mutual"
        close_ts = int(snap_ts[kc])
        closing = GossipEvent(
            gossip_ts=close_ts, src=names[a], dst=names[b], channel_status=CLOSING, event_label=label,
            src_policy=sp, dst_policy=dp, **common,
        )
        events_by_snap[kc].extend(paired(closing))
        schedule.append((cid, close_ts, label))
        counters["closures"] += 1
        counters[label] += 1

    for _ in range(params.initial_channels):
        open_channel(0, params.warm_closures)
    for k in range(1, n_snap):
        for _ in range(int(rng.poisson(params.open_rate))):
            open_channel(k, True)

    events = [e for snap in events_by_snap for e in snap]
    nodes = {e.src for e in events}
    counters.update(
        events=len(events),
        opening=sum(1 for e in events if e.channel_status == OPENING),
        closing=sum(1 for e in events if e.channel_status == CLOSING),
        timestamps=len({e.gossip_ts for e in events}),
        nodes=len(nodes),
    )
    schedule.sort(key=lambda r: (r[1], r[0]))
    log = EventLog(tuple(events), {"source": "synth", "seed": params.seed})
    return SynthResult(log, schedule, rel, names, counters)
