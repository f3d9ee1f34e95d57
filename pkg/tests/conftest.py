from __future__ import annotations

import numpy as np
import pytest

from lncb.dataset import build_dataset
from lncb.ingest import CLOSING, OPENING, GossipEvent, Implementation, PolicySnapshot
from lncb.synth import SynthParams, generate

POLICY = PolicySnapshot(
    fee_base_msat=1000,
    fee_rate_milli_msat=100,
    min_htlc=1000,
    max_htlc_msat=990_000_000,
    time_lock_delta=40,
    disabled=False,
    last_update=1_650_000_000,
    implementation=Implementation.LND,
)


def ev(ts, src, dst, status=OPENING, label=None, cid=None, capacity=1_000_000, **kw) -> GossipEvent:
    if label is None:
        label = "open" if status == OPENING else "mutual"
    if cid is None:
        a, b = sorted((src, dst))
        cid = f"tx{a}{b}:0"
    return GossipEvent(
        gossip_ts=ts,
        chain_ts=kw.pop("chain_ts", max(0, ts - 600)),
        height=kw.pop("height", 750_000),
        channel_id=cid,
        src=src,
        dst=dst,
        capacity=capacity,
        block_avg_fee_rate=kw.pop("block_avg_fee_rate", 12.5),
        channel_status=status,
        event_label=label,
        src_policy=kw.pop("src_policy", POLICY),
        dst_policy=kw.pop("dst_policy", POLICY),
    )


def random_stream(rng: np.random.Generator, n_events: int, n_nodes: int = 30, p_close: float = 0.45) -> list[GossipEvent]:
    """Directed events on a small node set, non-decreasing timestamps, closes of
    unknown edges and re-openings included."""
    nodes = [f"n{i}" for i in range(n_nodes)]
    open_now: set[tuple[str, str]] = set()
    out = []
    ts = 1_000
    for _ in range(n_events):
        ts += int(rng.choice([0, 0, 1, 3600, 86_400]))
        if open_now and rng.random() < p_close:
            if rng.random() < 0.9:
                edge = sorted(open_now)[rng.integers(len(open_now))]
            else:
                a, b = rng.choice(n_nodes, size=2, replace=False)
                edge = (nodes[a], nodes[b])
            label = str(rng.choice(["mutual", "forced", "penalty"], p=[0.55, 0.43, 0.02]))
            out.append(ev(ts, *edge, status=CLOSING, label=label))
            open_now.discard(edge)
        else:
            a, b = rng.choice(n_nodes, size=2, replace=False)
            edge = (nodes[a], nodes[b])
            out.append(ev(ts, *edge))
            open_now.add(edge)
    return out


def brute_open_edges(events) -> set[tuple[str, str]]:
    """An edge is open when its latest interaction event is an opening."""
    last: dict[tuple[str, str], str] = {}
    for e in events:
        last[e.edge] = e.channel_status
    return {edge for edge, status in last.items() if status == OPENING}


SMALL_SYNTH = SynthParams(n_nodes=200, span_days=120, open_rate=6.0, initial_channels=300, seed=7)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_dataset(small_synth):
    return build_dataset(small_synth.log, delta_days=30)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
