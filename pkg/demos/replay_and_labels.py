"""Replay a small synthetic gossip stream and look at what the model will be asked.

Run: python3 demos/replay_and_labels.py
"""

import numpy as np

from lncb import build_closure_index, generate, label_edge, split_warm_start
from lncb.state import DAY, GraphState, open_edges_at
from lncb.synth import SynthParams

result = generate(SynthParams(n_nodes=120, span_days=90, open_rate=4, initial_channels=150, seed=3))
warm, timeline = split_warm_start(result.log)
print(f"{len(warm)} warm-start events, {len(timeline)} events after it")

# The warm snapshot seeds the graph; nothing is predicted on it.
state = GraphState().replay(warm.events)
print(f"open directed edges after warm start: {len(open_edges_at(state))}")

index = build_closure_index(timeline, warm)

# Walk forward thirty days and stop at that snapshot.
stop = warm.events[0].gossip_ts + 30 * DAY
state.replay(e for e in timeline.events if e.gossip_ts <= stop)
edges = [(s, d) for s, d, _ in open_edges_at(state)]

# The same open edges labeled under three lookahead windows.
for days in (7, 30, 90):
    labels = np.array([label_edge(index, e, state.current_ts, days * DAY) for e in edges])
    shares = np.bincount(labels, minlength=3) / len(labels)
    print(f"dt={days:>3}d  open {shares[0]:.3f}  forced {shares[1]:.3f}  mutual {shares[2]:.3f}")

# Per-node history, the feature group that carries most of the signal.
busiest = sorted(state.node_stats.items(), key=lambda kv: -kv[1].count_open)[:5]
for name, st in busiest:
    print(f"{name}: opened {st.count_open}, forced {st.count_forced}, mutual {st.count_mutual}")
