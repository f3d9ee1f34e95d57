"""Which inputs does a trained model lean on? Integrated gradients on a snapshot sample.

Run: python3 demos/attribution.py
"""

import numpy as np

from lncb import SynthParams, TrainConfig, attribute, build_dataset, generate, train

ds = build_dataset(generate(SynthParams(n_nodes=400, span_days=200, open_rate=8, initial_channels=800, seed=1)).log, delta_days=60)
model = train(TrainConfig(epochs=5, lr=1e-3, warmup_steps=20, d_time=8, hidden=32, delta_days=60), ds).model

# sample open edges from the last training snapshot
last = [s for s in ds.snapshots("train") if ds.offsets[s + 1] > ds.offsets[s]][-1]
idx = np.arange(ds.offsets[last], ds.offsets[last + 1])[:500]
x = model.assemble(ds.tabular_raw(idx), ds.deltas[idx])

# time-encoding columns are summed back into edge_age / src_recency / dst_recency
for name, score in attribute(model, x, steps=32).ranking()[:10]:
    print(f"{score:10.5f}  {name}")
