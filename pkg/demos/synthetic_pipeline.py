"""End to end on generated data: build snapshots, train the MLP, compare with baselines.

Run: python3 demos/synthetic_pipeline.py   (about half a minute on a laptop)
"""

from lncb import SynthParams, TrainConfig, build_dataset, class_distribution, evaluate_baseline, evaluate_model, generate, train

synth = generate(SynthParams(seed=0))
print(f"{synth.counters['events']} events over {synth.counters['nodes']} nodes")

ds = build_dataset(synth.log, delta_days=180)
dist = class_distribution(ds)
print(f"{ds.n_instances} (edge, snapshot) instances: open {dist['open']:.3f}, forced {dist['forced']:.3f}, mutual {dist['mutual']:.3f}")

# A lighter configuration than the defaults so the demo finishes quickly.
config = TrainConfig(epochs=8, lr=1e-3, warmup_steps=50, d_time=16, hidden=64, max_open_edges_per_step=2000)
result = train(config, ds, progress=lambda e: print(f"  epoch {e['epoch']}: loss {e['train_loss']:.4f}, val macro-F1 {e['val_macro_f1']:.3f}"))

report = evaluate_model(result.model, ds, "test")
print(f"\nMLP test macro-F1 {report.macro_f1:.3f}  per class {report.f1.round(3).tolist()}")
for kind in ("majority", "stratified", "uniform"):
    print(f"{kind:>10} baseline macro-F1 {evaluate_baseline(kind, ds, 'test').macro_f1:.3f}")

print("\nF1 by edge age:")
for b in report.age_bins:
    print(f"  [{b['lo']:>5.0f}, {b['hi']:>5.0f}) days  n={b['instances']:>6}  macro-F1 {b['macro_f1']:.3f}")
