"""Metrics, confusion analysis, age-binned F1 and the lookahead-window sweep."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .labeling import CLASS_NAMES
from .model import BaselineKind, MlpModel, TrainConfig, predict_baseline, train
from .state import DAY

AGE_BIN_EDGES = (0.0, 30.0, 90.0, 180.0, 365.0, math.inf)
N_CLASSES = 3


class EmptyInstances(ValueError):
    pass


class EmptySplit(ValueError):
    pass


@dataclass
class Predictions:
    """Column-wise prediction instances: one row per (open edge, evaluation snapshot)."""

    true: np.ndarray
    predicted: np.ndarray
    edge_age_days: np.ndarray | None = None
    snapshot_ts: np.ndarray | None = None
    src: np.ndarray | None = None
    dst: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.true)

    def subset(self, mask) -> "Predictions":
        def pick(a):
            return None if a is None else a[mask]

        return Predictions(
            self.true[mask], self.predicted[mask], pick(self.edge_age_days), pick(self.snapshot_ts), pick(self.src), pick(self.dst)
        )


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    counts: np.ndarray
    normalized: np.ndarray
    empty_rows: np.ndarray
    age_bins: list[dict] = field(default_factory=list)
    per_snapshot_macro_f1: float | None = None
    predictions: Predictions | None = None

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    def to_dict(self) -> dict:
        d = {
            "macro_f1": self.macro_f1,
            "per_class": {
                name: {
                    "precision": float(self.precision[i]),
                    "recall": float(self.recall[i]),
                    "f1": float(self.f1[i]),
                    "support": int(self.support[i]),
                }
                for i, name in enumerate(CLASS_NAMES)
            },
            "confusion_counts": self.counts.tolist(),
            "confusion_normalized": self.normalized.tolist(),
            "confusion_empty_rows": self.empty_rows.tolist(),
            "age_bins": self.age_bins,
        }
        if self.per_snapshot_macro_f1 is not None:
            d["per_snapshot_macro_f1"] = self.per_snapshot_macro_f1
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true"] + [f"pred_{c}" for c in CLASS_NAMES])
        for name, row in zip(CLASS_NAMES, self.normalized):
            w.writerow([name] + [f"{v:.6f}" for v in row])
        return buf.getvalue()

    def age_bins_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo_days", "bin_hi_days", "instances", "empty"] + [f"f1_{c}" for c in CLASS_NAMES] + ["macro_f1"])
        for b in self.age_bins:
            w.writerow([b["lo"], b["hi"], b["instances"], b["empty"], *b["f1"], b["macro_f1"]])
        return buf.getvalue()


def _arrays(instances) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(instances, Predictions):
        return np.asarray(instances.true), np.asarray(instances.predicted)
    t, p = instances
    return np.asarray(t), np.asarray(p)


def confusion(instances) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts ``[true][pred]``, the row-normalised matrix, and a flag per empty row."""
    t, p = _arrays(instances)
    if len(t) == 0:
        raise EmptyInstances("no prediction instances")
    counts = np.bincount(t.astype(np.int64) * N_CLASSES + p.astype(np.int64), minlength=N_CLASSES**2)
    counts = counts.reshape(N_CLASSES, N_CLASSES)
    rows = counts.sum(axis=1, keepdims=True)
    empty = rows[:, 0] == 0
    normalized = np.divide(counts, rows, out=np.zeros((N_CLASSES, N_CLASSES)), where=rows > 0)
    return counts, normalized, empty


def report_from_counts(counts: np.ndarray) -> MetricsReport:
    counts = np.asarray(counts)
    tp = np.diag(counts).astype(float)
    pred = counts.sum(axis=0).astype(float)
    true = counts.sum(axis=1).astype(float)
    precision = np.divide(tp, pred, out=np.zeros(N_CLASSES), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros(N_CLASSES), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(N_CLASSES), where=denom > 0)
    rows = true[:, None]
    normalized = np.divide(counts, rows, out=np.zeros((N_CLASSES, N_CLASSES)), where=rows > 0)
    return MetricsReport(precision, recall, f1, true.astype(np.int64), counts, normalized, true == 0)


def f1_report(instances) -> MetricsReport:
    counts, _, _ = confusion(instances)
    report = report_from_counts(counts)
    if isinstance(instances, Predictions) and instances.edge_age_days is not None:
        report.age_bins = age_binned_f1(instances)
    return report


def age_binned_f1(instances: Predictions, bin_edges_days=AGE_BIN_EDGES) -> list[dict]:
    if instances.edge_age_days is None:
        raise ValueError("instances carry no edge ages")
    ages = np.asarray(instances.edge_age_days)
    table = []
    for lo, hi in zip(bin_edges_days[:-1], bin_edges_days[1:]):
        mask = (ages >= lo) & (ages < hi)
        n = int(mask.sum())
        if n:
            r = report_from_counts(confusion(instances.subset(mask))[0])
            f1, macro = r.f1.tolist(), r.macro_f1
        else:
            f1, macro = [0.0, 0.0, 0.0], 0.0
        table.append({"lo": lo, "hi": hi, "instances": n, "empty": n == 0, "f1": f1, "macro_f1": macro})
    return table


# ---------------------------------------------------------------------------
# evaluation over a split
# ---------------------------------------------------------------------------


def _predict_model(model: MlpModel, dataset, idx: np.ndarray, chunk: int = 65_536) -> np.ndarray:
    out = np.empty(len(idx), dtype=np.int8)
    for i in range(0, len(idx), chunk):
        j = idx[i : i + chunk]
        out[i : i + chunk] = model.predict(dataset.tabular_raw(j), dataset.deltas[j])
    return out


def _finish(dataset, idx, y_true, y_pred, per_snapshot: bool, keep: bool):
    snap_of = np.repeat(np.arange(len(dataset.snap_ts)), np.diff(dataset.offsets))[idx]
    preds = Predictions(
        y_true,
        y_pred,
        dataset.edge_age_days(idx),
        dataset.snap_ts[snap_of],
        dataset.src[idx],
        dataset.dst[idx],
    )
    report = f1_report(preds)
    if per_snapshot:
        scores = []
        for s in np.unique(snap_of):
            m = snap_of == s
            scores.append(report_from_counts(confusion((y_true[m], y_pred[m]))[0]).macro_f1)
        report.per_snapshot_macro_f1 = float(np.mean(scores))
    if keep:
        report.predictions = preds
    return report


def evaluate_model(model: MlpModel, dataset, split: str = "test", delta: float | None = None, *, per_snapshot=False, keep=False) -> MetricsReport:
    idx = dataset.split_index(split)
    if len(idx) == 0:
        raise EmptySplit(f"split {split!r} has no prediction instances")
    y_true = dataset.labels(delta)[idx]
    return _finish(dataset, idx, y_true, _predict_model(model, dataset, idx), per_snapshot, keep)


def evaluate_baseline(
    kind: BaselineKind | str, dataset, split: str = "test", delta: float | None = None, *, seed: int = 0, per_snapshot=False, keep=False
) -> MetricsReport:
    idx = dataset.split_index(split)
    if len(idx) == 0:
        raise EmptySplit(f"split {split!r} has no prediction instances")
    y_true = dataset.labels(delta)[idx]
    dist = dataset.label_distribution("train", delta)
    y_pred = predict_baseline(kind, dist, len(idx), np.random.default_rng(seed))
    return _finish(dataset, idx, y_true, y_pred, per_snapshot, keep)


def evaluate(predictor, dataset, split: str = "test", delta: float | None = None, **kwargs) -> MetricsReport:
    """Evaluate an :class:`MlpModel` or a baseline kind at every snapshot of ``split``."""
    if split not in ("val", "test", "train"):
        raise ValueError(f"unknown split {split!r}")
    if isinstance(predictor, MlpModel):
        return evaluate_model(predictor, dataset, split, delta, **kwargs)
    return evaluate_baseline(predictor, dataset, split, delta, **kwargs)


def sweep_delta(config: TrainConfig, dataset, deltas_days=(30, 90, 180, 365), split: str = "test") -> list[dict]:
    """Retrain and evaluate the MLP and the stratified baseline for each lookahead window."""
    rows = []
    for days in deltas_days:
        cfg = replace(config, delta_days=float(days))
        delta = float(days) * DAY
        result = train(cfg, dataset)
        mlp = evaluate_model(result.model, dataset, split, delta)
        strat = evaluate_baseline(BaselineKind.STRATIFIED, dataset, split, delta, seed=config.seed)
        rows.append(
            {
                "delta_days": days,
                "mlp_macro_f1": mlp.macro_f1,
                "stratified_macro_f1": strat.macro_f1,
                "gap": mlp.macro_f1 - strat.macro_f1,
                "mlp": mlp,
                "stratified": strat,
            }
        )
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["delta_days", "mlp_macro_f1", "stratified_macro_f1", "gap"])
    for r in rows:
        w.writerow([r["delta_days"], f"{r['mlp_macro_f1']:.6f}", f"{r['stratified_macro_f1']:.6f}", f"{r['gap']:.6f}"])
    return buf.getvalue()


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0
