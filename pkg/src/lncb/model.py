"""MLP closure classifier, weighted cross-entropy, Adam training, baselines and attribution."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .features import FeatureSchema, Scaler, TimeEncoder, assemble_batch, transform

logger = logging.getLogger(__name__)

N_CLASSES = 3
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class EmptyBatchAfterDownsampling(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


class NoTrainSnapshots(ValueError):
    pass


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class MlpModel:
    weights: list[np.ndarray]  # (fan_in, fan_out)
    biases: list[np.ndarray]
    encoder: TimeEncoder
    schema: FeatureSchema
    scaler: Scaler | None = None

    @classmethod
    def init(
        cls,
        schema: FeatureSchema,
        depth: int = 2,
        hidden: int = 128,
        rng: np.random.Generator | int | None = 0,
        scaler: Scaler | None = None,
    ) -> "MlpModel":
        if depth not in (1, 2, 3):
            raise ValueError("depth must be 1, 2 or 3")
        rng = np.random.default_rng(rng)
        dims = [schema.width] + [hidden] * (depth - 1) + [N_CLASSES]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(1.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases, TimeEncoder.init(schema.d_time), schema, scaler)

    @property
    def depth(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.encoder.omega, self.encoder.phase]

    def copy(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            TimeEncoder(self.encoder.omega.copy(), self.encoder.phase.copy()),
            self.schema,
            self.scaler,
        )

    # -- forward / backward on assembled inputs ----------------------------

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        x = np.atleast_2d(x)
        if x.shape[1] != self.weights[0].shape[0]:
            raise ShapeMismatch(f"input width {x.shape[1]} != model width {self.weights[0].shape[0]}")
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if cache is not None:
                cache.append(h)
            h = h @ w + b
            if i < self.depth - 1:
                h = np.maximum(h, 0.0)
        return h

    def backward(self, cache: list, dlogits: np.ndarray) -> tuple[list, list, np.ndarray]:
        """Gradients of the layers and of the input, given dL/dlogits and a forward cache."""
        gw = [None] * self.depth
        gb = [None] * self.depth
        g = dlogits
        for i in reversed(range(self.depth)):
            h_in = cache[i]
            gw[i] = h_in.T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (h_in > 0)
        return gw, gb, g

    # -- raw inputs (scaled tabular + time deltas) -------------------------

    def assemble(self, tabular_raw: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        return assemble_batch(tabular_raw, deltas, self.scaler, self.encoder, self.schema)

    def predict_proba(self, tabular_raw: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        return softmax(self.forward(self.assemble(tabular_raw, deltas)))

    def predict(self, tabular_raw: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(self.assemble(tabular_raw, deltas)), axis=1).astype(np.int8)

    # -- checkpoint --------------------------------------------------------

    def to_dict(self, extra: dict | None = None) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "schema": self.schema.manifest(),
            "d_time": self.encoder.d_time,
            "layer_shapes": [list(w.shape) for w in self.weights],
            "weights": [_b64(w) for w in self.weights],
            "biases": [_b64(b) for b in self.biases],
            "time_encoder": {"omega": _b64(self.encoder.omega), "phase": _b64(self.encoder.phase)},
            "scaler": self.scaler.to_dict() if self.scaler else None,
            **(extra or {}),
        }

    def to_json(self, extra: dict | None = None) -> str:
        return json.dumps(self.to_dict(extra), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        shapes = d["layer_shapes"]
        weights = [_unb64(s, shape) for s, shape in zip(d["weights"], shapes)]
        biases = [_unb64(s, (shape[1],)) for s, shape in zip(d["biases"], shapes)]
        n = d["d_time"]
        enc = TimeEncoder(_unb64(d["time_encoder"]["omega"], (n,)), _unb64(d["time_encoder"]["phase"], (n,)))
        scaler = Scaler.from_dict(d["scaler"]) if d.get("scaler") else None
        return cls(weights, biases, enc, FeatureSchema.from_manifest(d["schema"]), scaler)

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    return model.forward(batch)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def downsample_rows(labels: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """All closing rows plus ``ratio`` uniformly drawn open rows per closing row."""
    closing = np.flatnonzero(labels != 0)
    opened = np.flatnonzero(labels == 0)
    k = min(len(opened), int(round(ratio * len(closing))))
    picked = rng.choice(opened, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    rows = np.sort(np.concatenate([closing, picked]))
    if len(rows) == 0:
        raise EmptyBatchAfterDownsampling("no closing rows in batch")
    return rows


def weighted_ce_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    weights=(1.0, 5.0, 5.0),
    downsample: float | None = None,
    rng: np.random.Generator | None = None,
    row_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean of ``weights[y] * -log softmax(logits)[y]`` and its gradient wrt ``logits``.

    Rows dropped by downsampling get a zero gradient. ``row_weights``
    multiplies each row's term (used to debias capped snapshots).
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (N_CLASSES,):
        raise ValueError("need one weight per class")
    labels = np.asarray(labels)
    rows = np.arange(len(labels))
    if downsample is not None:
        rows = downsample_rows(labels, downsample, rng if rng is not None else np.random.default_rng())
    if len(rows) == 0:
        raise EmptyBatchAfterDownsampling("empty batch")
    z = logits[rows]
    y = labels[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rw = w[y]
    if row_weights is not None:
        rw = rw * np.asarray(row_weights, dtype=float)[rows]
    n = len(rows)
    loss = float(-(rw * logp[np.arange(n), y]).sum() / n)
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    grad = np.zeros_like(logits, dtype=float)
    grad[rows] = g * (rw / n)[:, None]
    return loss, grad


def loss_and_grads(
    model: MlpModel,
    tabular_scaled: np.ndarray,
    deltas: np.ndarray,
    labels: np.ndarray,
    weights=(1.0, 5.0, 5.0),
    row_weights: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Loss and gradients for every parameter in ``model.params()`` order.

    ``tabular_scaled`` is already scaled and restricted to the enabled groups.
    """
    parts = [tabular_scaled]
    use_time = "time" in model.schema.groups
    if use_time:
        enc = model.encoder.encode(deltas)  # (n, 3, d)
        parts.append(enc.reshape(len(deltas), -1))
    x = np.concatenate(parts, axis=1)
    cache: list = []
    logits = model.forward(x, cache)
    loss, dlogits = weighted_ce_loss(logits, labels, weights, row_weights=row_weights)
    gw, gb, gx = model.backward(cache, dlogits)
    d = model.encoder.d_time
    if use_time:
        gt = gx[:, tabular_scaled.shape[1]:].reshape(len(deltas), 3, d)
        g_omega, g_phase = model.encoder.backward(deltas.reshape(-1), gt.reshape(-1, d))
    else:
        g_omega, g_phase = np.zeros(d), np.zeros(d)
    return loss, [*gw, *gb, g_omega, g_phase]


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay and linear warmup."""

    def __init__(self, params, lr=1e-4, weight_decay=1e-5, warmup_steps=1000, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def lr_at(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)

    def step(self, grads) -> float:
        self.t += 1
        lr = self.lr_at(self.t)
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)
        return lr


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    weight_decay: float = 1e-5
    warmup_steps: int = 1000
    class_weights: tuple[float, float, float] = (1.0, 5.0, 5.0)
    downsample_ratio: float | None = None
    seed: int = 0
    delta_days: float = 180.0
    groups: tuple[str, ...] = ("edge", "node", "time")
    depth: int = 2
    hidden: int = 128
    d_time: int = 128
    max_open_edges_per_step: int | None = None

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        self.groups = tuple(self.groups)
        if len(self.class_weights) != 3 or min(self.class_weights) <= 0:
            raise ValueError("class_weights must be three positive numbers")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.depth not in (1, 2, 3):
            raise ValueError("depth must be 1, 2 or 3")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        d["groups"] = list(self.groups)
        return d


def inverse_frequency_weights(train_dist) -> tuple[float, float, float]:
    """Class weights proportional to 1/frequency, normalised so Open gets 1."""
    p = np.asarray(train_dist, dtype=float)
    if np.any(p <= 0):
        raise ValueError("every class needs non-zero training frequency")
    w = p[0] / p
    return tuple(float(x) for x in w)


def cap_rows(labels: np.ndarray, cap: int | None, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Keep every closing row; fill up to ``cap`` with uniformly sampled open rows.

    Returns the kept rows and per-row loss weights; sampled open rows are
    up-weighted by ``n_open / n_kept_open`` so the loss stays unbiased.
    """
    n = len(labels)
    if cap is None or n <= cap:
        return np.arange(n), np.ones(n)
    closing = np.flatnonzero(labels != 0)
    opened = np.flatnonzero(labels == 0)
    k = max(0, min(len(opened), cap - len(closing)))
    rows = np.sort(np.concatenate([closing, rng.choice(opened, size=k, replace=False)]))
    w = np.ones(len(rows))
    if k:
        w[labels[rows] == 0] = len(opened) / k
    return rows, w


@dataclass
class TrainResult:
    model: MlpModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_macro_f1: float = float("nan")


def train(
    config: TrainConfig,
    dataset,
    scaler: Scaler | None = None,
    *,
    evaluate_fn: Callable | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Fit an MLP by replaying the training snapshots in time order, one Adam step per snapshot.

    Each epoch walks the train-split snapshots chronologically (a fresh
    replay from the warm-start state; the replay itself is materialised in
    ``dataset``). The checkpoint with the best validation macro-F1 is
    returned.
    """
    from .evaluation import evaluate_model

    evaluate_fn = evaluate_fn or evaluate_model
    schema = FeatureSchema(config.groups, config.d_time, dataset.include_chain)
    if scaler is None:
        scaler = dataset.fit_scaler(schema)
    delta = config.delta_days * 86_400
    labels = dataset.labels(delta)
    snaps = [s for s in dataset.snapshots("train") if dataset.offsets[s + 1] > dataset.offsets[s]]
    if not snaps:
        raise NoTrainSnapshots("no training snapshot has open edges")

    rng = np.random.default_rng(config.seed)
    model = MlpModel.init(schema, config.depth, config.hidden, rng, scaler)
    opt = Adam(model.params(), config.lr, config.weight_decay, config.warmup_steps)
    sel = schema.tabular_selection()

    result = TrainResult(model=model.copy())
    best = -np.inf
    for epoch in range(1, config.epochs + 1):
        total, n_steps, skipped = 0.0, 0, 0
        lr = opt.lr_at(opt.t)
        for s in snaps:
            idx = np.arange(dataset.offsets[s], dataset.offsets[s + 1])
            y = labels[idx]
            rows, row_w = cap_rows(y, config.max_open_edges_per_step, rng)
            if config.downsample_ratio is not None:
                try:
                    keep = downsample_rows(y[rows], config.downsample_ratio, rng)
                except EmptyBatchAfterDownsampling:
                    skipped += 1
                    continue
                # downsampling defines its own open/closing balance
                rows, row_w = rows[keep], np.ones(len(keep))
            idx, y = idx[rows], y[rows]
            tab = transform(scaler, dataset.tabular_raw(idx))[:, sel]
            loss, grads = loss_and_grads(model, tab, dataset.deltas[idx], y, config.class_weights, row_w)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}, step {opt.t + 1}")
            lr = opt.step(grads)
            total += loss
            n_steps += 1
        report = evaluate_fn(model, dataset, "val", delta)
        entry = {
            "epoch": epoch,
            "train_loss": total / max(n_steps, 1),
            "steps": n_steps,
            "skipped_steps": skipped,
            "val_macro_f1": report.macro_f1,
            "val_f1": dict(zip(("open", "forced", "mutual"), report.f1.tolist())),
            "lr": lr,
            "max_open_edges_per_step": config.max_open_edges_per_step,
        }
        result.log.append(entry)
        if progress:
            progress(entry)
        logger.info("epoch %d loss %.4f val macro-F1 %.4f", epoch, entry["train_loss"], report.macro_f1)
        if report.macro_f1 > best:
            best = report.macro_f1
            result.model = model.copy()
            result.best_epoch = epoch
            result.best_val_macro_f1 = report.macro_f1
    return result


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


class BaselineKind(str, Enum):
    UNIFORM = "uniform"
    STRATIFIED = "stratified"
    MAJORITY = "majority"


def predict_baseline(kind: BaselineKind | str, train_dist, n: int, rng: np.random.Generator) -> np.ndarray:
    kind = BaselineKind(kind)
    if kind is BaselineKind.MAJORITY:
        return np.zeros(n, dtype=np.int8)
    if kind is BaselineKind.UNIFORM:
        return rng.integers(0, N_CLASSES, size=n).astype(np.int8)
    p = np.asarray(train_dist, dtype=float)
    if p.shape != (N_CLASSES,) or abs(p.sum() - 1) > 1e-9 or np.any(p < 0):
        raise ValueError("stratified baseline needs a probability vector over 3 classes")
    return rng.choice(N_CLASSES, size=n, p=p).astype(np.int8)


# ---------------------------------------------------------------------------
# attribution
# ---------------------------------------------------------------------------


def integrated_gradients(
    model: MlpModel,
    x: np.ndarray,
    target: np.ndarray | int | None = None,
    baseline: np.ndarray | None = None,
    steps: int = 32,
) -> np.ndarray:
    """Path attributions of the target-class logit from ``baseline`` (zeros) to ``x``.

    Uses the midpoint rule along the straight path. ``target`` defaults to
    the predicted class of each row.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    base = np.zeros_like(x) if baseline is None else np.broadcast_to(baseline, x.shape)
    if target is None:
        target = np.argmax(model.forward(x), axis=1)
    target = np.broadcast_to(np.asarray(target), (x.shape[0],))
    onehot = np.zeros((x.shape[0], N_CLASSES))
    onehot[np.arange(x.shape[0]), target] = 1.0
    diff = x - base
    total = np.zeros_like(x)
    for k in range(steps):
        alpha = (k + 0.5) / steps
        cache: list = []
        model.forward(base + alpha * diff, cache)
        _, _, gx = model.backward(cache, onehot)
        total += gx
    return diff * total / steps


@dataclass
class Attribution:
    names: list[str]
    importance: np.ndarray  # mean |attribution| per reported feature

    def ranking(self) -> list[tuple[str, float]]:
        order = np.argsort(-self.importance, kind="stable")
        return [(self.names[i], float(self.importance[i])) for i in order]


def attribute(model: MlpModel, sample: np.ndarray, steps: int = 32, target=None) -> Attribution:
    """Mean absolute path attribution per feature; time-encoding columns roll up to their scalar."""
    attr = integrated_gradients(model, sample, target=target, steps=steps)
    sources = model.schema.source_of()
    names: list[str] = []
    for s in sources:
        if s not in names:
            names.append(s)
    col = np.array([names.index(s) for s in sources])
    rolled = np.zeros((attr.shape[0], len(names)))
    np.add.at(rolled.T, col, attr.T)
    return Attribution(names, np.abs(rolled).mean(axis=0))

