"""Command-line pipeline: ingest, stats, build, train, evaluate, baseline, sweep, attribute, synth.

Every option can also come from a plain-text config file (``--config``)
holding ``key = value`` lines; command-line flags override the file.
Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import NoSnapshots, SnapshotDataset, build_dataset, class_distribution
from .evaluation import EmptyInstances, EmptySplit, evaluate_baseline, evaluate_model, mean_std, sweep_csv, sweep_delta
from .features import SchemaMismatch
from .ingest import IngestError, dataset_stats, filter_parallel_channels, read_events, split_warm_start, write_events
from .labeling import DegenerateTimeline
from .model import BaselineKind, MlpModel, NoTrainSnapshots, TrainConfig, attribute, train
from .synth import InvalidParams, SynthParams, generate

logger = logging.getLogger("lncb")

COMMANDS = ("ingest", "stats", "build", "train", "evaluate", "baseline", "sweep", "attribute", "synth")
DATA_ERRORS = (
    IngestError,
    SchemaMismatch,
    EmptySplit,
    EmptyInstances,
    NoSnapshots,
    NoTrainSnapshots,
    DegenerateTimeline,
    InvalidParams,
    FileNotFoundError,
)


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    def parse(text):
        if text is None or str(text).strip().lower() in ("", "none", "null"):
            return None
        return conv(text)

    return parse


@dataclass
class RunConfig:
    input: str | None = None
    format: str | None = None
    dataset: str | None = None
    model: str | None = None
    out: str = "out"
    delta_days: float = 180.0
    splits: tuple[float, ...] = (0.70, 0.15, 0.15)
    class_weights: tuple[float, ...] = (1.0, 5.0, 5.0)
    downsample_ratio: float | None = None
    depth: int = 2
    hidden: int = 128
    d_time: int = 128
    epochs: int = 30
    lr: float = 1e-4
    weight_decay: float = 1e-5
    warmup_steps: int = 1000
    max_open_edges_per_step: int | None = None
    seed: int = 0
    seeds: tuple[int, ...] | None = None
    groups: tuple[str, ...] = ("edge", "node", "time")
    include_chain: bool = False
    filter_parallel: bool = True
    kind: str = "stratified"
    split: str = "test"
    deltas: tuple[float, ...] = (30.0, 90.0, 180.0, 365.0)
    per_snapshot: bool = False
    sample: int = 2000
    steps: int = 32
    # synth
    nodes: int = 1000
    span_days: int = 400
    snapshots_per_day: int = 1
    open_rate: float = 15.0
    initial_channels: int = 2000
    h0: float = 0.1
    forced_share: float = 0.45

    def validate(self) -> None:
        if self.format not in (None, "csv", "jsonl"):
            raise UsageError(f"--format must be csv or jsonl, got {self.format!r}")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1) > 1e-6:
            raise UsageError("--splits needs three fractions summing to 1")
        if len(self.class_weights) != 3 or min(self.class_weights) <= 0:
            raise UsageError("--class-weights needs three positive numbers")
        if self.depth not in (1, 2, 3):
            raise UsageError("--depth must be 1, 2 or 3")
        if self.split not in ("val", "test"):
            raise UsageError("--split must be val or test")
        if self.kind not in tuple(k.value for k in BaselineKind):
            raise UsageError(f"--kind must be one of {[k.value for k in BaselineKind]}")
        bad = set(self.groups) - {"edge", "node", "time"}
        if bad or not self.groups:
            raise UsageError(f"--groups takes a subset of edge,node,time; got {self.groups}")
        for name in ("epochs", "hidden", "d_time", "sample", "steps"):
            if getattr(self, name) < 1:
                raise UsageError(f"--{name.replace('_', '-')} must be positive")
        if self.delta_days <= 0:
            raise UsageError("--delta-days must be positive")

    def seed_list(self) -> tuple[int, ...]:
        return self.seeds if self.seeds else (self.seed,)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            weight_decay=self.weight_decay,
            warmup_steps=self.warmup_steps,
            class_weights=self.class_weights,
            downsample_ratio=self.downsample_ratio,
            seed=seed,
            delta_days=self.delta_days,
            groups=self.groups,
            depth=self.depth,
            hidden=self.hidden,
            d_time=self.d_time,
            max_open_edges_per_step=self.max_open_edges_per_step,
        )

    def synth_params(self) -> SynthParams:
        return SynthParams(
            n_nodes=self.nodes,
            span_days=self.span_days,
            snapshots_per_day=self.snapshots_per_day,
            open_rate=self.open_rate,
            initial_channels=self.initial_channels,
            h0=self.h0,
            forced_share=self.forced_share,
            seed=self.seed,
        )


CONVERTERS = {
    "input": str,
    "format": str,
    "dataset": str,
    "model": str,
    "out": str,
    "delta_days": float,
    "splits": _floats,
    "class_weights": _floats,
    "downsample_ratio": _opt(float),
    "depth": int,
    "hidden": int,
    "d_time": int,
    "epochs": int,
    "lr": float,
    "weight_decay": float,
    "warmup_steps": int,
    "max_open_edges_per_step": _opt(int),
    "seed": int,
    "seeds": _opt(_ints),
    "groups": _words,
    "include_chain": _bool,
    "filter_parallel": _bool,
    "kind": str,
    "split": str,
    "deltas": _floats,
    "per_snapshot": _bool,
    "sample": int,
    "steps": int,
    "nodes": int,
    "span_days": int,
    "snapshots_per_day": int,
    "open_rate": float,
    "initial_channels": int,
    "h0": float,
    "forced_share": float,
}
assert set(CONVERTERS) == {f.name for f in fields(RunConfig)}


def read_config_file(path: str) -> dict[str, str]:
    """Parse ``key = value`` (or ``key value``) lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = line.split("=", 1)
        else:
            parts = line.split(None, 1)
            key, value = parts[0], parts[1] if len(parts) > 1 else ""
        key = key.strip().lstrip("-").replace("-", "_")
        if key not in CONVERTERS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def build_config(file_values: dict[str, str], cli_values: dict[str, str]) -> RunConfig:
    merged = {**file_values, **{k: v for k, v in cli_values.items() if v is not None}}
    kwargs = {}
    for key, value in merged.items():
        try:
            kwargs[key] = CONVERTERS[key](value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {value!r} ({exc})") from None
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lncb", description="Lightning channel closure prediction from gossip logs.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="plain-text key = value configuration file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in CONVERTERS:
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, default=None, metavar=key.upper())
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    logger.info("wrote %s", path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def _need(cfg: RunConfig, *names: str) -> None:
    for n in names:
        if getattr(cfg, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _load_log(cfg: RunConfig):
    _need(cfg, "input")
    return read_events(cfg.input, cfg.format)


def _dataset(cfg: RunConfig) -> SnapshotDataset:
    if cfg.dataset:
        return SnapshotDataset.load(cfg.dataset)
    log = _load_log(cfg)
    return build_dataset(
        log, delta_days=cfg.delta_days, fractions=tuple(cfg.splits), include_chain=cfg.include_chain, filter_parallel=cfg.filter_parallel
    )


def _models(cfg: RunConfig) -> list[tuple[str, MlpModel]]:
    _need(cfg, "model")
    paths = [p for p in cfg.model.split(",") if p.strip()]
    return [(p, MlpModel.from_json(Path(p).read_text())) for p in paths]


def _summary(reports) -> dict:
    macro = [r.macro_f1 for r in reports]
    f1 = np.array([r.f1 for r in reports])
    m, s = mean_std(macro)
    return {
        "n_seeds": len(reports),
        "macro_f1_mean": m,
        "macro_f1_std": s,
        "f1_mean": f1.mean(axis=0).tolist(),
        "f1_std": (f1.std(axis=0, ddof=1) if len(reports) > 1 else np.zeros(3)).tolist(),
    }


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig) -> None:
    log = _load_log(cfg)
    raw_stats = dataset_stats(log)
    if cfg.filter_parallel:
        log = filter_parallel_channels(log)
    warm, timeline = split_warm_start(log)
    out = _out(cfg)
    write_events(log, str(out / "events.csv"), "csv")
    report = {
        "raw": raw_stats.to_dict(),
        "filtered": dataset_stats(log).to_dict(),
        "parallel_filter": log.meta.get("parallel_filter"),
        "warm_events": len(warm),
        "timeline_events": len(timeline),
        "rejected_rows": log.meta.get("rejected", []),
        "duplicates_dropped": log.meta.get("duplicates_dropped", 0),
        "twins_synthesized": log.meta.get("twins_synthesized", 0),
    }
    _write(out / "ingest_report.json", _dump(report))


def cmd_stats(cfg: RunConfig) -> None:
    sys.stdout.write(_dump(dataset_stats(_load_log(cfg)).to_dict()))


def cmd_build(cfg: RunConfig) -> None:
    log = _load_log(cfg)
    ds = build_dataset(
        log, delta_days=cfg.delta_days, fractions=tuple(cfg.splits), include_chain=cfg.include_chain, filter_parallel=cfg.filter_parallel
    )
    out = _out(cfg)
    ds.save(str(out / "dataset.npz"))
    for split in ("train", "val", "test"):
        _write(out / f"labels_{split}.csv", ds.labeled_snapshot_csv(split))
    b = ds.boundaries
    report = {
        "delta_days": cfg.delta_days,
        "boundaries": {"train_end_ts": b.train_end_ts, "val_end_ts": b.val_end_ts, "data_end_ts": b.data_end_ts},
        "snapshots": {s: int(len(ds.snapshots(s))) for s in ("train", "val", "test")},
        "instances": {s: int(len(ds.split_index(s))) for s in ("train", "val", "test")},
        "class_distribution": class_distribution(ds),
        "class_distribution_dedup_edges": class_distribution(ds, dedup_edges=True),
        "train_distribution": ds.label_distribution("train").tolist(),
        **ds.meta,
    }
    _write(out / "build_report.json", _dump(report))


def cmd_train(cfg: RunConfig) -> None:
    ds = _dataset(cfg)
    out = _out(cfg)
    for seed in cfg.seed_list():
        tc = cfg.train_config(seed)
        result = train(tc, ds)
        model = result.model
        extra = {"train_config": tc.to_dict(), "seed": seed, "best_epoch": result.best_epoch}
        _write(out / f"model_seed{seed}.json", model.to_json(extra))
        _write(out / f"train_log_seed{seed}.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in result.log))
        _write(out / "schema.json", _dump(model.schema.manifest()))


def cmd_evaluate(cfg: RunConfig) -> None:
    ds = _dataset(cfg)
    out = _out(cfg)
    delta = cfg.delta_days * 86_400
    reports = []
    for path, model in _models(cfg):
        r = evaluate_model(model, ds, cfg.split, delta, per_snapshot=cfg.per_snapshot)
        reports.append(r)
        stem = Path(path).stem
        _write(out / f"report_{stem}.json", r.to_json() + "\n")
        _write(out / f"confusion_{stem}.csv", r.confusion_csv())
        _write(out / f"age_bins_{stem}.csv", r.age_bins_csv())
    summary = _summary(reports)
    _write(out / "evaluate_summary.json", _dump(summary))
    sys.stdout.write(_dump(summary))


def cmd_baseline(cfg: RunConfig) -> None:
    ds = _dataset(cfg)
    out = _out(cfg)
    delta = cfg.delta_days * 86_400
    reports = []
    for seed in cfg.seed_list():
        r = evaluate_baseline(cfg.kind, ds, cfg.split, delta, seed=seed, per_snapshot=cfg.per_snapshot)
        reports.append(r)
        _write(out / f"baseline_{cfg.kind}_seed{seed}.json", r.to_json() + "\n")
    summary = _summary(reports)
    _write(out / f"baseline_{cfg.kind}_summary.json", _dump(summary))
    sys.stdout.write(_dump(summary))


def cmd_sweep(cfg: RunConfig) -> None:
    ds = _dataset(cfg)
    out = _out(cfg)
    rows = sweep_delta(cfg.train_config(cfg.seed), ds, cfg.deltas, cfg.split)
    _write(out / "sweep.csv", sweep_csv(rows))
    _write(
        out / "sweep.json",
        _dump([{k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in r.items()} for r in rows]),
    )


def cmd_attribute(cfg: RunConfig) -> None:
    ds = _dataset(cfg)
    out = _out(cfg)
    (path, model), *_ = _models(cfg)
    # open edges at the last training snapshot
    train_snaps = [s for s in ds.snapshots("train") if ds.offsets[s + 1] > ds.offsets[s]]
    if not train_snaps:
        raise NoTrainSnapshots("no training snapshot to sample from")
    idx = np.arange(ds.offsets[train_snaps[-1]], ds.offsets[train_snaps[-1] + 1])
    rng = np.random.default_rng(cfg.seed)
    if len(idx) > cfg.sample:
        idx = np.sort(rng.choice(idx, size=cfg.sample, replace=False))
    x = model.assemble(ds.tabular_raw(idx), ds.deltas[idx])
    att = attribute(model, x, steps=cfg.steps)
    ranking = [{"feature": n, "importance": v} for n, v in att.ranking()]
    _write(out / "attribution.json", _dump({"model": path, "sample": int(len(idx)), "steps": cfg.steps, "ranking": ranking}))


def cmd_synth(cfg: RunConfig) -> None:
    res = generate(cfg.synth_params())
    out = _out(cfg)
    fmt = cfg.format or "csv"
    write_events(res.log, str(out / f"events.{fmt}"), fmt)
    _write(out / "schedule.csv", res.schedule_csv())
    _write(out / "synth_counters.json", _dump(res.counters))


HANDLERS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "build": cmd_build,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "sweep": cmd_sweep,
    "attribute": cmd_attribute,
    "synth": cmd_synth,
}


@contextlib.contextmanager
def _thread_limit():
    limit = os.environ.get("LNCB_THREADS")
    if not limit:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(limit)):
        yield


def run(argv: list[str] | None = None) -> int:
    parser = make_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version, 2 for usage errors
        return 0 if exc.code in (0, None) else 1
    if not args.command:
        parser.print_usage(sys.stderr)
        sys.stderr.write("lncb: error: a subcommand is required\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cli_values = {k: getattr(args, k) for k in CONVERTERS}
        cfg = build_config(file_values, cli_values)
    except UsageError as exc:
        sys.stderr.write(f"lncb: error: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"lncb: error: cannot read config: {exc}\n")
        return 1
    try:
        with _thread_limit():
            HANDLERS[args.command](cfg)
    except UsageError as exc:
        sys.stderr.write(f"lncb: error: {exc}\n")
        return 1
    except DATA_ERRORS as exc:
        sys.stderr.write(f"lncb: data error: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        sys.stderr.write(f"lncb: runtime failure: {type(exc).__name__}: {exc}\n")
        return 3
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
