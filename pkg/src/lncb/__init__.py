"""Lightning Network channel-closure prediction from gossip event logs."""

__version__ = "0.1.0"

from .dataset import SnapshotDataset, build_dataset, class_distribution
from .evaluation import (
    MetricsReport,
    Predictions,
    age_binned_f1,
    confusion,
    evaluate,
    evaluate_baseline,
    evaluate_model,
    f1_report,
    sweep_delta,
)
from .features import FeatureSchema, Scaler, TimeEncoder, assemble, encode_time, fit_scaler, transform
from .ingest import (
    EventLog,
    GossipEvent,
    PolicySnapshot,
    dataset_stats,
    filter_parallel_channels,
    parse_events,
    read_events,
    serialize_events,
    split_warm_start,
)
from .labeling import ClosureIndex, Label, build_closure_index, chronological_split, label_edge, label_snapshot
from .model import BaselineKind, MlpModel, TrainConfig, attribute, predict_baseline, train, weighted_ce_loss
from .state import GraphState, apply_event, open_edges_at, recency
from .synth import SynthParams, generate
