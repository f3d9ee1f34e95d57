import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lncb.features import (
    CLIP_HI,
    CLIP_LO,
    EdgeNotOpen,
    EmptyTrainingSet,
    FeatureSchema,
    SchemaMismatch,
    Scaler,
    TimeEncoder,
    assemble,
    assemble_batch,
    edge_raw_row,
    encode_time,
    fit_scaler,
    node_counts,
    transform,
)
from lncb.ingest import Implementation, PolicySnapshot, split_warm_start
from lncb.labeling import build_closure_index, label_edge
from lncb.state import DAY, GraphState

from conftest import ev

COLS = [("a", True), ("flag", False), ("b", True)]


def test_scaler_analytic():
    rows = np.array([[0.0, 1.0, 5.0], [np.e - 1, 0.0, 5.0]])
    sc = fit_scaler(rows, COLS)
    np.testing.assert_allclose(sc.min, [0.0, 0.0, np.log(6)])
    # constant column gets max = min + 1
    np.testing.assert_allclose(sc.max, [1.0, 1.0, np.log(6) + 1])
    np.testing.assert_allclose(transform(sc, rows), [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]], atol=1e-12)


def test_scaler_clamps_and_imputes():
    sc = fit_scaler(np.array([[0.0, 0.0, 1.0], [np.e - 1, 1.0, 2.0]]), COLS)
    far = np.exp(10.0) - 1
    out = transform(sc, np.array([[far, 1.0, np.nan]]))
    assert out[0, 0] == CLIP_HI
    assert out[0, 2] == 0.0
    assert out[0, 1] == 1.0


def test_scaler_ignores_nan_when_fitting():
    sc = fit_scaler(np.array([[np.nan, 0.0, 1.0], [3.0, 0.0, 1.0]]), COLS)
    assert sc.min[0] == pytest.approx(np.log1p(3.0))


def test_scaler_errors():
    with pytest.raises(EmptyTrainingSet):
        fit_scaler(np.zeros((0, 3)), COLS)
    with pytest.raises(SchemaMismatch):
        fit_scaler(np.zeros((2, 2)), COLS)
    sc = fit_scaler(np.ones((2, 3)), COLS)
    with pytest.raises(SchemaMismatch):
        transform(sc, np.ones(4))


def test_scaler_dict_round_trip():
    sc = fit_scaler(np.array([[1.0, 0.0, 2.0], [4.0, 1.0, 9.0]]), COLS)
    back = Scaler.from_dict(sc.to_dict())
    x = np.array([[2.0, 1.0, 3.0]])
    assert np.array_equal(transform(back, x), transform(sc, x))


@settings(max_examples=60, deadline=None)
@given(
    rows=hnp.arrays(float, st.tuples(st.integers(1, 20), st.just(3)), elements=st.floats(0, 1e12)),
    probe=hnp.arrays(float, 3, elements=st.floats(0, 1e15)),
)
def test_scaled_values_bounded(rows, probe):
    sc = fit_scaler(rows, COLS)
    train = transform(sc, rows)
    num = sc.numeric
    assert np.all(train[:, num] >= -1e-9) and np.all(train[:, num] <= 1 + 1e-9)
    out = transform(sc, probe)
    assert np.all(np.isfinite(out))
    assert np.all(out[num] >= CLIP_LO) and np.all(out[num] <= CLIP_HI)


def test_time_encoder_init_and_oracle():
    enc = TimeEncoder.init(5)
    assert enc.omega.tolist() == pytest.approx([1.0, 0.1, 0.01, 0.001, 0.0001])
    assert np.all(enc.phase == 0)
    d = np.array([0.0, 3 * DAY])
    got = encode_time(enc, d)
    want = np.array([[np.cos(w * t / DAY) for w in enc.omega] for t in d])
    assert got == pytest.approx(want)
    assert np.all(encode_time(enc, [0.0]) == 1.0)
    with pytest.raises(ValueError):
        encode_time(enc, [-1.0])


def test_time_encoder_gradient_finite_difference():
    rng = np.random.default_rng(0)
    enc = TimeEncoder(rng.uniform(0.01, 1, 4), rng.uniform(-1, 1, 4))
    d = rng.uniform(0, 30 * DAY, size=(6, 3))
    g_out = rng.normal(size=(6, 3, 4))

    def f(e):
        return float(np.sum(e.encode(d) * g_out))

    g_omega, g_phase = enc.backward(d, g_out)
    eps = 1e-6
    for name, grad in (("omega", g_omega), ("phase", g_phase)):
        for i in range(4):
            plus, minus = TimeEncoder(enc.omega.copy(), enc.phase.copy()), TimeEncoder(enc.omega.copy(), enc.phase.copy())
            getattr(plus, name)[i] += eps
            getattr(minus, name)[i] -= eps
            assert grad[i] == pytest.approx((f(plus) - f(minus)) / (2 * eps), rel=1e-5, abs=1e-6)


def test_schema_widths_and_groups():
    s = FeatureSchema(d_time=8)
    # capacity, fee rate and its missing bit, then 19 columns per policy side
    assert s.n_edge == 3 + 2 * 19
    assert s.width == 41 + 6 + 24
    assert len(s.names()) == s.width == len(s.source_of())
    assert FeatureSchema(("node",), d_time=8).width == 6
    assert FeatureSchema(("time",), d_time=8).width == 24
    assert FeatureSchema(include_chain=True).n_edge == 45
    assert FeatureSchema(("time", "edge")).groups == ("edge", "time")
    with pytest.raises(ValueError):
        FeatureSchema(("weather",))
    with pytest.raises(ValueError):
        FeatureSchema(())


def test_schema_digest_stable_and_manifest_checked():
    a, b = FeatureSchema(d_time=16), FeatureSchema(d_time=16)
    assert a.digest() == b.digest() != FeatureSchema(d_time=17).digest()
    assert FeatureSchema.from_manifest(a.manifest()) == a
    m = a.manifest()
    m["features"] = m["features"][::-1]
    with pytest.raises(SchemaMismatch):
        FeatureSchema.from_manifest(m)


def test_edge_row_missing_and_one_hot():
    pol = PolicySnapshot(fee_base_msat=3, implementation=Implementation.CLN)
    row = edge_raw_row(ev(10, "a", "b", src_policy=pol, block_avg_fee_rate=None))
    names = [n for n, _ in FeatureSchema().edge_columns]
    r = dict(zip(names, row))
    assert np.isnan(r["block_avg_fee_rate"]) and r["block_avg_fee_rate_missing"] == 1
    assert r["src_fee_base_msat"] == 3 and r["src_fee_base_msat_missing"] == 0
    assert np.isnan(r["src_min_htlc"]) and r["src_min_htlc_missing"] == 1
    assert r["src_disabled_missing"] == 1
    assert [r[f"src_impl_{i.value}"] for i in Implementation] == [float(i is Implementation.CLN) for i in Implementation]
    assert r["dst_impl_LND"] == 1 and r["dst_disabled"] == 0


def test_node_counts_hand_counted():
    events = [
        ev(1, "a", "b"),
        ev(2, "a", "c"),
        ev(3, "a", "b", status="closing", label="forced"),
        ev(4, "c", "a", status="closing", label="mutual"),
    ]
    s = GraphState().replay(events)
    assert node_counts(s, "a", "c").tolist() == [2, 1, 1, 1, 0, 1]
    assert node_counts(s, "zz", "b").tolist() == [0, 0, 0, 1, 1, 0]


def test_assemble_requires_open_edge():
    s = GraphState().replay([ev(1, "a", "b")])
    schema = FeatureSchema(d_time=4)
    sc = fit_scaler(np.zeros((1, len(schema.tabular_columns))), schema.tabular_columns)
    with pytest.raises(EdgeNotOpen):
        assemble(("b", "a"), s, 5, sc, TimeEncoder.init(4), schema)
    x = assemble(("a", "b"), s, 1 + 2 * DAY, sc, TimeEncoder.init(4), schema)
    assert x.shape == (schema.width,)
    # edge age of two days fills the first time block
    assert x[47:51] == pytest.approx(np.cos(2 * TimeEncoder.init(4).omega))


def test_dataset_matches_online_replay(small_synth, small_dataset):
    """Materialised arrays agree with a from-scratch replay plus per-edge assembly."""
    ds = small_dataset
    schema = FeatureSchema(d_time=8)
    sc = ds.fit_scaler(schema)
    enc = TimeEncoder.init(8)
    warm, timeline = split_warm_start(small_synth.log)
    index = build_closure_index(timeline, warm)
    state = GraphState().replay(warm.events)
    events = timeline.events
    targets = set(np.linspace(0, len(ds.snap_ts) - 1, 6).astype(int).tolist())
    i = 0
    for s, ts in enumerate(ds.snap_ts):
        while i < len(events) and events[i].gossip_ts <= ts:
            state.apply(events[i])
            i += 1
        if s not in targets:
            continue
        sl = ds.snapshot_slice(s)
        idx = np.arange(sl.start, sl.stop)
        names = ds.node_names
        edges = [(names[a], names[b]) for a, b in zip(ds.src[idx], ds.dst[idx])]
        assert set(edges) == set(state.open_edges)
        batch = assemble_batch(ds.tabular_raw(idx), ds.deltas[idx], sc, enc, schema)
        labels = ds.labels()[idx]
        for j, edge in enumerate(edges):
            single = assemble(edge, state, int(ts), sc, enc, schema)
            np.testing.assert_allclose(batch[j], single, rtol=1e-12, atol=1e-12)
            assert labels[j] == label_edge(index, edge, int(ts), int(ds.delta))
