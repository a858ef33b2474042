import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcids import dbn
from bcids.config import InvalidConfig, TrainConfig
from bcids.dbn import EmptyDataset, FeatureMoments, GradientBundle
from bcids.federated import (
    EmptyInput,
    GlobalModel,
    LeakError,
    LocalDataset,
    MessageKind,
    MessageLayer,
    NodeState,
    ProtocolError,
    RoundMessage,
    ServerState,
    ShapeMismatch,
    StragglerTimeout,
    average_gradients,
    run_round,
    train_centralized,
    train_collaborative,
    train_independent,
)
from bcids.traffic import DISCRETE_INDEX, FEATURE_NAMES, VOCABULARIES


def toy_dataset(n, seed, classes=(0, 1, 2, 3)):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, len(FEATURE_NAMES)))
    for name, col in DISCRETE_INDEX.items():
        X[:, col] = rng.integers(0, len(VOCABULARIES[name]), n)
    y = rng.choice(classes, n)
    X[:, 4] += 2.0 * y  # make the labels learnable
    return LocalDataset(X, y)


SMALL = TrainConfig(hidden_sizes=(6, 4), pretrain_epochs=1, pretrain_batch=16,
                    max_rounds=5, learning_rate=0.5, n_nodes=3, seed=7)


def bundle(rng, shapes=((3, 2), (2,))):
    return GradientBundle({f"p{i}": rng.normal(size=s) for i, s in enumerate(shapes)})


# --- averaging -------------------------------------------------------------


def test_average_single_bundle_is_identity():
    g = bundle(np.random.default_rng(0))
    avg = average_gradients([g])
    for k in g.keys():
        np.testing.assert_array_equal(avg[k], g[k])


def test_average_two_identical_bundles_exact():
    g = bundle(np.random.default_rng(1))
    avg = average_gradients([g, g])
    for key in g.keys():
        np.testing.assert_array_equal(avg[key], g[key])


@pytest.mark.parametrize("k", [3, 5, 8])
def test_average_identical_bundles(k):
    # the running sum of k copies may round, so only ulp-level agreement holds
    g = bundle(np.random.default_rng(2))
    avg = average_gradients([g] * k)
    for key in g.keys():
        np.testing.assert_allclose(avg[key], g[key], rtol=4e-16, atol=0)


def test_average_errors():
    rng = np.random.default_rng(3)
    with pytest.raises(EmptyInput):
        average_gradients([])
    with pytest.raises(ShapeMismatch):
        average_gradients([bundle(rng), bundle(rng, ((2, 3), (2,)))])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.floats(-10, 10, allow_nan=False), st.integers(0, 2**32 - 1))
def test_average_is_linear(k, alpha, seed):
    rng = np.random.default_rng(seed)
    gs = [bundle(rng) for _ in range(k)]
    lhs = average_gradients([g.scale(alpha) for g in gs])
    rhs = average_gradients(gs).scale(alpha)
    for key in lhs.keys():
        np.testing.assert_allclose(lhs[key], rhs[key], rtol=1e-12, atol=1e-12)


def test_average_matches_numpy_mean():
    rng = np.random.default_rng(4)
    gs = [bundle(rng) for _ in range(5)]
    avg = average_gradients(gs)
    for key in avg.keys():
        np.testing.assert_allclose(avg[key], np.mean([g[key] for g in gs], axis=0), rtol=1e-14)


# --- messages ----------------------------------------------------------------


def test_messages_reject_raw_data():
    ds = toy_dataset(5, 0)
    with pytest.raises(LeakError):
        RoundMessage(MessageKind.GRADIENT_UP, 0, 0, ds.X_raw)
    with pytest.raises(LeakError):
        RoundMessage(MessageKind.MOMENTS_UP, 0, 0, ds)
    with pytest.raises(LeakError):
        MessageLayer().send({"X": ds.X_raw})


def test_message_checksum_is_stable():
    g = bundle(np.random.default_rng(5))
    a = RoundMessage(MessageKind.GRADIENT_UP, 1, 0, g)
    b = RoundMessage("GradientUp", 1, 0, GradientBundle(dict(g.arrays)))
    assert a.checksum() == b.checksum()
    assert a.payload_norm() == pytest.approx(g.norm())


def test_straggler_timeout():
    bus = MessageLayer(latency=lambda node, rnd: 10.0 if node == 2 else 0.1, timeout=1.0)
    with pytest.raises(StragglerTimeout) as info:
        train_collaborative([toy_dataset(30, s) for s in range(3)], SMALL, bus=bus)
    assert info.value.node == 2 and info.value.round_index == 0


# --- rounds --------------------------------------------------------------------


def _nodes(model, datasets, seed=0):
    return [NodeState(k, model, dbn.encode_matrix(d.X_raw, model.encoding), d.y,
                      np.random.default_rng(seed + k)) for k, d in enumerate(datasets)]


def _start_model(datasets):
    spec = dbn.EncodingSpec.from_moments(FeatureMoments.merge([FeatureMoments.of(d.X_raw) for d in datasets]))
    return dbn.init_model(spec.width, (6, 4), np.random.default_rng(0), spec, scale=0.1)


def test_round_synchronizes_nodes_and_applies_average():
    data = [toy_dataset(40, s) for s in range(3)]
    model = _start_model(data)
    nodes = _nodes(model, data)
    expected_g = average_gradients([dbn.supervised_gradient(model, n.X, n.y) for n in nodes])
    server, nodes, stats = run_round(ServerState(GlobalModel(0, model)), nodes, SMALL, MessageLayer())
    assert server.global_model.round_index == 1
    assert all(n.model is server.global_model.model for n in nodes)
    expected = dbn.apply_update(model, expected_g, SMALL.learning_rate)
    assert dbn.models_equal(server.global_model.model, expected)
    assert stats.delta_norm == pytest.approx(SMALL.learning_rate * expected_g.norm(), rel=1e-12)


def test_round_rejects_unsynchronized_node():
    data = [toy_dataset(20, s) for s in range(2)]
    model = _start_model(data)
    nodes = _nodes(model, data)
    nodes[1].model = model.with_params({k: v + 1e-3 for k, v in model.params().items()})
    with pytest.raises(ProtocolError):
        run_round(ServerState(GlobalModel(0, model)), nodes, SMALL, MessageLayer())


def test_arrival_order_does_not_change_result():
    data = [toy_dataset(30, s) for s in range(3)]
    fast_last = MessageLayer(latency=lambda node, rnd: 0.1 * (3 - node))
    fast_first = MessageLayer(latency=lambda node, rnd: 0.1 * node)
    a = train_collaborative(data, SMALL, bus=fast_last)
    b = train_collaborative(data, SMALL, bus=fast_first)
    assert dbn.models_equal(a.model, b.model)
    ups = [m.node for m in fast_last.messages if m.kind is MessageKind.GRADIENT_UP][:3]
    assert ups == [2, 1, 0]


# --- full runs -------------------------------------------------------------------


def test_zero_learning_rate_keeps_model():
    data = [toy_dataset(30, s) for s in range(3)]
    seen = []
    res = train_collaborative(data, SMALL.replace(learning_rate=0.0, max_rounds=3),
                              on_round=lambda i, m: seen.append(m))
    phi0 = [m.payload.model for m in res.bus.messages if m.kind is MessageKind.MODEL_DOWN][1]
    assert all(dbn.models_equal(m, phi0) for m in seen)
    assert res.report.converged and res.report.rounds_executed == 1


def test_zero_rounds_returns_initial_model():
    data = [toy_dataset(30, s) for s in range(3)]
    res = train_collaborative(data, SMALL.replace(max_rounds=0))
    assert res.global_model.round_index == 0
    assert res.report.rounds_executed == 0 and not res.report.converged


def test_convergence_flag():
    data = [toy_dataset(30, s) for s in range(3)]
    res = train_collaborative(data, SMALL.replace(convergence_epsilon=1e6, max_rounds=50))
    assert res.report.converged and res.report.rounds_executed == 1
    res = train_collaborative(data, SMALL.replace(convergence_epsilon=0.0, max_rounds=4))
    assert not res.report.converged and res.report.rounds_executed == 4
    assert res.global_model.round_index == 4


def test_reproducible_and_order_free():
    data = [toy_dataset(40, s) for s in range(3)]
    a = train_collaborative(data, SMALL)
    shuffled = []
    for k, d in enumerate(data):
        p = np.random.default_rng(99 + k).permutation(len(d))
        shuffled.append(LocalDataset(d.X_raw[p], d.y[p]))
    b = train_collaborative(shuffled, SMALL)
    assert dbn.dumps(a.model) == dbn.dumps(b.model)
    assert a.bus.transcript == b.bus.transcript


def test_threaded_nodes_match_sequential():
    data = [toy_dataset(40, s) for s in range(3)]
    cfg = SMALL.replace(local_batch=16)
    a = train_collaborative(data, cfg)
    b = train_collaborative(data, cfg, workers=3)
    assert dbn.dumps(a.model) == dbn.dumps(b.model)


def test_transcript_carries_no_samples():
    data = [toy_dataset(30, s) for s in range(3)]
    res = train_collaborative(data, SMALL)
    kinds = {row["payload_type"] for row in res.bus.transcript}
    assert kinds <= {"GradientBundle", "GlobalModel", "DbnModel", "FeatureMoments"}
    n_grad = sum(1 for m in res.bus.messages if m.kind is MessageKind.GRADIENT_UP)
    assert n_grad == 3 * res.report.rounds_executed


def test_single_node_collaborative_equals_centralized():
    d = toy_dataset(50, 11)
    cfg = SMALL.replace(n_nodes=1)
    col = train_collaborative([d], cfg)
    cel = train_centralized([d], cfg)
    assert dbn.dumps(col.model) == dbn.dumps(cel.model)
    il = train_independent([d], cfg)
    assert dbn.dumps(il[0].model) == dbn.dumps(cel.model)


def test_identical_nodes_track_centralized_per_round():
    d = toy_dataset(60, 12)
    cfg = SMALL.replace(pretrain_epochs=0, max_rounds=10, convergence_epsilon=0.0)
    col_models, cel_models = [], []
    train_collaborative([d, d, d], cfg, on_round=lambda i, m: col_models.append(m))
    train_centralized([d, d, d], cfg, on_round=lambda i, m: cel_models.append(m))
    assert len(col_models) == len(cel_models) == 10
    for a, b in zip(col_models, cel_models):
        pa, pb = a.params(), b.params()
        for k in pa:
            np.testing.assert_allclose(pa[k], pb[k], rtol=0, atol=1e-12)


def test_training_errors():
    with pytest.raises(EmptyInput):
        train_collaborative([], SMALL)
    with pytest.raises(InvalidConfig):
        train_collaborative([toy_dataset(10, 0)], SMALL)
    empty = LocalDataset(np.zeros((0, len(FEATURE_NAMES))), np.zeros(0))
    with pytest.raises(EmptyDataset):
        train_collaborative([toy_dataset(10, 0), empty, toy_dataset(10, 1)], SMALL)


def test_training_improves_likelihood():
    data = [toy_dataset(80, s) for s in range(3)]
    cfg = SMALL.replace(max_rounds=60, learning_rate=2.0)
    res = train_collaborative(data, cfg)
    pooled = LocalDataset.concat(data)
    X = dbn.encode_matrix(pooled.X_raw, res.model.encoding)
    phi0 = [m.payload.model for m in res.bus.messages if m.kind is MessageKind.MODEL_DOWN][1]
    assert dbn.mean_log_likelihood(res.model, X, pooled.y) > dbn.mean_log_likelihood(phi0, X, pooled.y)
    assert res.report.to_json()["rounds_executed"] == 60
