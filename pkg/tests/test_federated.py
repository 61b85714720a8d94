import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from continuum import federated, nn
from continuum.bus import SimBroker
from continuum.data import next_round_batch, partition, synth_blobs
from continuum.federated import ClientUpdate, FlConfig, GlobalModel, StragglerModel


def small_config(mode: str = "sync", rounds: int = 8, clients: int = 3, **overrides) -> FlConfig:
    defaults = dict(
        mode=mode,
        num_clients=clients,
        rounds=rounds,
        layer_sizes=(6, 5, 3),
        learning_rate=0.2,
        samples_per_round=10,
        local_epochs=1,
        aggregation_interval_ms=1000.0,
        staleness_bound=1,
        seed=21,
    )
    defaults.update(overrides)
    return FlConfig(**defaults)


def small_dataset(n: int = 240, seed: int = 21):
    return synth_blobs(n, 6, 3, separation=3.0, seed=seed)


def updates_from(vectors, counts, ids=None) -> list[ClientUpdate]:
    ids = ids if ids is not None else range(len(vectors))
    return [
        ClientUpdate(client_id=i, base_round=0, params=np.asarray(v, dtype=float), sample_count=c)
        for i, v, c in zip(ids, vectors, counts)
    ]


# --- fedavg algebra ---


def test_fedavg_idempotent_on_identical_updates():
    vec = np.array([0.5, -1.25, 3.0])
    merged = federated.fedavg(updates_from([vec, vec, vec], [60, 60, 60]))
    assert np.array_equal(merged, vec)


def test_fedavg_weighted_mean_values():
    merged = federated.fedavg(updates_from([[0.0], [1.0]], [60, 60]))
    assert merged[0] == pytest.approx(0.5, abs=1e-15)
    merged = federated.fedavg(updates_from([[0.0], [1.0]], [20, 60]))
    assert merged[0] == pytest.approx(0.75, abs=1e-15)


def test_fedavg_errors():
    with pytest.raises(ValueError):
        federated.fedavg([])
    with pytest.raises(ValueError):
        federated.fedavg(updates_from([[0.0, 1.0], [1.0]], [10, 10]))


def test_fedavg_permutation_invariant_exactly():
    rng = np.random.default_rng(3)
    vectors = [rng.normal(size=7) for _ in range(5)]
    counts = [1, 60, 13, 7, 120]
    forward = federated.fedavg(updates_from(vectors, counts))
    shuffled = updates_from(vectors, counts)
    shuffled = [shuffled[i] for i in (4, 2, 0, 3, 1)]
    assert np.array_equal(forward, federated.fedavg(shuffled))


@given(data=st.data())
@settings(max_examples=150, deadline=None)
def test_fedavg_convex_combination_property(data):
    k = data.draw(st.integers(1, 6))
    dim = data.draw(st.integers(1, 5))
    vectors = [
        data.draw(st.lists(st.floats(-1e6, 1e6), min_size=dim, max_size=dim)) for _ in range(k)
    ]
    counts = [data.draw(st.integers(1, 10_000)) for _ in range(k)]
    merged = federated.fedavg(updates_from(vectors, counts))
    arr = np.array(vectors)
    assert (merged >= arr.min(axis=0) - 1e-9).all()
    assert (merged <= arr.max(axis=0) + 1e-9).all()


# --- client-side training ---


def test_client_identity_when_no_local_work():
    config = small_config()
    part = partition(small_dataset(), config.num_clients, config.seed)[0]
    model = nn.init_model(config.layer_sizes, config.hidden_activation, config.seed)
    start = GlobalModel(0, nn.serialize_params(model))

    no_epochs = federated.client_local_train(
        0, start, 0, part, small_config(local_epochs=0), send_time=1.0
    )
    assert np.array_equal(no_epochs.params, start.params)

    zero_lr = federated.client_local_train(0, start, 0, part, small_config(learning_rate=0.0))
    assert np.array_equal(zero_lr.params, start.params)


def test_client_update_shape_for_fmcw_model():
    config = small_config(layer_sizes=(512, 32, 8), samples_per_round=60, clients=1)
    part = synth_blobs(200, 512, 8, separation=6.0, seed=1)
    model = nn.init_model((512, 32, 8), "sigmoid", 1)
    update = federated.client_local_train(2, GlobalModel(5, nn.serialize_params(model)), 5, part, config)
    assert update.params.shape == (16_680,)
    assert update.sample_count == 60
    assert update.base_round == 5
    assert update.client_id == 2


def test_client_rejects_wrong_param_length():
    config = small_config()
    part = partition(small_dataset(), config.num_clients, config.seed)[0]
    with pytest.raises(ValueError):
        federated.client_local_train(0, GlobalModel(0, np.zeros(7)), 0, part, config)


# --- sync runs ---


def run_sync(config, dataset):
    broker = SimBroker()
    result = federated.run_sync(config, broker, dataset)
    return result, broker


def test_sync_round_and_update_counts():
    config = small_config(rounds=8)
    result, broker = run_sync(config, small_dataset())
    updates = [e for e in broker.published if e.topic == federated.UPDATE_TOPIC]
    assert len(updates) == 8 * 3  # every client contributes every round
    assert len(result.rows) == 9  # round 0 baseline plus one row per round
    assert [m.round for m in result.rows] == list(range(9))
    assert result.rows[0].contributors == 0
    assert all(m.contributors == 3 for m in result.rows[1:])
    assert result.global_model.round_index == 8


def test_sync_single_client_matches_solo_training():
    config = small_config(clients=1, rounds=6, local_epochs=2)
    dataset = small_dataset()
    result, _ = run_sync(config, dataset)

    train, test = federated.split_train_test(dataset)
    part = partition(train, 1, config.seed)[0]
    model = nn.init_model(config.layer_sizes, config.hidden_activation, config.seed)
    for r in range(config.rounds):
        batch = next_round_batch(part, r, config.samples_per_round)
        for _ in range(config.local_epochs):
            model = nn.sgd_step(model, nn.gradient(model, batch), config.learning_rate)
    np.testing.assert_allclose(
        result.global_model.params, nn.serialize_params(model), atol=1e-9
    )


def test_sync_is_deterministic():
    config = small_config(rounds=5)
    first, _ = run_sync(config, small_dataset())
    second, _ = run_sync(config, small_dataset())
    assert [(m.round, m.test_accuracy, m.test_loss, m.contributors) for m in first.rows] == [
        (m.round, m.test_accuracy, m.test_loss, m.contributors) for m in second.rows
    ]


def test_sync_rejects_stragglers():
    config = small_config()
    broker = SimBroker()
    with pytest.raises(ValueError, match="full participation"):
        federated.run(config, broker, small_dataset(), StragglerModel(miss_probability=0.1))


def test_split_is_half_and_half():
    dataset = small_dataset(n=240)
    train, test = federated.split_train_test(dataset)
    assert len(train) == 120 and len(test) == 120
    assert np.array_equal(
        np.concatenate([train.features, test.features]), dataset.features
    )


# --- async runs ---


def run_async(config, dataset, stragglers=None):
    broker = SimBroker()
    result = federated.run_async(config, broker, dataset, stragglers)
    return result, broker


def test_async_without_straggling_equals_sync():
    dataset = small_dataset()
    sync_result, _ = run_sync(small_config(rounds=10), dataset)
    async_result, _ = run_async(small_config(mode="async", rounds=10), dataset)
    assert len(sync_result.rows) == len(async_result.rows)
    for a, b in zip(sync_result.rows, async_result.rows):
        assert a.round == b.round
        assert b.test_accuracy == pytest.approx(a.test_accuracy, abs=1e-12)
        assert b.test_loss == pytest.approx(a.test_loss, abs=1e-12)
        assert a.contributors == b.contributors
    np.testing.assert_allclose(
        sync_result.global_model.params, async_result.global_model.params, atol=1e-12
    )


def test_async_empty_intervals_advance_rounds_without_update():
    config = small_config(mode="async", clients=1, rounds=5)
    result, _ = run_async(config, small_dataset(), StragglerModel(miss_probability=1.0))
    initial = nn.serialize_params(
        nn.init_model(config.layer_sizes, config.hidden_activation, config.seed)
    )
    assert np.array_equal(result.global_model.params, initial)
    assert result.global_model.round_index == 5
    assert [m.contributors for m in result.rows] == [0] * 6
    accuracies = {m.test_accuracy for m in result.rows}
    assert len(accuracies) == 1  # params never changed


def test_async_delayed_updates_respect_staleness_bound():
    dataset = small_dataset()
    # a 0.6-interval delay pushes every update past its own aggregation window
    late = StragglerModel(delay_ms=600.0)
    tolerant = small_config(mode="async", rounds=6, staleness_bound=1)
    result, _ = run_async(tolerant, dataset, late)
    contributors = [m.contributors for m in result.rows]
    assert contributors[1] == 0  # first window closes before anything lands
    assert all(c == 3 for c in contributors[2:])

    strict = small_config(mode="async", rounds=6, staleness_bound=0)
    result, _ = run_async(strict, dataset, late)
    assert all(m.contributors == 0 for m in result.rows)
    initial = nn.serialize_params(
        nn.init_model(strict.layer_sizes, strict.hidden_activation, strict.seed)
    )
    assert np.array_equal(result.global_model.params, initial)


def test_async_miss_probability_thins_contributors():
    config = small_config(mode="async", rounds=50)
    result, _ = run_async(config, small_dataset(), StragglerModel(miss_probability=0.3, seed=9))
    mean_contributors = np.mean([m.contributors for m in result.rows[1:]])
    assert 1.2 <= mean_contributors <= 2.9  # E = 2.1 for 3 clients at p = 0.3


def test_async_requires_sim_backend():
    class FakeBus:
        pass

    with pytest.raises(ValueError, match="simulated"):
        federated.run_async(small_config(mode="async"), FakeBus(), small_dataset())


def test_async_determinism():
    config = small_config(mode="async", rounds=12)
    straggler = StragglerModel(miss_probability=0.4, delay_ms=(0.0, 900.0), seed=5)
    first, _ = run_async(config, small_dataset(), straggler)
    second, _ = run_async(config, small_dataset(), straggler)
    assert [(m.test_accuracy, m.test_loss, m.contributors) for m in first.rows] == [
        (m.test_accuracy, m.test_loss, m.contributors) for m in second.rows
    ]


# --- privacy ---


def test_fl_traffic_is_params_and_counts_only():
    dataset = small_dataset()
    _, broker = run_sync(small_config(rounds=6), dataset)
    assert federated.privacy_violations(broker.published, dataset) == []
    _, async_broker = run_async(
        small_config(mode="async", rounds=6), dataset, StragglerModel(miss_probability=0.2)
    )
    assert federated.privacy_violations(async_broker.published, dataset) == []


def test_privacy_scan_flags_raw_rows_and_foreign_topics():
    dataset = small_dataset()
    broker = SimBroker()
    broker.publish("fog:client-0", federated.UPDATE_TOPIC, b"{not json")
    row = np.ascontiguousarray(dataset.features[0], dtype="<f8").tobytes()
    import base64
    import json

    leak = json.dumps(
        {
            "type": "update",
            "client_id": 0,
            "base_round": 0,
            "params": base64.b64encode(row).decode(),
            "sample_count": 1,
            "send_time": 0.0,
        }
    ).encode()
    broker.publish("fog:client-0", federated.UPDATE_TOPIC, leak)
    broker.publish("fog:client-0", "other/topic", b"{}")
    issues = federated.privacy_violations(broker.published, dataset)
    assert len(issues) == 3
    assert any("not a JSON" in i for i in issues)
    assert any("sample 0" in i for i in issues)
    assert any("unexpected topic" in i for i in issues)


# --- config validation ---


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(mode="semi")
    with pytest.raises(ValueError):
        small_config(mode="async", aggregation_interval_ms=0.0)
    with pytest.raises(ValueError):
        small_config(rounds=0)
    with pytest.raises(ValueError):
        StragglerModel(miss_probability=1.5)
    with pytest.raises(ValueError):
        StragglerModel(delay_ms=(-1.0, 5.0))
    with pytest.raises(ValueError):
        federated.run_sync(small_config(mode="async"), SimBroker(), small_dataset())
