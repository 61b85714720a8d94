"""Synchronous and asynchronous federated averaging over the bus.

Clients train on streaming fixed-size batches of their own partition and ship
serialized parameters only; the server aggregates sample-weighted averages.
Sync mode waits for every client each round; async mode aggregates on a fixed
virtual-time interval, tolerating missed or delayed updates up to a staleness
bound. With no straggling the two modes produce identical numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, wire
from .bus import Envelope, SimBroker
from .data import Dataset, next_round_batch, partition

SERVER_NODE = "cloud:server"
CLIENT_NODE = "fog:client-{client}"
GLOBAL_TOPIC = "fl/global"
UPDATE_TOPIC = "fl/updates"

_GLOBAL_KEYS = frozenset({"type", "round", "params"})
_UPDATE_KEYS = frozenset({"type", "client_id", "base_round", "params", "sample_count", "send_time"})

FL_MODES = ("sync", "async")


@dataclass(frozen=True)
class FlConfig:
    mode: str
    num_clients: int
    rounds: int
    layer_sizes: tuple[int, ...]
    learning_rate: float
    samples_per_round: int = 60
    local_epochs: int = 1
    hidden_activation: str = "sigmoid"
    aggregation_interval_ms: float = 60_000.0
    staleness_bound: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in FL_MODES:
            raise ValueError(f"mode must be one of {FL_MODES}, got {self.mode!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.samples_per_round < 1:
            raise ValueError("samples_per_round must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.mode == "async" and self.aggregation_interval_ms <= 0:
            raise ValueError("async mode needs aggregation_interval_ms > 0")
        if self.staleness_bound < 0:
            raise ValueError("staleness_bound must be >= 0")


@dataclass(frozen=True)
class StragglerModel:
    """Per-round send failures and delivery delays for async clients."""

    miss_probability: float = 0.0
    delay_ms: float | tuple[float, float] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.miss_probability <= 1.0:
            raise ValueError("miss_probability must lie in [0, 1]")
        if isinstance(self.delay_ms, tuple):
            lo, hi = self.delay_ms
            if lo < 0 or hi < lo:
                raise ValueError("delay range needs 0 <= lo <= hi")
        elif self.delay_ms is not None and self.delay_ms < 0:
            raise ValueError("delay must be >= 0")

    def is_zero(self) -> bool:
        if self.miss_probability > 0:
            return False
        if isinstance(self.delay_ms, tuple):
            return self.delay_ms[1] == 0
        return not self.delay_ms

    def draw_delay(self, rng: np.random.Generator) -> float:
        if self.delay_ms is None:
            return 0.0
        if isinstance(self.delay_ms, tuple):
            return float(rng.uniform(*self.delay_ms))
        return float(self.delay_ms)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    base_round: int
    params: np.ndarray
    sample_count: int
    send_time: float = 0.0


@dataclass(frozen=True)
class GlobalModel:
    round_index: int
    params: np.ndarray
    contributors: tuple[int, ...] = ()


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    test_loss: float
    contributors: int


@dataclass
class FlRunResult:
    global_model: GlobalModel
    model: nn.MlpModel
    rows: list[RoundMetrics]
    train_size: int
    test_size: int


def fedavg(updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-count-weighted parameter mean, summed in ascending client order."""
    if not updates:
        raise ValueError("fedavg needs at least one update")
    length = updates[0].params.shape[0]
    if any(u.params.shape != (length,) for u in updates):
        raise ValueError("all updates must carry parameter vectors of equal length")
    total = sum(u.sample_count for u in updates)
    if total <= 0:
        raise ValueError("total sample count must be positive")
    combined = np.zeros(length)
    for update in sorted(updates, key=lambda u: u.client_id):
        combined += (update.sample_count / total) * update.params
    return combined


def client_local_train(
    client_id: int,
    global_model: GlobalModel,
    round_index: int,
    part: Dataset,
    config: FlConfig,
    send_time: float = 0.0,
) -> ClientUpdate:
    """Train `local_epochs` full-batch steps on this round's streaming batch."""
    model = nn.deserialize_params(
        config.layer_sizes, config.hidden_activation, global_model.params
    )
    batch = next_round_batch(part, round_index, config.samples_per_round)
    for _ in range(config.local_epochs):
        model = nn.sgd_step(model, nn.gradient(model, batch), config.learning_rate)
    return ClientUpdate(
        client_id=client_id,
        base_round=global_model.round_index,
        params=nn.serialize_params(model),
        sample_count=len(batch),
        send_time=send_time,
    )


def split_train_test(dataset: Dataset) -> tuple[Dataset, Dataset]:
    """First half trains, second half is the held-out test split."""
    n = len(dataset)
    half = n - n // 2
    if n < 2:
        raise ValueError("dataset too small to split")
    train = Dataset(dataset.features[:half], dataset.labels[:half], dataset.num_classes,
                    name=f"{dataset.name}/train")
    test = Dataset(dataset.features[half:], dataset.labels[half:], dataset.num_classes,
                   name=f"{dataset.name}/test")
    return train, test


def _update_payload(update: ClientUpdate) -> bytes:
    return wire.pack(
        {
            "type": "update",
            "client_id": update.client_id,
            "base_round": update.base_round,
            "params": wire.encode_f64(update.params),
            "sample_count": update.sample_count,
            "send_time": update.send_time,
        }
    )


def _decode_update(payload: bytes) -> ClientUpdate:
    msg = wire.unpack(payload)
    return ClientUpdate(
        client_id=msg["client_id"],
        base_round=msg["base_round"],
        params=wire.decode_f64(msg["params"]),
        sample_count=msg["sample_count"],
        send_time=msg["send_time"],
    )


def _global_payload(round_index: int, params: np.ndarray) -> bytes:
    return wire.pack({"type": "global", "round": round_index, "params": wire.encode_f64(params)})


class _Server:
    """Shared server state: global params, pending updates, per-round metrics."""

    def __init__(self, config: FlConfig, broker, test: Dataset):
        self.config = config
        self.broker = broker
        self.test = test
        model = nn.init_model(config.layer_sizes, config.hidden_activation, config.seed)
        self.params = nn.serialize_params(model)
        self.round_index = 0
        self.contributors: tuple[int, ...] = ()
        self.pending: dict[int, ClientUpdate] = {}
        self.rows: list[RoundMetrics] = []
        self.done = False
        self._record()  # round 0: the untrained global model
        broker.subscribe(SERVER_NODE, UPDATE_TOPIC, self.on_update)

    def _model(self) -> nn.MlpModel:
        return nn.deserialize_params(
            self.config.layer_sizes, self.config.hidden_activation, self.params
        )

    def _record(self) -> None:
        result = nn.evaluate(self._model(), self.test.features, self.test.labels)
        self.rows.append(
            RoundMetrics(self.round_index, result.accuracy, result.mean_loss, len(self.contributors))
        )

    def broadcast(self) -> None:
        self.broker.publish(SERVER_NODE, GLOBAL_TOPIC, _global_payload(self.round_index, self.params))

    def on_update(self, env: Envelope) -> None:
        raise NotImplementedError


class _SyncServer(_Server):
    def on_update(self, env: Envelope) -> None:
        if self.done:
            return
        update = _decode_update(env.payload)
        self.pending[update.client_id] = update
        if len(self.pending) < self.config.num_clients:
            return
        updates = [self.pending[k] for k in sorted(self.pending)]
        self.pending.clear()
        self.params = fedavg(updates)
        self.contributors = tuple(u.client_id for u in updates)
        self.round_index += 1
        self._record()
        if self.round_index < self.config.rounds:
            self.broadcast()
        else:
            self.done = True


class _AsyncServer(_Server):
    def on_update(self, env: Envelope) -> None:
        if self.done:
            return
        update = _decode_update(env.payload)
        previous = self.pending.get(update.client_id)
        if previous is None or update.base_round >= previous.base_round:
            self.pending[update.client_id] = update  # keep the freshest basis per client

    def aggregate(self) -> None:
        eligible = [
            u
            for u in self.pending.values()
            if u.base_round >= self.round_index - self.config.staleness_bound
        ]
        self.pending.clear()
        if eligible:
            self.params = fedavg(eligible)
            self.contributors = tuple(u.client_id for u in sorted(eligible, key=lambda u: u.client_id))
        else:
            self.contributors = ()  # empty interval: params unchanged, round still advances
        self.round_index += 1
        self._record()
        if self.round_index >= self.config.rounds:
            self.done = True
        self.broadcast()


class _Client:
    def __init__(self, client_id: int, config: FlConfig, broker, part: Dataset):
        self.client_id = client_id
        self.config = config
        self.broker = broker
        self.part = part
        self.node = CLIENT_NODE.format(client=client_id)
        self.latest = GlobalModel(-1, np.empty(0))
        broker.subscribe(self.node, GLOBAL_TOPIC, self.on_global)

    def on_global(self, env: Envelope) -> None:
        msg = wire.unpack(env.payload)
        if msg["round"] > self.latest.round_index:
            self.latest = GlobalModel(msg["round"], wire.decode_f64(msg["params"]))

    def build_update(self, round_index: int, send_time: float) -> bytes:
        update = client_local_train(
            self.client_id, self.latest, round_index, self.part, self.config, send_time
        )
        return _update_payload(update)

    def train_and_send(self, round_index: int, send_time: float) -> None:
        self.broker.publish(self.node, UPDATE_TOPIC, self.build_update(round_index, send_time))


class _SyncClient(_Client):
    def on_global(self, env: Envelope) -> None:
        super().on_global(env)
        round_index = self.latest.round_index
        if round_index < self.config.rounds:
            self.train_and_send(round_index, send_time=getattr(self.broker, "now", 0.0))


def _prepare(config: FlConfig, dataset: Dataset) -> tuple[Dataset, Dataset, list[Dataset]]:
    if dataset.num_classes != config.layer_sizes[-1]:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes but the output layer has "
            f"{config.layer_sizes[-1]} units"
        )
    train, test = split_train_test(dataset)
    parts = partition(train, config.num_clients, config.seed)
    return train, test, parts


def run_sync(config: FlConfig, broker, dataset: Dataset) -> FlRunResult:
    """Lockstep rounds: every client contributes to every aggregation."""
    if config.mode != "sync":
        raise ValueError("run_sync requires a sync-mode config")
    train, test, parts = _prepare(config, dataset)
    server = _SyncServer(config, broker, test)
    clients = [_SyncClient(k, config, broker, parts[k]) for k in range(config.num_clients)]
    server.broadcast()
    broker.drive(lambda: server.done)
    if not server.done:
        raise RuntimeError("sync federated run did not complete")
    final = GlobalModel(server.round_index, server.params, server.contributors)
    return FlRunResult(final, server._model(), server.rows, len(train), len(test))


def run_async(
    config: FlConfig,
    broker: SimBroker,
    dataset: Dataset,
    stragglers: StragglerModel | None = None,
) -> FlRunResult:
    """Interval-driven aggregation on the simulated clock, tolerant of stragglers.

    Clients train at the start of each interval; the server aggregates halfway
    through the next one, so on-time updates always land in their own round.
    """
    if config.mode != "async":
        raise ValueError("run_async requires an async-mode config")
    if not isinstance(broker, SimBroker):
        raise ValueError("async mode runs on the simulated bus only (interval timers)")
    stragglers = stragglers or StragglerModel()
    train, test, parts = _prepare(config, dataset)
    server = _AsyncServer(config, broker, test)
    clients = [_Client(k, config, broker, parts[k]) for k in range(config.num_clients)]
    rngs = [np.random.default_rng([stragglers.seed, k]) for k in range(config.num_clients)]
    interval = config.aggregation_interval_ms

    def fire(client: _Client, rng: np.random.Generator, round_index: int) -> None:
        if rng.random() < stragglers.miss_probability:
            return
        delay = stragglers.draw_delay(rng)
        # training happens at the cadence tick; only the send is delayed
        payload = client.build_update(round_index, send_time=broker.now)
        if delay > 0:
            broker.call_later(
                delay, lambda: broker.publish(client.node, UPDATE_TOPIC, payload)
            )
        else:
            broker.publish(client.node, UPDATE_TOPIC, payload)

    server.broadcast()
    for r in range(config.rounds):
        for k, client in enumerate(clients):
            broker.call_at(r * interval, lambda c=client, g=rngs[k], ri=r: fire(c, g, ri))
        broker.call_at((r + 0.5) * interval, server.aggregate)
    broker.drive(lambda: server.done)
    final = GlobalModel(server.round_index, server.params, server.contributors)
    return FlRunResult(final, server._model(), server.rows, len(train), len(test))


def run(config: FlConfig, broker, dataset: Dataset,
        stragglers: StragglerModel | None = None) -> FlRunResult:
    if config.mode == "sync":
        if stragglers is not None and not stragglers.is_zero():
            raise ValueError("sync mode assumes full participation; remove the straggler model")
        return run_sync(config, broker, dataset)
    return run_async(config, broker, dataset, stragglers)


def fl_metrics(result: FlRunResult) -> list[RoundMetrics]:
    """Per-round metric rows in round order: the baseline row plus one per round."""
    if not result.rows:
        raise ValueError("run produced no metric rows")
    return list(result.rows)


def privacy_violations(
    envelopes: list[Envelope], dataset: Dataset | None = None, sample_rows: int = 64
) -> list[str]:
    """Structural scan of an FL trace: parameters and counts only, no raw data.

    Checks every published envelope against the two wire schemas and, when a
    dataset is given, searches decoded payload blobs for raw feature-row bytes.
    """
    issues: list[str] = []
    blobs: list[bytes] = []
    for env in envelopes:
        if env.topic == GLOBAL_TOPIC:
            allowed = _GLOBAL_KEYS
        elif env.topic == UPDATE_TOPIC:
            allowed = _UPDATE_KEYS
        else:
            issues.append(f"msg {env.msg_id}: unexpected topic {env.topic!r} in an FL run")
            continue
        try:
            msg = wire.unpack(env.payload)
        except Exception:
            issues.append(f"msg {env.msg_id}: payload is not a JSON object")
            continue
        if set(msg) != allowed:
            issues.append(
                f"msg {env.msg_id} on {env.topic}: keys {sorted(msg)} != {sorted(allowed)}"
            )
            continue
        blobs.append(wire.decode_f64(msg["params"]).tobytes())
    if dataset is not None:
        step = max(1, len(dataset) // sample_rows)
        corpus = b"".join(blobs)
        for i in range(0, len(dataset), step):
            row = np.ascontiguousarray(dataset.features[i], dtype="<f8").tobytes()
            if row in corpus:
                issues.append(f"raw bytes of sample {i} appear in a published payload")
    return issues
