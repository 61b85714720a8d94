"""Coordinator/worker data-parallel training over the bus.

The coordinator shards the dataset, workers return full-shard gradients, and
the coordinator applies one sample-weighted averaged step per epoch. Because
the mean gradient over a partition equals the full-dataset gradient, a run
with any worker count reproduces single-process full-batch gradient descent,
which is what the tests check against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, wire
from .bus import SimBroker
from .data import Dataset, partition

ASSIGN_TOPIC = "train/{job}/worker/{worker}"
GRADS_TOPIC = "train/{job}/gradients"

COORDINATOR_NODE = "cloud:coordinator"
WORKER_NODE = "fog:worker-{worker}"


@dataclass(frozen=True)
class TrainJob:
    layer_sizes: tuple[int, ...]
    hidden_activation: str
    learning_rate: float
    epochs: int
    num_workers: int
    seed: int
    dataset: Dataset
    name: str = "job"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.num_workers > len(self.dataset):
            raise ValueError(
                f"{self.num_workers} workers cannot share {len(self.dataset)} samples"
            )
        if len(self.dataset.labels) and self.dataset.num_classes != self.layer_sizes[-1]:
            raise ValueError(
                f"dataset has {self.dataset.num_classes} classes but the output layer "
                f"has {self.layer_sizes[-1]} units"
            )


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    final_model: nn.MlpModel
    epochs: list[EpochMetrics]


def worker_epoch(shard: Dataset, model: nn.MlpModel) -> nn.Gradients:
    """Full-shard gradient; the worker-side computation of one epoch."""
    batch = nn.Batch(shard.features, shard.labels)
    return nn.gradient(model, batch)


def aggregate_and_step(
    model: nn.MlpModel,
    shard_gradients: list[tuple[int, nn.Gradients]],
    learning_rate: float,
) -> nn.MlpModel:
    """Combine per-shard gradients by sample weight (ascending worker id) and step."""
    if not shard_gradients:
        raise ValueError("no gradients to aggregate")
    ordered = sorted(shard_gradients, key=lambda pair: pair[0])
    total = sum(g.sample_count for _, g in ordered)
    weights = [np.zeros_like(w) for w in model.weights]
    biases = [np.zeros_like(b) for b in model.biases]
    for _, grad in ordered:
        scale = grad.sample_count / total
        for l in range(len(weights)):
            weights[l] += scale * grad.weights[l]
            biases[l] += scale * grad.biases[l]
    combined = nn.Gradients(tuple(weights), tuple(biases), total)
    return nn.sgd_step(model, combined, learning_rate)


class _Worker:
    def __init__(self, worker_id: int, job: TrainJob, broker, handle: "JobHandle"):
        self.worker_id = worker_id
        self.job = job
        self.broker = broker
        self.handle = handle
        self.shard: Dataset | None = None
        self.node = WORKER_NODE.format(worker=worker_id)
        broker.subscribe(
            self.node, ASSIGN_TOPIC.format(job=job.name, worker=worker_id), self.on_message
        )

    def on_message(self, env) -> None:
        msg = wire.unpack(env.payload)
        if "shard_features" in msg:  # first message carries the data shard
            feats = wire.decode_f64(msg["shard_features"]).reshape(msg["shard_shape"])
            labels = wire.decode_i64(msg["shard_labels"])
            self.shard = Dataset(feats, labels, msg["num_classes"], name=f"shard{self.worker_id}")
        if self.shard is None:
            raise RuntimeError(f"worker {self.worker_id} received params before its shard")
        params = wire.decode_f64(msg["params"])
        model = nn.deserialize_params(self.job.layer_sizes, self.job.hidden_activation, params)
        grads = worker_epoch(self.shard, model)
        self.broker.publish(
            self.node,
            GRADS_TOPIC.format(job=self.job.name),
            wire.pack(
                {
                    "worker_id": self.worker_id,
                    "epoch": msg["epoch"],
                    "grads": wire.encode_f64(nn.serialize_gradients(grads)),
                    "sample_count": grads.sample_count,
                }
            ),
        )


class _Coordinator:
    def __init__(self, job: TrainJob, broker, shards: list[Dataset]):
        self.job = job
        self.broker = broker
        self.shards = shards
        self.model = nn.init_model(job.layer_sizes, job.hidden_activation, job.seed)
        self.epoch = 1
        self.pending: dict[int, nn.Gradients] = {}
        self.metrics: list[EpochMetrics] = []
        self.done = False
        broker.subscribe(COORDINATOR_NODE, GRADS_TOPIC.format(job=job.name), self.on_gradient)

    def broadcast(self, first: bool) -> None:
        params = wire.encode_f64(nn.serialize_params(self.model))
        for k, shard in enumerate(self.shards):
            msg: dict = {"epoch": self.epoch, "params": params}
            if first:
                msg.update(
                    shard_features=wire.encode_f64(shard.features.ravel()),
                    shard_shape=list(shard.features.shape),
                    shard_labels=wire.encode_i64(shard.labels),
                    num_classes=shard.num_classes,
                )
            self.broker.publish(
                COORDINATOR_NODE,
                ASSIGN_TOPIC.format(job=self.job.name, worker=k),
                wire.pack(msg),
            )

    def on_gradient(self, env) -> None:
        msg = wire.unpack(env.payload)
        if msg["epoch"] != self.epoch:
            raise RuntimeError(
                f"gradient for epoch {msg['epoch']} arrived during epoch {self.epoch}"
            )
        grads = nn.deserialize_gradients(
            self.job.layer_sizes, wire.decode_f64(msg["grads"]), msg["sample_count"]
        )
        self.pending[msg["worker_id"]] = grads
        if len(self.pending) < self.job.num_workers:
            return
        gathered = sorted(self.pending.items())
        self.pending.clear()
        self.model = aggregate_and_step(self.model, gathered, self.job.learning_rate)
        result = nn.evaluate(self.model, self.job.dataset.features, self.job.dataset.labels)
        self.metrics.append(EpochMetrics(self.epoch, result.mean_loss, result.accuracy))
        if self.epoch < self.job.epochs:
            self.epoch += 1
            self.broadcast(first=False)
        else:
            self.done = True


@dataclass
class JobHandle:
    job: TrainJob
    broker: SimBroker
    coordinator: _Coordinator
    workers: list[_Worker] = field(default_factory=list)


def submit_job(job: TrainJob, broker) -> JobHandle:
    """Wire coordinator and workers onto the broker and send the first assignments."""
    shards = partition(job.dataset, job.num_workers, job.seed)
    coordinator = _Coordinator(job, broker, shards)
    handle = JobHandle(job, broker, coordinator)
    handle.workers = [_Worker(k, job, broker, handle) for k in range(job.num_workers)]
    coordinator.broadcast(first=True)
    return handle


def run_training(handle: JobHandle) -> TrainResult:
    """Drive the submitted job to completion and collect per-epoch metrics."""
    coord = handle.coordinator
    handle.broker.drive(lambda: coord.done)
    missing = [k for k in range(handle.job.num_workers) if k in coord.pending]
    if not coord.done:
        raise RuntimeError(f"training stalled at epoch {coord.epoch}; missing gradients {missing}")
    return TrainResult(coord.model, coord.metrics)
