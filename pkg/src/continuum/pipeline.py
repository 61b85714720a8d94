"""Event-triggered staged data pipeline with per-stage FIFO queues.

Each stage subscribes to its input topic, serves items one at a time (single
server by default), and publishes downstream. For constant service times the
simulated completion times match the exact tandem-queue recurrence
``D[i][s] = max(D[i][s-1], D[i-1][s]) + S[i][s]`` to the millisecond, which is
the correctness oracle for the whole engine.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import wire
from .bus import SimBroker, topic_matches, validate_filter, validate_node_id, validate_topic

STAGE_KINDS = ("process", "serverless_function")


@dataclass(frozen=True)
class Constant:
    ms: float

    def __post_init__(self) -> None:
        if self.ms < 0:
            raise ValueError("service time must be >= 0")

    def draw(self, rng: np.random.Generator, item_id: int) -> float:
        return self.ms


@dataclass(frozen=True)
class Uniform:
    lo_ms: float
    hi_ms: float

    def __post_init__(self) -> None:
        if self.lo_ms < 0 or self.hi_ms < self.lo_ms:
            raise ValueError("need 0 <= lo_ms <= hi_ms")

    def draw(self, rng: np.random.Generator, item_id: int) -> float:
        return float(rng.uniform(self.lo_ms, self.hi_ms))


@dataclass(frozen=True)
class CallableService:
    """Adapter for arbitrary service-time callables fn(rng, item_id) -> ms."""

    fn: Callable[[np.random.Generator, int], float]

    def draw(self, rng: np.random.Generator, item_id: int) -> float:
        ms = float(self.fn(rng, item_id))
        if ms < 0:
            raise ValueError("service callable returned a negative duration")
        return ms


ServiceTime = Constant | Uniform | CallableService


@dataclass(frozen=True)
class StageSpec:
    name: str
    node: str
    input_topic: str
    output_topic: str | None
    service: ServiceTime
    kind: str = "process"
    servers: int = 1
    cold_start_ms: float = 0.0
    cold_idle_threshold_ms: float = 0.0

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("stage name must be non-empty")
        validate_node_id(self.node)
        validate_filter(self.input_topic)
        if self.output_topic is not None:
            validate_topic(self.output_topic)
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"stage kind must be one of {STAGE_KINDS}, got {self.kind!r}")
        if self.servers < 1:
            raise ValueError("servers must be >= 1")
        if self.cold_start_ms < 0 or self.cold_idle_threshold_ms < 0:
            raise ValueError("cold-start parameters must be >= 0")


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    source_topic: str
    stages: tuple[StageSpec, ...]

    def __post_init__(self) -> None:
        validate_topic(self.source_topic)
        if not self.stages:
            raise ValueError("a pipeline needs at least one stage")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ValueError(f"stage names must be unique, got {names}")
        if not topic_matches(self.stages[0].input_topic, self.source_topic):
            raise ValueError(
                f"source topic {self.source_topic!r} does not reach stage "
                f"{self.stages[0].name!r} (input {self.stages[0].input_topic!r})"
            )
        for upstream, downstream in zip(self.stages[:-1], self.stages[1:]):
            if upstream.output_topic is None:
                raise ValueError(
                    f"stage {upstream.name!r} has no output topic but is followed by "
                    f"{downstream.name!r}"
                )
            if not topic_matches(downstream.input_topic, upstream.output_topic):
                raise ValueError(
                    f"output of stage {upstream.name!r} ({upstream.output_topic!r}) does not "
                    f"match the input of stage {downstream.name!r} ({downstream.input_topic!r})"
                )
        if self.stages[-1].output_topic is not None:
            raise ValueError(f"terminal stage {self.stages[-1].name!r} must not publish onward")


@dataclass(frozen=True)
class ArrivalSchedule:
    """Either `count` items every `interval_ms`, or explicit strictly increasing times."""

    count: int = 0
    interval_ms: float = 0.0
    times_ms: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.times_ms is not None:
            if not self.times_ms:
                raise ValueError("explicit arrival list must be non-empty")
            if any(b <= a for a, b in zip(self.times_ms, self.times_ms[1:])):
                raise ValueError("arrival times must be strictly increasing")
        else:
            if self.count < 1:
                raise ValueError("count must be >= 1")
            if self.interval_ms <= 0:
                raise ValueError("interval_ms must be > 0")

    def times(self) -> list[float]:
        if self.times_ms is not None:
            return [float(t) for t in self.times_ms]
        return [i * float(self.interval_ms) for i in range(self.count)]


@dataclass
class StageRecord:
    item_id: int
    stage: str
    enqueue_ms: float
    start_ms: float
    end_ms: float


@dataclass
class ItemTrace:
    item_id: int
    arrival_ms: float
    completion_ms: float

    @property
    def sojourn_ms(self) -> float:
        return self.completion_ms - self.arrival_ms


class _StageRuntime:
    """Queue plus k-server service state for one stage."""

    def __init__(self, spec: StageSpec, index: int, instance: "PipelineInstance"):
        self.spec = spec
        self.index = index
        self.instance = instance
        self.queue: deque[tuple[int, bytes, float]] = deque()
        self.busy = 0
        self.last_service_end: float | None = None

    def on_message(self, env) -> None:
        item_id = wire.unpack(env.payload)["item_id"]
        self.queue.append((item_id, env.payload, self.instance.broker.now))
        self._try_start()

    def _try_start(self) -> None:
        broker = self.instance.broker
        while self.busy < self.spec.servers and self.queue:
            item_id, payload, enqueue_ms = self.queue.popleft()
            self.busy += 1
            start = broker.now
            duration = self.spec.service.draw(self.instance.rng, item_id)
            if self.spec.kind == "serverless_function" and self.spec.cold_start_ms > 0:
                idle = (
                    None
                    if self.last_service_end is None
                    else start - self.last_service_end
                )
                if idle is None or idle >= self.spec.cold_idle_threshold_ms:
                    duration += self.spec.cold_start_ms
            end = start + duration
            broker.call_at(end, lambda i=item_id, p=payload, e=enqueue_ms, s=start: self._finish(i, p, e, s))

    def _finish(self, item_id: int, payload: bytes, enqueue_ms: float, start_ms: float) -> None:
        broker = self.instance.broker
        end = broker.now
        self.busy -= 1
        self.last_service_end = end
        self.instance.records.append(
            StageRecord(item_id, self.spec.name, enqueue_ms, start_ms, end)
        )
        if self.spec.output_topic is not None:
            broker.publish(self.spec.node, self.spec.output_topic, payload)
        else:
            self.instance.completions[item_id] = end
        self._try_start()


class PipelineInstance:
    """A pipeline wired onto a broker: one subscription and one queue per stage."""

    def __init__(self, spec: PipelineSpec, broker: SimBroker):
        self.spec = spec
        self.broker = broker
        self.rng = np.random.default_rng(0)
        self.records: list[StageRecord] = []
        self.completions: dict[int, float] = {}
        self.arrivals: dict[int, float] = {}
        self.stages = [_StageRuntime(s, i, self) for i, s in enumerate(spec.stages)]
        for stage in self.stages:
            broker.subscribe(stage.spec.node, stage.spec.input_topic, stage.on_message)


def build_pipeline(spec: PipelineSpec, broker: SimBroker) -> PipelineInstance:
    return PipelineInstance(spec, broker)


def run_pipeline(
    instance: PipelineInstance,
    arrivals: ArrivalSchedule,
    seed: int = 0,
    source_node: str = "edge:source",
    payload_size_bytes: int = 1,
) -> tuple[list[ItemTrace], list[StageRecord]]:
    """Inject the arrival schedule, drain the event loop, and return the traces."""
    broker = instance.broker
    instance.rng = np.random.default_rng(seed)
    instance.records.clear()
    instance.completions.clear()
    instance.arrivals.clear()
    validate_node_id(source_node)
    times = arrivals.times()
    for item_id, t in enumerate(times):
        payload = wire.pack({"item_id": item_id, "size_bytes": payload_size_bytes})
        instance.arrivals[item_id] = float(t)
        broker.call_at(
            t, lambda p=payload: broker.publish(source_node, instance.spec.source_topic, p)
        )
    broker.run_until_idle()
    if len(instance.completions) != len(times):
        missing = sorted(set(range(len(times))) - set(instance.completions))
        raise RuntimeError(f"items {missing} never completed the pipeline")
    traces = [
        ItemTrace(i, instance.arrivals[i], instance.completions[i]) for i in range(len(times))
    ]
    order = {s.name: i for i, s in enumerate(instance.spec.stages)}
    records = sorted(instance.records, key=lambda r: (r.item_id, order[r.stage]))
    return traces, records


def tandem_oracle(
    arrival_times: Sequence[float],
    service_times: Sequence[Sequence[float]],
) -> list[float]:
    """Exact FIFO tandem-queue completion times.

    `service_times[s][i]` is the service of item i at stage s. Items must be
    indexed in arrival order.
    """
    done = [float(t) for t in arrival_times]  # D[i][0] = arrival_i
    for stage in service_times:
        if len(stage) != len(done):
            raise ValueError("each stage needs one service time per item")
        prev_item_done = float("-inf")
        for i, service in enumerate(stage):
            done[i] = max(done[i], prev_item_done) + float(service)
            prev_item_done = done[i]
    return done


@dataclass(frozen=True)
class PipelineStats:
    mean_sojourn_ms: float
    max_sojourn_ms: float
    per_item_sojourn_ms: tuple[float, ...]
    per_stage_utilization: dict[str, float] = field(hash=False, default_factory=dict)


def pipeline_stats(traces: list[ItemTrace], records: list[StageRecord]) -> PipelineStats:
    """Sojourn summaries plus per-stage busy-time / makespan utilization."""
    if not traces:
        raise ValueError("no item traces to summarize")
    sojourns = tuple(t.sojourn_ms for t in traces)
    makespan = max(r.end_ms for r in records) - min(t.arrival_ms for t in traces)
    busy: dict[str, float] = {}
    for r in records:
        busy[r.stage] = busy.get(r.stage, 0.0) + (r.end_ms - r.start_ms)
    utilization = {
        stage: (b / makespan if makespan > 0 else 0.0) for stage, b in busy.items()
    }
    return PipelineStats(
        mean_sojourn_ms=float(np.mean(sojourns)),
        max_sojourn_ms=float(max(sojourns)),
        per_item_sojourn_ms=sojourns,
        per_stage_utilization=utilization,
    )
