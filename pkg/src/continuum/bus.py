"""MQTT-semantics publish/subscribe on a deterministic virtual-time event loop.

Topic filters follow MQTT v3.1.1 wildcard rules: ``+`` matches exactly one
level and a trailing ``#`` matches all remaining levels, including none
(``a/#`` matches ``a``). The simulated broker delivers with per-link latency
and breaks equal-timestamp ties FIFO by scheduling order, so a run is a pure
function of its inputs.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

log = logging.getLogger("continuum.bus")

MAX_FRAME_BYTES = 16 * 1024 * 1024
NODE_LAYERS = ("edge", "fog", "cloud")

Handler = Callable[["Envelope"], None]


def validate_topic(topic: str) -> str:
    """Check a concrete (publishable) topic; wildcards are not allowed."""
    if not topic:
        raise ValueError("topic must be a non-empty string")
    if "+" in topic or "#" in topic:
        raise ValueError(f"topic {topic!r} may not contain wildcard characters")
    return topic


def validate_filter(filt: str) -> str:
    """Check a subscription filter: '+'/'#' only as whole levels, '#' only last."""
    if not filt:
        raise ValueError("topic filter must be a non-empty string")
    levels = filt.split("/")
    for i, level in enumerate(levels):
        if level == "#":
            if i != len(levels) - 1:
                raise ValueError(f"'#' must be the final level in filter {filt!r}")
        elif level != "+" and ("+" in level or "#" in level):
            raise ValueError(f"wildcards must occupy a whole level in filter {filt!r}")
    return filt


def topic_matches(filt: str, topic: str) -> bool:
    """True iff `filt` matches `topic` level-by-level (MQTT v3.1.1 semantics)."""
    flevels = filt.split("/")
    tlevels = topic.split("/")
    for i, flevel in enumerate(flevels):
        if flevel == "#":
            return True
        if i >= len(tlevels):
            return False
        if flevel != "+" and flevel != tlevels[i]:
            return False
    return len(tlevels) == len(flevels)


def validate_node_id(node: str) -> str:
    """Node ids carry their continuum layer: 'edge:cam1', 'fog:worker-0', 'cloud:server'."""
    layer, sep, name = node.partition(":")
    if not sep or not name or layer not in NODE_LAYERS:
        raise ValueError(
            f"node id {node!r} must be '<layer>:<name>' with layer one of {NODE_LAYERS}"
        )
    return node


def node_layer(node: str) -> str:
    return node.partition(":")[0]


@dataclass(frozen=True)
class Envelope:
    """One published message as seen on the bus."""

    msg_id: int
    topic: str
    payload: bytes
    publish_time: float  # milliseconds; virtual under SimBroker, wall-clock under TCP
    sender: str


@dataclass
class LinkLatency:
    """Directed per-pair delivery latency in ms with a default for unlisted pairs."""

    pairs: dict[tuple[str, str], float] = field(default_factory=dict)
    default_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.default_ms < 0:
            raise ValueError("default latency must be >= 0")
        for (a, b), ms in self.pairs.items():
            if ms < 0:
                raise ValueError(f"latency for ({a}, {b}) must be >= 0")
            if a == b and ms != 0:
                raise ValueError(f"latency from {a} to itself must be 0")

    def between(self, sender: str, receiver: str) -> float:
        if sender == receiver:
            return 0.0
        return self.pairs.get((sender, receiver), self.default_ms)


class SimClock:
    """Virtual-time event queue; equal due times fire in scheduling (FIFO) order."""

    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()

    def call_at(self, due_ms: float, fn: Callable[[], None]) -> None:
        due = float(due_ms)
        if due < self.now:
            raise ValueError(f"cannot schedule at {due} ms: time is already {self.now} ms")
        heapq.heappush(self._heap, (due, next(self._seq), fn))

    def call_later(self, delay_ms: float, fn: Callable[[], None]) -> None:
        if delay_ms < 0:
            raise ValueError("delay must be >= 0")
        self.call_at(self.now + delay_ms, fn)

    def pending(self) -> int:
        return len(self._heap)

    def step(self) -> float:
        """Run the next event, advancing the clock. Returns its due time."""
        due, _, fn = heapq.heappop(self._heap)
        self.now = due
        fn()
        return due


class SimBroker:
    """Single logical broker over a virtual clock.

    Handlers run inside the event loop, strictly one at a time, and may
    publish or schedule further events but must not block.
    """

    def __init__(self, latency: LinkLatency | None = None, max_events: int = 10_000_000):
        self.clock = SimClock()
        self.latency = latency if latency is not None else LinkLatency()
        self.max_events = max_events
        self._subs: dict[int, tuple[str, str, Handler]] = {}  # sub_id -> (node, filter, handler)
        self._sub_ids = itertools.count(1)
        self._msg_ids = itertools.count(1)
        self._running = True
        self.published: list[Envelope] = []
        self.delivery_trace: list[tuple[float, str, int]] = []

    @property
    def now(self) -> float:
        return self.clock.now

    def call_at(self, due_ms: float, fn: Callable[[], None]) -> None:
        self.clock.call_at(due_ms, fn)

    def call_later(self, delay_ms: float, fn: Callable[[], None]) -> None:
        self.clock.call_later(delay_ms, fn)

    def shutdown(self) -> None:
        self._running = False

    def _require_running(self) -> None:
        if not self._running:
            raise RuntimeError("broker has been shut down")

    def subscribe(self, node: str, filt: str, handler: Handler) -> int:
        self._require_running()
        validate_node_id(node)
        validate_filter(filt)
        sub_id = next(self._sub_ids)
        self._subs[sub_id] = (node, filt, handler)
        return sub_id

    def unsubscribe(self, sub_id: int) -> None:
        self._subs.pop(sub_id, None)

    def publish(self, sender: str, topic: str, payload: bytes) -> int:
        self._require_running()
        validate_node_id(sender)
        validate_topic(topic)
        if len(payload) > MAX_FRAME_BYTES:
            raise ValueError(f"payload of {len(payload)} bytes exceeds the 16 MiB frame limit")
        env = Envelope(next(self._msg_ids), topic, bytes(payload), self.clock.now, sender)
        self.published.append(env)
        for sub_id, (node, filt, _handler) in list(self._subs.items()):
            if topic_matches(filt, topic):
                due = self.clock.now + self.latency.between(sender, node)
                self.clock.call_at(due, lambda s=sub_id, e=env: self._deliver(s, e))
        return env.msg_id

    def _deliver(self, sub_id: int, env: Envelope) -> None:
        entry = self._subs.get(sub_id)
        if entry is None:  # unsubscribed while in flight
            return
        self.delivery_trace.append((self.clock.now, env.topic, env.msg_id))
        log.debug("deliver t=%.3f topic=%s msg=%d -> %s", self.clock.now, env.topic, env.msg_id, entry[0])
        entry[2](env)

    def run_until_idle(self) -> float:
        """Process events in (due, seq) order until none remain.

        Returns the due time of the last event processed by this call, 0.0 if
        the queue was already empty. Raises if the event count exceeds the
        livelock cap.
        """
        processed = 0
        last_due = 0.0
        while self.clock.pending():
            processed += 1
            if processed > self.max_events:
                raise RuntimeError(f"event cap of {self.max_events} exceeded; likely a livelock")
            last_due = self.clock.step()
        return last_due

    def drive(self, done: Callable[[], bool], timeout_ms: float | None = None) -> None:
        """Run the event loop to completion and check `done` was reached."""
        self.run_until_idle()
        if not done():
            raise RuntimeError("event queue drained before the workload completed")
