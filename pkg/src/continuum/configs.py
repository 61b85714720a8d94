"""Experiment configuration documents: JSON in, validated dataclasses out.

Every parse error names the offending field so the CLI can exit with a usable
diagnostic before any output is written.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .data import Dataset, load_csv, synth_blobs
from .federated import FlConfig, StragglerModel
from .pipeline import ArrivalSchedule, Constant, PipelineSpec, StageSpec, Uniform


class ConfigError(ValueError):
    """A configuration document failed validation."""


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing required field {key!r}")
    return doc[key]


def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}; expected {sorted(allowed)}")


def _int(value, where: str, minimum: int | None = None) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: must be >= {minimum}, got {value}")
    return value


def _num(value, where: str, minimum: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: must be >= {minimum}, got {value}")
    return float(value)


def _str(value, where: str) -> str:
    if not isinstance(value, str) or not value:
        raise ConfigError(f"{where}: expected a non-empty string, got {value!r}")
    return value


def resolve_seed(doc_seed, override: int | None) -> int:
    """CLI override wins, then the document; otherwise draw one and record it."""
    if override is not None:
        seed = int(override)
    elif doc_seed is not None:
        if not isinstance(doc_seed, int) or isinstance(doc_seed, bool):
            raise ConfigError(f"seed: expected an integer, got {doc_seed!r}")
        seed = doc_seed
    else:
        seed = int.from_bytes(os.urandom(8), "big") >> 1
    if seed < 0:
        raise ConfigError(f"seed: must be >= 0, got {seed}")
    return seed


@dataclass(frozen=True)
class DatasetConfig:
    synth: dict | None = None
    csv: dict | None = None

    def build(self) -> Dataset:
        if self.synth is not None:
            s = self.synth
            return synth_blobs(
                n=s["n"], d=s["d"], num_classes=s["classes"],
                separation=s["separation"], seed=s["seed"],
            )
        assert self.csv is not None
        c = self.csv
        return load_csv(
            c["path"], label_column=c["label_column"], num_classes=c["num_classes"],
            has_header=c.get("has_header", False),
        )


def parse_dataset(doc, where: str = "dataset", config_dir: Path | None = None) -> DatasetConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    _reject_unknown(doc, {"synth", "csv"}, where)
    if ("synth" in doc) == ("csv" in doc):
        raise ConfigError(f"{where}: exactly one of 'synth' or 'csv' must be present")
    if "synth" in doc:
        s = doc["synth"]
        if not isinstance(s, dict):
            raise ConfigError(f"{where}.synth: expected an object")
        _reject_unknown(s, {"n", "d", "classes", "separation", "seed"}, f"{where}.synth")
        spec = {
            "n": _int(_require(s, "n", f"{where}.synth"), f"{where}.synth.n", 2),
            "d": _int(_require(s, "d", f"{where}.synth"), f"{where}.synth.d", 1),
            "classes": _int(_require(s, "classes", f"{where}.synth"), f"{where}.synth.classes", 2),
            "separation": _num(_require(s, "separation", f"{where}.synth"),
                               f"{where}.synth.separation", 0.0),
            "seed": _int(_require(s, "seed", f"{where}.synth"), f"{where}.synth.seed", 0),
        }
        return DatasetConfig(synth=spec)
    c = doc["csv"]
    if not isinstance(c, dict):
        raise ConfigError(f"{where}.csv: expected an object")
    _reject_unknown(c, {"path", "label_column", "num_classes", "has_header"}, f"{where}.csv")
    path = Path(_str(_require(c, "path", f"{where}.csv"), f"{where}.csv.path"))
    if config_dir is not None and not path.is_absolute():
        path = config_dir / path
    if not path.exists():
        raise ConfigError(f"{where}.csv.path: file not found: {path}")
    spec = {
        "path": str(path),
        "label_column": _int(_require(c, "label_column", f"{where}.csv"),
                             f"{where}.csv.label_column", 0),
        "num_classes": _int(_require(c, "num_classes", f"{where}.csv"),
                            f"{where}.csv.num_classes", 2),
        "has_header": bool(c.get("has_header", False)),
    }
    return DatasetConfig(csv=spec)


@dataclass(frozen=True)
class SdpExperiment:
    name: str
    pipeline: PipelineSpec
    arrivals: ArrivalSchedule
    seed: int


def parse_sdp(doc: dict, seed_override: int | None = None) -> SdpExperiment:
    if not isinstance(doc, dict):
        raise ConfigError("top level: expected a JSON object")
    _reject_unknown(doc, {"name", "seed", "source_topic", "arrivals", "stages"}, "top level")
    name = _str(_require(doc, "name", "top level"), "name")
    seed = resolve_seed(doc.get("seed"), seed_override)
    source = _str(_require(doc, "source_topic", "top level"), "source_topic")

    arrivals_doc = _require(doc, "arrivals", "top level")
    if not isinstance(arrivals_doc, dict):
        raise ConfigError("arrivals: expected an object")
    _reject_unknown(arrivals_doc, {"count", "interval_ms", "times_ms"}, "arrivals")
    try:
        if "times_ms" in arrivals_doc:
            arrivals = ArrivalSchedule(times_ms=tuple(arrivals_doc["times_ms"]))
        else:
            arrivals = ArrivalSchedule(
                count=_int(_require(arrivals_doc, "count", "arrivals"), "arrivals.count", 1),
                interval_ms=_num(_require(arrivals_doc, "interval_ms", "arrivals"),
                                 "arrivals.interval_ms"),
            )
    except ValueError as exc:
        raise ConfigError(f"arrivals: {exc}") from None

    stages_doc = _require(doc, "stages", "top level")
    if not isinstance(stages_doc, list) or not stages_doc:
        raise ConfigError("stages: expected a non-empty array")
    stages = []
    for i, s in enumerate(stages_doc):
        where = f"stages[{i}]"
        if not isinstance(s, dict):
            raise ConfigError(f"{where}: expected an object")
        _reject_unknown(
            s,
            {"name", "node", "input_topic", "output_topic", "service_ms",
             "service_uniform_ms", "kind", "servers", "cold_start_ms",
             "cold_idle_threshold_ms"},
            where,
        )
        if ("service_ms" in s) == ("service_uniform_ms" in s):
            raise ConfigError(f"{where}: exactly one of service_ms or service_uniform_ms")
        if "service_ms" in s:
            service = Constant(_num(s["service_ms"], f"{where}.service_ms", 0.0))
        else:
            pair = s["service_uniform_ms"]
            if not isinstance(pair, list) or len(pair) != 2:
                raise ConfigError(f"{where}.service_uniform_ms: expected [lo, hi]")
            service = Uniform(_num(pair[0], f"{where}.service_uniform_ms[0]", 0.0),
                              _num(pair[1], f"{where}.service_uniform_ms[1]", 0.0))
        output = s.get("output_topic")
        try:
            stages.append(
                StageSpec(
                    name=_str(_require(s, "name", where), f"{where}.name"),
                    node=_str(_require(s, "node", where), f"{where}.node"),
                    input_topic=_str(_require(s, "input_topic", where), f"{where}.input_topic"),
                    output_topic=None if output is None else _str(output, f"{where}.output_topic"),
                    service=service,
                    kind=s.get("kind", "process"),
                    servers=_int(s.get("servers", 1), f"{where}.servers", 1),
                    cold_start_ms=_num(s.get("cold_start_ms", 0.0), f"{where}.cold_start_ms", 0.0),
                    cold_idle_threshold_ms=_num(s.get("cold_idle_threshold_ms", 0.0),
                                                f"{where}.cold_idle_threshold_ms", 0.0),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    try:
        pipeline = PipelineSpec(name=name, source_topic=source, stages=tuple(stages))
    except ValueError as exc:
        raise ConfigError(f"stages: {exc}") from None
    return SdpExperiment(name=name, pipeline=pipeline, arrivals=arrivals, seed=seed)


@dataclass(frozen=True)
class DistTrainExperiment:
    layer_sizes: tuple[int, ...]
    activation: str
    learning_rate: float
    epochs: int
    workers: int
    seed: int
    dataset: DatasetConfig


def _parse_layers(doc: dict, where: str = "layers") -> tuple[int, ...]:
    layers = _require(doc, "layers", "top level")
    if not isinstance(layers, list) or len(layers) < 2:
        raise ConfigError(f"{where}: expected an array of at least two layer sizes")
    return tuple(_int(v, f"{where}[{i}]", 1) for i, v in enumerate(layers))


def parse_dist_train(
    doc: dict, seed_override: int | None = None, config_dir: Path | None = None
) -> DistTrainExperiment:
    if not isinstance(doc, dict):
        raise ConfigError("top level: expected a JSON object")
    _reject_unknown(
        doc, {"layers", "activation", "lr", "epochs", "workers", "seed", "dataset"}, "top level"
    )
    return DistTrainExperiment(
        layer_sizes=_parse_layers(doc),
        activation=_str(doc.get("activation", "sigmoid"), "activation"),
        learning_rate=_num(_require(doc, "lr", "top level"), "lr"),
        epochs=_int(_require(doc, "epochs", "top level"), "epochs", 1),
        workers=_int(_require(doc, "workers", "top level"), "workers", 1),
        seed=resolve_seed(doc.get("seed"), seed_override),
        dataset=parse_dataset(_require(doc, "dataset", "top level"), config_dir=config_dir),
    )


@dataclass(frozen=True)
class FlExperiment:
    config: FlConfig
    stragglers: StragglerModel
    dataset: DatasetConfig


def parse_fl(
    doc: dict, seed_override: int | None = None, config_dir: Path | None = None
) -> FlExperiment:
    if not isinstance(doc, dict):
        raise ConfigError("top level: expected a JSON object")
    _reject_unknown(
        doc,
        {"mode", "clients", "rounds", "samples_per_round", "local_epochs", "lr",
         "interval_ms", "staleness_bound", "straggler_p", "straggler_delay_ms",
         "layers", "activation", "seed", "dataset"},
        "top level",
    )
    mode = _str(_require(doc, "mode", "top level"), "mode")
    if mode not in ("sync", "async"):
        raise ConfigError(f"mode: expected 'sync' or 'async', got {mode!r}")
    seed = resolve_seed(doc.get("seed"), seed_override)
    try:
        config = FlConfig(
            mode=mode,
            num_clients=_int(_require(doc, "clients", "top level"), "clients", 1),
            rounds=_int(_require(doc, "rounds", "top level"), "rounds", 1),
            layer_sizes=_parse_layers(doc),
            learning_rate=_num(_require(doc, "lr", "top level"), "lr", 0.0),
            samples_per_round=_int(doc.get("samples_per_round", 60), "samples_per_round", 1),
            local_epochs=_int(doc.get("local_epochs", 1), "local_epochs", 0),
            hidden_activation=_str(doc.get("activation", "sigmoid"), "activation"),
            aggregation_interval_ms=_num(doc.get("interval_ms", 60_000), "interval_ms"),
            staleness_bound=_int(doc.get("staleness_bound", 1), "staleness_bound", 0),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    delay = doc.get("straggler_delay_ms")
    if isinstance(delay, list):
        if len(delay) != 2:
            raise ConfigError("straggler_delay_ms: expected [lo, hi]")
        delay = (_num(delay[0], "straggler_delay_ms[0]", 0.0),
                 _num(delay[1], "straggler_delay_ms[1]", 0.0))
    elif delay is not None:
        delay = _num(delay, "straggler_delay_ms", 0.0)
    try:
        stragglers = StragglerModel(
            miss_probability=_num(doc.get("straggler_p", 0.0), "straggler_p", 0.0),
            delay_ms=delay,
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if mode == "sync" and not stragglers.is_zero():
        raise ConfigError("straggler_p/straggler_delay_ms require async mode")
    return FlExperiment(
        config=config,
        stragglers=stragglers,
        dataset=parse_dataset(_require(doc, "dataset", "top level"), config_dir=config_dir),
    )
