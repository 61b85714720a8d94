"""Synthetic Gaussian-blob datasets, delimited-text ingestion, and partitioning.

Partitioning deals a seeded shuffle round-robin so part sizes never differ by
more than one, and batch schedules walk each part sequentially with wraparound
so every training round is replayable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Batch


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int class indices
    num_classes: int
    name: str = ""

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per sample")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class PartitionPlan:
    """Assignment of sample index -> part index, a pure function of (n, parts, seed)."""

    num_parts: int
    assignment: np.ndarray
    seed: int


def class_directions(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """Deterministic near-orthonormal unit direction per class via Gram-Schmidt."""
    rng = np.random.default_rng(seed)
    dirs: list[np.ndarray] = []
    for _ in range(num_classes):
        v = rng.normal(size=dim)
        residual = v.copy()
        for u in dirs:
            residual -= (residual @ u) * u
        norm = np.linalg.norm(residual)
        if norm > 1e-8:
            dirs.append(residual / norm)
        else:  # more classes than dimensions: fall back to the raw direction
            dirs.append(v / np.linalg.norm(v))
    return np.stack(dirs)


def synth_blobs(
    n: int,
    d: int,
    num_classes: int,
    separation: float,
    seed: int,
    name: str = "blobs",
) -> Dataset:
    """Isotropic unit-variance Gaussian per class, centered at separation * u_c.

    Labels are interleaved (0, 1, ..., C-1, 0, ...) so class counts are
    balanced within one sample.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if n < num_classes:
        raise ValueError("n must be >= num_classes")
    if d < 1:
        raise ValueError("d must be >= 1")
    if separation < 0:
        raise ValueError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    centers = separation * class_directions(num_classes, d, seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    features = rng.normal(size=(n, d)) + centers[labels]
    return Dataset(features, labels, num_classes, name)


def load_csv(path: str | Path, label_column: int, num_classes: int, has_header: bool = False) -> Dataset:
    """Read a comma-separated file: one column holds integer labels, the rest floats.

    Diagnostics use 1-based row and column numbers. Rows must all have the
    same number of columns.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if has_header:
        lines = lines[1:]
    rows = [line.split(",") for line in lines if line != ""]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    if not 0 <= label_column < width:
        raise ValueError(f"{path}: label column {label_column} out of range for {width} columns")
    offset = 2 if has_header else 1
    features = np.empty((len(rows), width - 1))
    labels = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(
                f"{path}: row {i + offset} has {len(row)} columns, expected {width}"
            )
        col = 0
        for j, cell in enumerate(row):
            if j == label_column:
                try:
                    label = int(cell)
                except ValueError:
                    raise ValueError(
                        f"{path}: unparsable label at row {i + offset}, column {j + 1}: {cell!r}"
                    ) from None
                if not 0 <= label < num_classes:
                    raise ValueError(
                        f"{path}: label {label} at row {i + offset} outside [0, {num_classes})"
                    )
                labels[i] = label
            else:
                try:
                    features[i, col] = float(cell)
                except ValueError:
                    raise ValueError(
                        f"{path}: unparsable value at row {i + offset}, column {j + 1}: {cell!r}"
                    ) from None
                col += 1
    return Dataset(features, labels, num_classes, name=path.stem)


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Emit features then the label as the final column; floats round-trip exactly."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        for x, y in zip(dataset.features, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in x))
            fh.write(f",{int(y)}\n")


def partition_plan(n: int, num_parts: int, seed: int) -> PartitionPlan:
    """Seeded uniform shuffle dealt round-robin; sizes differ by at most one."""
    if num_parts < 1:
        raise ValueError("num_parts must be >= 1")
    if num_parts > n:
        raise ValueError(f"cannot split {n} samples into {num_parts} parts")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    for part in range(num_parts):
        assignment[perm[part::num_parts]] = part
    return PartitionPlan(num_parts, assignment, seed)


def partition(dataset: Dataset, num_parts: int, seed: int) -> list[Dataset]:
    """Split into disjoint covering parts; samples keep shuffled order within a part."""
    plan = partition_plan(len(dataset), num_parts, seed)
    perm = np.random.default_rng(seed).permutation(len(dataset))
    parts = []
    for k in range(num_parts):
        idx = perm[k::num_parts]
        parts.append(
            Dataset(
                dataset.features[idx],
                dataset.labels[idx],
                dataset.num_classes,
                name=f"{dataset.name}/part{k}",
            )
        )
    assert sum(len(p) for p in parts) == len(dataset)
    return parts


def next_round_batch(part: Dataset, round_index: int, samples_per_round: int) -> Batch:
    """Samples [round*s, (round+1)*s) of the part, wrapping modulo its size."""
    if samples_per_round < 1:
        raise ValueError("samples_per_round must be >= 1")
    if round_index < 0:
        raise ValueError("round_index must be >= 0")
    n = len(part)
    idx = (round_index * samples_per_round + np.arange(samples_per_round)) % n
    return Batch(part.features[idx], part.labels[idx])
