"""Datasets of cell graphs with accuracy labels, plus splits and JSONL I/O.

The synthetic accuracy oracle stands in for measured validation accuracy at
desk scale; real labeled data can be loaded from the same JSONL format.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .graphs import (
    DEFAULT_LIMITS,
    CellGraph,
    GraphRecordError,
    SearchSpaceLimits,
    enumerate_valid,
    graph_hash,
    longest_path,
    serialize,
    from_record,
    validate,
    NodeType,
)


@dataclass(frozen=True)
class ArchRecord:
    graph: CellGraph
    accuracy: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {self.accuracy}")


@dataclass(frozen=True)
class Dataset:
    records: tuple[ArchRecord, ...]
    provenance: Literal["synthetic", "loaded"]
    seed: int

    def __len__(self) -> int:
        return len(self.records)

    def graphs(self) -> list[CellGraph]:
        return [r.graph for r in self.records]

    def accuracies(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.records], dtype=np.float64)

    def node_counts(self) -> list[int]:
        return [r.graph.n for r in self.records]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.records[i] for i in indices), self.provenance, self.seed)


def synth_accuracy(g: CellGraph) -> float:
    """Deterministic accuracy surrogate in [0, 1].

    Skewed high like measured cell accuracies: convolutions help, pooling
    hurts, depth helps mildly, extra edges cost a little.  Depends only on
    label counts, edge count and the longest input-output path, so it is
    invariant under graph isomorphism.
    """
    report = validate(g)
    if not report.valid:
        raise ValueError("synthetic accuracy is only defined for valid graphs")
    c3 = sum(1 for t in g.labels if t is NodeType.CONV3X3)
    c1 = sum(1 for t in g.labels if t is NodeType.CONV1X1)
    mp = sum(1 for t in g.labels if t is NodeType.MAXPOOL3X3)
    arg = 1.5 + 0.5 * c3 + 0.2 * c1 - 0.6 * mp + 0.15 * longest_path(g) - 0.05 * len(g.edges)
    return 0.999 / (1.0 + math.exp(-arg))


def _sort_key(g: CellGraph) -> tuple[str, str]:
    # Canonical hash first; exact serialization breaks ties between
    # isomorphic duplicates in non-dedup'd datasets.
    return (graph_hash(g), serialize(g))


def make_dataset(
    limits: SearchSpaceLimits = DEFAULT_LIMITS,
    mode: Literal["enumerate_upto_n", "sample_k"] = "enumerate_upto_n",
    param: int = 5,
    seed: int = 0,
    dedup: bool = True,
) -> Dataset:
    """Build a synthetic dataset, deterministic given the seed.

    ``enumerate_upto_n`` takes every valid graph with 2..param nodes;
    ``sample_k`` draws param graphs without replacement from the enumerated
    space up to ``limits.max_nodes``.  Records are sorted by graph hash.
    """
    if mode == "enumerate_upto_n":
        if not 2 <= param <= limits.max_nodes:
            raise ValueError(f"enumerate_upto_n needs param in [2, {limits.max_nodes}]")
        graphs = [g for n in range(2, param + 1) for g in enumerate_valid(n, limits, dedup=dedup)]
    elif mode == "sample_k":
        pool = [
            g
            for n in range(2, limits.max_nodes + 1)
            for g in enumerate_valid(n, limits, dedup=dedup)
        ]
        if param < 1 or param > len(pool):
            raise ValueError(f"sample_k needs param in [1, {len(pool)}], got {param}")
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(pool), size=param, replace=False)
        graphs = [pool[i] for i in sorted(picks)]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not graphs:
        raise ValueError("dataset would be empty")
    graphs.sort(key=_sort_key)
    records = tuple(ArchRecord(g, synth_accuracy(g)) for g in graphs)
    return Dataset(records, "synthetic", seed)


@dataclass(frozen=True)
class SplitSpec:
    """Train/test/validation ratios plus the assignment method."""

    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    method: Literal["random", "size-stratified"] = "random"
    seed: int = 0

    def __post_init__(self) -> None:
        if any(r <= 0 for r in self.ratios):
            raise ValueError("split ratios must be positive")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(self.ratios)}")


@dataclass(frozen=True)
class DataSplit:
    train: tuple[int, ...]
    test: tuple[int, ...]
    validation: tuple[int, ...]

    def parts(self) -> tuple[tuple[int, ...], ...]:
        return (self.train, self.test, self.validation)


def _apportion(total: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of total * ratios."""
    ideal = [total * r for r in ratios]
    counts = [int(math.floor(x)) for x in ideal]
    remainder = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def split(ds: Dataset, spec: SplitSpec) -> DataSplit:
    """Disjoint, covering train/test/validation index sets."""
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    if spec.method == "random":
        order = rng.permutation(len(ds))
        counts = _apportion(len(ds), spec.ratios)
        start = 0
        for part, c in zip(parts, counts):
            part.extend(int(i) for i in order[start : start + c])
            start += c
    elif spec.method == "size-stratified":
        by_size: dict[int, list[int]] = {}
        for i, r in enumerate(ds.records):
            by_size.setdefault(r.graph.n, []).append(i)
        for n in sorted(by_size):
            idx = np.array(by_size[n])
            order = idx[rng.permutation(len(idx))]
            counts = _apportion(len(idx), spec.ratios)
            start = 0
            for part, c in zip(parts, counts):
                part.extend(int(i) for i in order[start : start + c])
                start += c
    else:
        raise ValueError(f"unknown split method {spec.method!r}")
    if any(len(p) == 0 for p in parts):
        raise ValueError(
            f"dataset of {len(ds)} records is too small for ratios {spec.ratios}"
        )
    return DataSplit(*(tuple(sorted(p)) for p in parts))


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    """Write one JSONL record per graph, sorted by graph hash."""
    records = sorted(ds.records, key=lambda r: _sort_key(r.graph))
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(serialize(r.graph, acc=r.accuracy) + "\n")
    os.replace(tmp, path)


def load_dataset(path: str | os.PathLike, seed: int = 0) -> Dataset:
    """Read a JSONL dataset; every record needs a valid graph and an
    accuracy label in [0, 1]."""
    records: list[ArchRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphRecordError("record", f"line {lineno}: invalid JSON") from exc
            g, acc = from_record(data)
            if acc is None:
                raise GraphRecordError("acc", f"line {lineno}: accuracy missing")
            if not 0.0 <= acc <= 1.0:
                raise GraphRecordError("acc", f"line {lineno}: {acc} outside [0, 1]")
            if not validate(g).valid:
                raise GraphRecordError("record", f"line {lineno}: graph fails validity checks")
            records.append(ArchRecord(g, acc))
    if not records:
        raise GraphRecordError("record", f"{path}: no records")
    return Dataset(tuple(records), "loaded", seed)


def dataset_digest(ds: Dataset) -> str:
    """Content digest used to tie checkpoints to their training data."""
    h = hashlib.sha256()
    for r in ds.records:
        h.update(serialize(r.graph, acc=r.accuracy).encode("ascii"))
        h.update(b"\n")
    return h.hexdigest()
