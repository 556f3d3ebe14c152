"""Training-set down-sampling strategies.

Two discrete-space methods (uniform per node size, and uniform over
edit-distance strata within each size) plus a continuous-space method that
bins a PCA-reduced latent embedding into a randomly shifted equal-size grid
and picks the point nearest each occupied cell's center.  Every sampler
returns exactly k distinct indices and is deterministic given its seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .graphs import edit_distance


@dataclass(frozen=True)
class SampleResult:
    method: str
    seed: int
    k: int
    indices: tuple[int, ...]
    diagnostics: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "method": self.method,
                "seed": self.seed,
                "k": self.k,
                "indices": list(self.indices),
                "diagnostics": self.diagnostics,
            }
        )


def _check_k(k: int, total: int) -> None:
    if not 1 <= k <= total:
        raise ValueError(f"k must be in [1, {total}], got {k}")


def proportional_allocation(
    weights: Sequence[float], capacities: Sequence[int], k: int
) -> list[int]:
    """Largest-remainder apportionment of k over weighted cells, capped at
    each cell's capacity; excess spills over to the most underallocated
    cells.  Deterministic, ties broken by cell order."""
    if k > sum(capacities):
        raise ValueError("k exceeds total capacity")
    total_w = float(sum(weights))
    ideal = [k * w / total_w for w in weights]
    counts = [min(int(math.floor(x)), c) for x, c in zip(ideal, capacities)]
    while sum(counts) < k:
        open_cells = [i for i in range(len(counts)) if counts[i] < capacities[i]]
        open_cells.sort(key=lambda i: (-(ideal[i] - counts[i]), i))
        for i in open_cells[: k - sum(counts)]:
            counts[i] += 1
    return counts


def _size_classes(ds: Dataset) -> list[tuple[int, list[int]]]:
    classes: dict[int, list[int]] = {}
    for i, r in enumerate(ds.records):
        classes.setdefault(r.graph.n, []).append(i)
    return sorted(classes.items())


def sample_uniform_per_size(ds: Dataset, k: int, seed: int) -> SampleResult:
    """k indices split across node-size classes proportionally to class
    sizes, drawn uniformly without replacement within each class."""
    _check_k(k, len(ds))
    rng = np.random.default_rng(seed)
    classes = _size_classes(ds)
    sizes = [len(idx) for _, idx in classes]
    quotas = proportional_allocation(sizes, sizes, k)
    picked: list[int] = []
    for (n, idx), q in zip(classes, quotas):
        if q:
            sel = rng.choice(len(idx), size=q, replace=False)
            picked.extend(idx[i] for i in sel)
    return SampleResult(
        method="size-uniform",
        seed=seed,
        k=k,
        indices=tuple(sorted(picked)),
        diagnostics={"class_sizes": sizes, "class_quotas": quotas},
    )


def sample_edit_uniform(ds: Dataset, k: int, seed: int) -> SampleResult:
    """Within each size class, stratify by edit distance to a random anchor
    graph and spread the class quota uniformly over the non-empty strata."""
    _check_k(k, len(ds))
    rng = np.random.default_rng(seed)
    classes = _size_classes(ds)
    sizes = [len(idx) for _, idx in classes]
    quotas = proportional_allocation(sizes, sizes, k)
    picked: list[int] = []
    anchors: list[int] = []
    for (n, idx), q in zip(classes, quotas):
        anchor = idx[int(rng.integers(len(idx)))]
        anchors.append(anchor)
        if not q:
            continue
        strata: dict[int, list[int]] = {}
        anchor_graph = ds.records[anchor].graph
        for i in idx:
            d = edit_distance(ds.records[i].graph, anchor_graph)
            strata.setdefault(d, []).append(i)
        ordered = sorted(strata.items())
        stratum_quotas = proportional_allocation(
            [1.0] * len(ordered), [len(s) for _, s in ordered], q
        )
        for (_, members), sq in zip(ordered, stratum_quotas):
            if sq:
                sel = rng.choice(len(members), size=sq, replace=False)
                picked.extend(members[i] for i in sel)
    return SampleResult(
        method="edit-uniform",
        seed=seed,
        k=k,
        indices=tuple(sorted(picked)),
        diagnostics={"class_sizes": sizes, "class_quotas": quotas, "anchors": anchors},
    )


# ---------------------------------------------------------------------------
# principal component analysis over the latent means


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # [d]
    components: np.ndarray  # [d, d], orthonormal rows, variance-descending
    explained_variance: np.ndarray  # [d]
    explained_variance_ratio: np.ndarray  # [d]


def fit_pca(embeddings: np.ndarray) -> PcaModel:
    """Eigendecomposition of the sample covariance (divisor m - 1).

    Components are sorted by eigenvalue descending; each component's sign is
    fixed so its largest-magnitude entry is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a 2-d array with at least two rows")
    if not np.isfinite(x).all():
        raise ValueError("embeddings must be finite")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    components = eigvecs[:, order].T.copy()
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1
    total = eigvals.sum()
    if total <= 0:
        raise ValueError("embeddings have zero variance")
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=eigvals,
        explained_variance_ratio=eigvals / total,
    )


def reduce(model: PcaModel, embeddings: np.ndarray, dims: int = 4) -> np.ndarray:
    """Centered projection onto the first ``dims`` components."""
    if not 1 <= dims <= model.components.shape[0]:
        raise ValueError(f"dims must be in [1, {model.components.shape[0]}], got {dims}")
    x = np.asarray(embeddings, dtype=np.float64)
    return (x - model.mean) @ model.components[:dims].T


# ---------------------------------------------------------------------------
# latent-space binning


@dataclass(frozen=True)
class BinGrid:
    """Equal-size hypercube grid over the reduced space.

    The base origin sits one bin width below the data's bounding box, so a
    grid shifted up by any fraction of the width still covers every point.
    """

    dims: int
    bins_per_dim: int
    origin: np.ndarray  # [dims], base (unshifted) origin
    width: np.ndarray  # [dims], all > 0
    shift: np.ndarray  # [dims], fractions of the width in [0, 1)

    def shifted_origin(self) -> np.ndarray:
        return self.origin + self.shift * self.width

    def cell_indices(self, points: np.ndarray) -> np.ndarray:
        return np.floor((points - self.shifted_origin()) / self.width).astype(np.int64)

    def cell_center(self, idx: np.ndarray) -> np.ndarray:
        return self.shifted_origin() + (np.asarray(idx) + 0.5) * self.width


def _grid_geometry(points: np.ndarray, bins_per_dim: int) -> tuple[np.ndarray, np.ndarray]:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    width = (hi - lo) / bins_per_dim
    width = np.where(width > 0, width, 1.0)  # degenerate dims collapse to one bin
    return lo, width


@dataclass(frozen=True)
class BinCalibration:
    bins_per_dim: int
    nonempty_cells: int
    trajectory: tuple[tuple[int, int], ...]  # (bins_per_dim, nonempty) per probe


def calibrate_bins(reduced: np.ndarray, k: int, hard_cap: int = 65536) -> BinCalibration:
    """Smallest per-dimension bin count whose unshifted grid has at least k
    occupied cells.

    The search stops early once every distinct point is isolated (more bins
    cannot help) and is hard-capped as a safety net for near-duplicate
    clouds.
    """
    points = np.asarray(reduced, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("need a non-empty 2-d point array")
    if k < 1:
        raise ValueError("k must be at least 1")
    distinct = np.unique(points, axis=0).shape[0]
    trajectory: list[tuple[int, int]] = []
    b = 1
    while True:
        lo, width = _grid_geometry(points, b)
        idx = np.floor((points - lo) / width)
        idx = np.minimum(idx, b - 1).astype(np.int64)  # boundary points fall inward
        count = np.unique(idx, axis=0).shape[0]
        trajectory.append((b, count))
        if count >= k or count >= distinct or b >= hard_cap:
            return BinCalibration(b, count, tuple(trajectory))
        b += 1


def latent_bin_sample(reduced: np.ndarray, k: int, seed: int) -> SampleResult:
    """Grid-based selection in the reduced latent space.

    Calibrate the grid, shift it by a random fraction of the bin width per
    dimension, take the nearest point to each occupied cell's center, then
    reconcile to exactly k: surplus points are discarded at random; missing
    points are drawn one per randomly chosen cell (cells with unselected
    points left), refilling every such cell per round while the deficit
    exceeds the cell count.
    """
    points = np.asarray(reduced, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    m = points.shape[0]
    _check_k(k, m)
    rng = np.random.default_rng(seed)
    cal = calibrate_bins(points, k)
    lo, width = _grid_geometry(points, cal.bins_per_dim)
    grid = BinGrid(
        dims=points.shape[1],
        bins_per_dim=cal.bins_per_dim,
        origin=lo - width,
        width=width,
        shift=rng.random(points.shape[1]),
    )
    idx = grid.cell_indices(points)
    cells: dict[tuple[int, ...], list[int]] = {}
    for i, cell in enumerate(map(tuple, idx)):
        cells.setdefault(cell, []).append(i)

    selected: set[int] = set()
    for cell in sorted(cells):
        members = cells[cell]
        center = grid.cell_center(np.array(cell))
        dists = np.linalg.norm(points[members] - center, axis=1)
        selected.add(members[int(np.argmin(dists))])  # argmin takes the lowest index on ties

    nonempty = len(cells)
    if len(selected) > k:
        pool = sorted(selected)
        keep = rng.choice(len(pool), size=k, replace=False)
        selected = {pool[i] for i in keep}
    while len(selected) < k:
        open_cells = [c for c in sorted(cells) if any(i not in selected for i in cells[c])]
        missing = k - len(selected)
        if missing <= len(open_cells):
            chosen = rng.choice(len(open_cells), size=missing, replace=False)
            rounds = [open_cells[i] for i in sorted(chosen)]
        else:
            rounds = open_cells
        for cell in rounds:
            candidates = [i for i in cells[cell] if i not in selected]
            selected.add(candidates[int(rng.integers(len(candidates)))])

    return SampleResult(
        method="latent-bin",
        seed=seed,
        k=k,
        indices=tuple(sorted(selected)),
        diagnostics={
            "bins_per_dim": cal.bins_per_dim,
            "nonempty_bins": nonempty,
            "calibration_trajectory": [list(t) for t in cal.trajectory],
            "shift": [float(s) for s in grid.shift],
        },
    )


def pca_report_rows(model: PcaModel) -> list[tuple[int, float, float, float]]:
    """(component, eigenvalue, ratio, cumulative ratio) rows for the report."""
    rows = []
    cumulative = 0.0
    for i, (ev, ratio) in enumerate(
        zip(model.explained_variance, model.explained_variance_ratio)
    ):
        cumulative += float(ratio)
        rows.append((i, float(ev), float(ratio), cumulative))
    return rows
