"""Evaluation protocols: reconstruction accuracy, prior validity, and the
sampling-stability experiment.

The protocols are written against two callables (an embedding function and a
latent-decoding function) so they can be exercised with stubs as well as
with trained models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import DataSplit, Dataset
from .encoder import EncoderConfig
from .graphs import CellGraph, validate
from .predictor import PredTrainConfig, rmse, train_joint
from .sampling import (
    fit_pca,
    latent_bin_sample,
    reduce,
    sample_edit_uniform,
    sample_uniform_per_size,
)

EncodeFn = Callable[[Sequence[CellGraph]], tuple[np.ndarray, np.ndarray]]
DecodeFn = Callable[[np.ndarray, np.random.Generator], list[CellGraph]]


def eval_reconstruction(
    encode_fn: EncodeFn,
    decode_fn: DecodeFn,
    test_graphs: Sequence[CellGraph],
    seed: int,
    z_samples: int = 10,
    decodes_per_z: int = 10,
    chunk_size: int = 4096,
) -> float:
    """Fraction of stochastic decodes that exactly equal the input graph.

    Per graph: draw ``z_samples`` posterior samples, decode each
    ``decodes_per_z`` times, and compare in canonical form (label sequence
    plus edge set).  Returns the mean over the test set.
    """
    if not test_graphs:
        raise ValueError("reconstruction needs a non-empty test set")
    rng = np.random.default_rng(seed)
    mu, logvar = encode_fn(test_graphs)
    mu = np.asarray(mu, dtype=np.float64)
    std = np.exp(0.5 * np.asarray(logvar, dtype=np.float64))
    tasks: list[np.ndarray] = []
    owners: list[int] = []
    for i in range(len(test_graphs)):
        eps = rng.standard_normal((z_samples, mu.shape[1]))
        zs = mu[i] + std[i] * eps
        for z in zs:
            for _ in range(decodes_per_z):
                tasks.append(z)
                owners.append(i)
    matches = np.zeros(len(test_graphs), dtype=np.int64)
    for start in range(0, len(tasks), chunk_size):
        chunk = np.stack(tasks[start : start + chunk_size])
        decoded = decode_fn(chunk, rng)
        for j, g in enumerate(decoded):
            if g == test_graphs[owners[start + j]]:
                matches[owners[start + j]] += 1
    per_graph = matches / (z_samples * decodes_per_z)
    return float(per_graph.mean())


def eval_prior_validity(
    decode_fn: DecodeFn,
    latent_dim: int,
    seed: int,
    num_latents: int = 1000,
    decodes_per_latent: int = 10,
    chunk_size: int = 4096,
) -> float:
    """Fraction of decodes from standard-normal latents passing the five
    structural validity checks."""
    rng = np.random.default_rng(seed)
    latents = rng.standard_normal((num_latents, latent_dim))
    tasks = np.repeat(latents, decodes_per_latent, axis=0)
    valid = 0
    for start in range(0, len(tasks), chunk_size):
        decoded = decode_fn(tasks[start : start + chunk_size], rng)
        valid += sum(1 for g in decoded if validate(g).valid)
    return valid / len(tasks)


# ---------------------------------------------------------------------------
# sampling-stability experiment


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    method: str
    fraction: float
    seed: int
    metric: str
    value: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise ValueError(f"metric value must be finite, got {self.value}")


METRIC_CSV_HEADER = ("experiment", "method", "fraction", "seed", "metric", "value")

STABILITY_METHODS = ("size-uniform", "edit-uniform", "latent-bin")

DEFAULT_FRACTIONS = (0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9)


@dataclass(frozen=True)
class StabilityConfig:
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    num_seeds: int = 3
    epochs: int = 100
    base_seed: int = 0
    latent_dims: int = 4

    def __post_init__(self) -> None:
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1]")
        if self.num_seeds < 1:
            raise ValueError("need at least one seed")


def _cell_seed(parts: Sequence[int]) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def run_sampling_stability(
    ds: Dataset,
    split: DataSplit,
    train_embeddings: np.ndarray,
    cfg: StabilityConfig,
    pred_cfg: PredTrainConfig,
    enc_cfg: EncoderConfig,
    progress: Callable[[MetricRow], None] | None = None,
) -> tuple[list[MetricRow], dict]:
    """Down-sample the training set only, retrain the predictor per cell,
    and record the test RMSE at the best validation epoch.

    ``train_embeddings`` holds the latent means of the training records (in
    ``split.train`` order) from an unsupervised autoencoder; the latent
    sampler bins their PCA reduction.  The training seed of a cell depends
    only on (replicate, fraction), so at fraction 1.0 every method trains on
    identical data with identical seeds and must agree.
    """
    train_ds = ds.subset(split.train)
    t = len(train_ds)
    if t == 0:
        raise ValueError("empty training split")
    emb = np.asarray(train_embeddings, dtype=np.float64)
    if emb.shape[0] != t:
        raise ValueError(f"need one embedding per training record ({t}), got {emb.shape[0]}")
    dims = min(cfg.latent_dims, emb.shape[1])
    reduced = reduce(fit_pca(emb), emb, dims=dims)

    rows: list[MetricRow] = []
    for rep in range(cfg.num_seeds):
        rep_seed = cfg.base_seed + rep
        for fi, fraction in enumerate(cfg.fractions):
            k = round(fraction * t)
            if k < 1:
                raise ValueError(f"fraction {fraction} yields an empty training set")
            train_seed = _cell_seed([rep_seed, fi])
            for mi, method in enumerate(STABILITY_METHODS):
                sample_seed = _cell_seed([rep_seed, fi, mi + 1])
                if method == "size-uniform":
                    local = sample_uniform_per_size(train_ds, k, sample_seed).indices
                elif method == "edit-uniform":
                    local = sample_edit_uniform(train_ds, k, sample_seed).indices
                else:
                    local = latent_bin_sample(reduced, k, sample_seed).indices
                cell_split = DataSplit(
                    train=tuple(split.train[i] for i in local),
                    test=split.test,
                    validation=split.validation,
                )
                cell_cfg = PredTrainConfig(
                    lr=pred_cfg.lr,
                    epochs=cfg.epochs,
                    batch_size=pred_cfg.batch_size,
                    seed=train_seed,
                )
                result = train_joint(ds, cell_split, cell_cfg, enc_cfg)
                preds = result.model.predict_graphs([ds.records[i].graph for i in split.test])
                truth = ds.accuracies()[list(split.test)]
                row = MetricRow(
                    experiment="sampling-stability",
                    method=method,
                    fraction=fraction,
                    seed=rep_seed,
                    metric="test_rmse",
                    value=rmse(preds, truth),
                )
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows, stability_summary(rows)


def stability_summary(rows: Sequence[MetricRow]) -> dict:
    """Across-cell RMSE spread per method (std over fractions and seeds)."""
    per_method: dict[str, dict] = {}
    for method in STABILITY_METHODS:
        vals = np.array([r.value for r in rows if r.method == method and r.metric == "test_rmse"])
        if vals.size == 0:
            continue
        per_method[method] = {
            "test_rmse_mean": float(vals.mean()),
            "test_rmse_std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "cells": int(vals.size),
        }
    summary = {"per_method": per_method}
    if "latent-bin" in per_method and "size-uniform" in per_method:
        summary["latent_at_most_random_std"] = bool(
            per_method["latent-bin"]["test_rmse_std"]
            <= per_method["size-uniform"]["test_rmse_std"]
        )
    return summary
