"""Accuracy prediction from graph embeddings.

A four-layer MLP (hidden sizes 28, 14, 7, ReLU activations, linear scalar
output) reads the mean graph embedding of a non-variational encoder; both
are trained jointly end to end on mean squared error, with RMSE as the
reported metric.  Zero-shot evaluation holds out one node-count class
entirely and validates on the training sizes only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .data import DataSplit, Dataset
from .encoder import (
    EncoderConfig,
    EncoderParams,
    build_encoder_params,
    encode_packed,
    pack_prepared,
    prepare_graph,
)
from .graphs import CellGraph
from .primitives import (
    DTYPE,
    MlpParams,
    OptimConfig,
    ParamStore,
    adam_step,
    load_checkpoint,
    mlp,
    mlp_params,
    save_checkpoint,
)

HIDDEN_SIZES = (28, 14, 7)


def build_predictor_params(
    store: ParamStore,
    d_g: int,
    rng: np.random.Generator | None,
    prefix: str = "predictor",
) -> MlpParams:
    return mlp_params(store, prefix, (d_g, *HIDDEN_SIZES, 1), rng)


def predict(h_g: torch.Tensor, params: MlpParams) -> torch.Tensor:
    """Scalar regression output; intentionally not clamped to [0, 1]."""
    out = mlp(h_g, params)
    return out.squeeze(-1)


def rmse(preds: Sequence[float] | np.ndarray, truth: Sequence[float] | np.ndarray) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(f"need two equal-length non-empty vectors, got {p.shape} and {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass(frozen=True)
class PredTrainConfig:
    lr: float = 1e-5
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.lr, self.epochs, self.batch_size) <= 0:
            raise ValueError("training config values must be positive")


@dataclass(frozen=True)
class PredEpochStats:
    epoch: int
    train_rmse: float
    val_rmse: float


METRICS_HEADER = ("epoch", "train_rmse", "val_rmse")


@dataclass
class PredictorModel:
    store: ParamStore
    enc_cfg: EncoderConfig
    encoder: EncoderParams
    predictor: MlpParams

    def predict_graphs(self, graphs: Sequence[CellGraph]) -> np.ndarray:
        with torch.no_grad():
            mu, _ = encode_packed(
                pack_prepared([prepare_graph(g) for g in graphs]), self.encoder, self.enc_cfg
            )
            return predict(mu, self.predictor).numpy()

    def save(self, path, extra: dict | None = None) -> None:
        manifest = {"kind": "predictor", "encoder_config": asdict(self.enc_cfg)}
        manifest.update(extra or {})
        save_checkpoint(self.store, path, manifest)

    @classmethod
    def load(cls, path) -> tuple["PredictorModel", dict]:
        store, extra = load_checkpoint(path)
        if extra.get("kind") != "predictor":
            raise ValueError(f"{path}: not a predictor checkpoint")
        enc_cfg = EncoderConfig(**extra["encoder_config"])
        encoder = build_encoder_params(store, enc_cfg, rng=None)
        predictor = build_predictor_params(store, enc_cfg.d_g, rng=None)
        return cls(store, enc_cfg, encoder, predictor), extra


@dataclass
class JointTrainResult:
    model: PredictorModel  # parameters restored to the best-validation epoch
    log: list[PredEpochStats]
    best_epoch: int
    best_val_rmse: float


def train_joint(
    ds: Dataset,
    split: DataSplit,
    cfg: PredTrainConfig,
    enc_cfg: EncoderConfig,
    progress: Callable[[PredEpochStats], None] | None = None,
) -> JointTrainResult:
    """Jointly train encoder and predictor on MSE over the training split.

    The checkpoint with the best validation RMSE is retained and restored
    into the returned model.  train_rmse is accumulated over the epoch's
    mini-batches; val_rmse is measured after each epoch.
    """
    if not split.train or not split.validation:
        raise ValueError("joint training needs non-empty train and validation parts")
    enc_cfg = replace(enc_cfg, variational=False)
    root = np.random.SeedSequence(cfg.seed)
    init_rng, train_rng = (np.random.default_rng(s) for s in root.spawn(2))
    store = ParamStore()
    encoder = build_encoder_params(store, enc_cfg, init_rng)
    predictor = build_predictor_params(store, enc_cfg.d_g, init_rng)
    opt = OptimConfig(lr=cfg.lr)

    prepared = [prepare_graph(r.graph) for r in ds.records]
    labels = ds.accuracies()
    val_prep = [prepared[i] for i in split.validation]
    val_truth = labels[list(split.validation)]

    def predictions(prep) -> np.ndarray:
        with torch.no_grad():
            mu, _ = encode_packed(pack_prepared(prep), encoder, enc_cfg)
            return predict(mu, predictor).numpy()

    best_val = math.inf
    best_epoch = -1
    best_values: dict[str, torch.Tensor] = store.clone_values()
    log: list[PredEpochStats] = []
    train_idx = list(split.train)
    for epoch in range(cfg.epochs):
        order = train_rng.permutation(len(train_idx))
        sse = 0.0
        for start in range(0, len(train_idx), cfg.batch_size):
            batch = [train_idx[i] for i in order[start : start + cfg.batch_size]]
            mu, _ = encode_packed(pack_prepared([prepared[i] for i in batch]), encoder, enc_cfg)
            preds = predict(mu, predictor)
            truth = torch.as_tensor(labels[batch], dtype=DTYPE)
            errs = preds - truth
            loss = (errs * errs).mean()
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            loss.backward()
            store.fill_missing_grads()
            adam_step(store, opt)
            sse += float((errs.detach() ** 2).sum())
        train_rmse = math.sqrt(sse / len(train_idx))
        val_rmse = rmse(predictions(val_prep), val_truth)
        stats = PredEpochStats(epoch=epoch, train_rmse=train_rmse, val_rmse=val_rmse)
        log.append(stats)
        if progress is not None:
            progress(stats)
        if val_rmse < best_val:
            best_val = val_rmse
            best_epoch = epoch
            best_values = store.clone_values()
    store.load_values(best_values)
    model = PredictorModel(store, enc_cfg, encoder, predictor)
    return JointTrainResult(model=model, log=log, best_epoch=best_epoch, best_val_rmse=best_val)


@dataclass(frozen=True)
class ZeroShotSpec:
    holdout_n: int
    val_fraction: float = 0.1  # validation drawn from the training sizes


@dataclass
class ZeroShotResult:
    test_rmse: float
    result: JointTrainResult
    split: DataSplit


def zero_shot(
    ds: Dataset, spec: ZeroShotSpec, cfg: PredTrainConfig, enc_cfg: EncoderConfig
) -> ZeroShotResult:
    """Train on every node-count class except one, test on the held-out one."""
    holdout = [i for i, r in enumerate(ds.records) if r.graph.n == spec.holdout_n]
    rest = [i for i, r in enumerate(ds.records) if r.graph.n != spec.holdout_n]
    if not holdout:
        raise ValueError(f"no graphs of size {spec.holdout_n} in the dataset")
    if not rest:
        raise ValueError("holdout covers the entire dataset")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(rest))
    n_val = max(1, round(spec.val_fraction * len(rest)))
    if n_val >= len(rest):
        raise ValueError("not enough non-holdout records to form a training set")
    val = sorted(rest[i] for i in order[:n_val])
    train = sorted(rest[i] for i in order[n_val:])
    split = DataSplit(train=tuple(train), test=tuple(holdout), validation=tuple(val))
    result = train_joint(ds, split, cfg, enc_cfg)
    preds = result.model.predict_graphs([ds.records[i].graph for i in holdout])
    truth = ds.accuracies()[holdout]
    return ZeroShotResult(test_rmse=rmse(preds, truth), result=result, split=split)
