"""Variational-sequential graph autoencoder over cell-graph search spaces.

Submodules: ``graphs`` (DAG data model, validity, edit distance),
``data`` (datasets, splits, synthetic labels), ``primitives``
(differentiable core, Adam, gradient checking), ``encoder`` (message-passing
graph encoder), ``decoder`` (sequential generation and training),
``predictor`` (accuracy regression, zero-shot), ``sampling`` (down-sampling
strategies, PCA, latent binning), ``evaluation`` (reconstruction, prior
validity, stability experiment) and ``cli``.
"""

from .graphs import (
    CellGraph,
    NodeType,
    SearchSpaceLimits,
    ValidityReport,
    edit_distance,
    enumerate_valid,
    graph_hash,
    longest_path,
    validate,
)
from .data import ArchRecord, Dataset, SplitSpec, make_dataset, split, synth_accuracy
from .encoder import EncoderConfig, GraphEmbedding, encode
from .decoder import TrainConfig, VsgaeModel, train_vsgae, vsgae_loss
from .predictor import PredTrainConfig, ZeroShotSpec, rmse, train_joint, zero_shot
from .sampling import (
    PcaModel,
    SampleResult,
    fit_pca,
    latent_bin_sample,
    sample_edit_uniform,
    sample_uniform_per_size,
)
from .evaluation import eval_prior_validity, eval_reconstruction, run_sampling_stability

__all__ = [
    "ArchRecord",
    "CellGraph",
    "Dataset",
    "EncoderConfig",
    "GraphEmbedding",
    "NodeType",
    "PcaModel",
    "PredTrainConfig",
    "SampleResult",
    "SearchSpaceLimits",
    "SplitSpec",
    "TrainConfig",
    "ValidityReport",
    "VsgaeModel",
    "ZeroShotSpec",
    "edit_distance",
    "encode",
    "enumerate_valid",
    "eval_prior_validity",
    "eval_reconstruction",
    "fit_pca",
    "graph_hash",
    "latent_bin_sample",
    "longest_path",
    "make_dataset",
    "rmse",
    "run_sampling_stability",
    "sample_edit_uniform",
    "sample_uniform_per_size",
    "split",
    "synth_accuracy",
    "train_joint",
    "train_vsgae",
    "validate",
    "vsgae_loss",
    "zero_shot",
]

__version__ = "0.1.0"
