import numpy as np
import pytest
import torch

from vsgae.decoder import build_decoder_params
from vsgae.encoder import EncoderConfig, build_encoder_params
from vsgae.graphs import CellGraph, NodeType
from vsgae.primitives import ParamStore

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg() -> EncoderConfig:
    return EncoderConfig(d_n=4, d_g=3, rounds=2, variational=True)


def make_models(cfg: EncoderConfig, seed: int = 0):
    """Fresh (store, encoder params, decoder params) for a config."""
    store = ParamStore()
    rng = np.random.default_rng(seed)
    enc = build_encoder_params(store, cfg, rng)
    dec = build_decoder_params(store, cfg, rng)
    return store, enc, dec


def zero_params(store: ParamStore) -> None:
    with torch.no_grad():
        for _, p in store.items():
            p.zero_()


def nudge_params(store: ParamStore, scale: float = 0.05, seed: int = 0) -> None:
    """Replace parameters with small random values, off any ReLU kinks."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for _, p in store.items():
            p.copy_(torch.as_tensor(scale * rng.standard_normal(tuple(p.shape))))


G2 = CellGraph(2, [NodeType.INPUT, NodeType.OUTPUT], [(0, 1)])
G3_CHAIN = CellGraph(3, [NodeType.INPUT, NodeType.CONV3X3, NodeType.OUTPUT], [(0, 1), (1, 2)])
G3_SKIP = CellGraph(
    3, [NodeType.INPUT, NodeType.CONV3X3, NodeType.OUTPUT], [(0, 1), (1, 2), (0, 2)]
)
G4 = CellGraph(
    4,
    [NodeType.INPUT, NodeType.CONV3X3, NodeType.MAXPOOL3X3, NodeType.OUTPUT],
    [(0, 1), (0, 2), (1, 3), (2, 3)],
)
G5 = CellGraph(
    5,
    [NodeType.INPUT, NodeType.CONV1X1, NodeType.CONV3X3, NodeType.MAXPOOL3X3, NodeType.OUTPUT],
    [(0, 1), (0, 2), (1, 3), (2, 3), (2, 4), (3, 4)],
)
