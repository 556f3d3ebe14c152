"""Graph encoder: bidirectional message passing plus gated aggregation.

Per round, every node sums a linear transform of [own, neighbor] embeddings
over incoming edges, a reverse-message clone does the same over outgoing
edges, and a GRU cell updates the node state from the summed messages.  Each
round owns its parameters.  After the last round a gated linear layer sums
node embeddings into a single graph embedding; a structurally identical
second head produces the log-variance when variational output is requested.

Batches of graphs are processed as one disjoint union ("packed" form) with
scatter-adds over global node indices, which keeps training fast without
changing any single-graph semantics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .graphs import TYPE_TO_INDEX, NUM_NODE_TYPES, CellGraph
from .primitives import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    GruParams,
    LinearParams,
    ParamStore,
    gru_cell,
    gru_params,
    linear_params,
    lookup_params,
    sigmoid,
)


@dataclass(frozen=True)
class EncoderConfig:
    d_n: int = 250
    d_g: int = 56
    rounds: int = 2
    variational: bool = True

    def __post_init__(self) -> None:
        if self.d_n < 1 or self.d_g < 1 or self.rounds < 1:
            raise ValueError("dimensions and round count must be positive")


@dataclass
class RoundParams:
    message: LinearParams  # [2*d_n -> 2*d_n], input [h_v, h_u] over incoming edges
    reverse_message: LinearParams  # same shape, over outgoing edges
    update: GruParams  # GRU with input 2*d_n, hidden d_n


@dataclass
class AggregationParams:
    transform: LinearParams  # d_n -> d_g
    gate: LinearParams  # d_n -> 1


@dataclass
class PropagationParams:
    """Rounds plus a mean-only aggregation head (the decoder reuses this)."""

    rounds: tuple[RoundParams, ...]
    agg: AggregationParams


@dataclass
class EncoderParams:
    lookup: torch.Tensor  # [5, d_n]
    rounds: tuple[RoundParams, ...]
    agg: AggregationParams
    var_agg: AggregationParams | None  # present iff variational


@dataclass
class GraphEmbedding:
    mean: torch.Tensor  # [d_g]
    logvar: torch.Tensor | None  # [d_g], present iff variational


def round_params_set(
    store: ParamStore, name: str, d_n: int, rounds: int, rng: np.random.Generator | None
) -> tuple[RoundParams, ...]:
    return tuple(
        RoundParams(
            message=linear_params(store, f"{name}.r{t}.msg", 2 * d_n, 2 * d_n, rng),
            reverse_message=linear_params(store, f"{name}.r{t}.rmsg", 2 * d_n, 2 * d_n, rng),
            update=gru_params(store, f"{name}.r{t}.gru", 2 * d_n, d_n, rng),
        )
        for t in range(rounds)
    )


def aggregation_params(
    store: ParamStore, name: str, d_n: int, d_g: int, rng: np.random.Generator | None
) -> AggregationParams:
    return AggregationParams(
        transform=linear_params(store, f"{name}.lin", d_n, d_g, rng),
        gate=linear_params(store, f"{name}.gate", d_n, 1, rng),
    )


def build_encoder_params(
    store: ParamStore,
    cfg: EncoderConfig,
    rng: np.random.Generator | None,
    prefix: str = "encoder",
) -> EncoderParams:
    """Create (rng given) or bind (rng=None) the encoder parameter set."""
    return EncoderParams(
        lookup=lookup_params(store, f"{prefix}.lookup", NUM_NODE_TYPES, cfg.d_n, rng),
        rounds=round_params_set(store, prefix, cfg.d_n, cfg.rounds, rng),
        agg=aggregation_params(store, f"{prefix}.agg", cfg.d_n, cfg.d_g, rng),
        var_agg=(
            aggregation_params(store, f"{prefix}.vagg", cfg.d_n, cfg.d_g, rng)
            if cfg.variational
            else None
        ),
    )


# ---------------------------------------------------------------------------
# packed (disjoint-union) graph form


@dataclass(frozen=True)
class PreparedGraph:
    """Index arrays of one graph, precomputed for fast batching."""

    n: int
    label_idx: np.ndarray  # int64 [n]
    edges: np.ndarray  # int64 [e, 2], sorted by (target, source)
    prefix_edge_counts: np.ndarray  # int64 [n+1]; entry t = edges with target < t
    adjacency: np.ndarray  # float64 [n, n]


def prepare_graph(g: CellGraph) -> PreparedGraph:
    labels = np.array([TYPE_TO_INDEX[t] for t in g.labels], dtype=np.int64)
    edges = np.array(sorted(g.edges, key=lambda e: (e[1], e[0])), dtype=np.int64).reshape(-1, 2)
    # edges are sorted by target, so prefix counts come from a searchsorted
    counts = np.searchsorted(edges[:, 1], np.arange(g.n + 1), side="left").astype(np.int64)
    adj = np.zeros((g.n, g.n), dtype=np.float64)
    for u, v in g.edges:
        adj[u, v] = 1.0
    return PreparedGraph(g.n, labels, edges, counts, adj)


@dataclass
class PackedGraphs:
    num_graphs: int
    total_nodes: int
    node_counts: np.ndarray  # int64 [G]
    node_offsets: np.ndarray  # int64 [G]
    node_graph: torch.Tensor  # int64 [N], graph id per node
    label_idx: torch.Tensor  # int64 [N]
    edge_src: torch.Tensor  # int64 [E], global indices
    edge_dst: torch.Tensor  # int64 [E]


def pack_prepared(prepared: Sequence[PreparedGraph]) -> PackedGraphs:
    counts = np.array([p.n for p in prepared], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    labels = np.concatenate([p.label_idx for p in prepared])
    node_graph = np.repeat(np.arange(len(prepared), dtype=np.int64), counts)
    if any(len(p.edges) for p in prepared):
        edges = np.concatenate([p.edges + off for p, off in zip(prepared, offsets)])
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    return PackedGraphs(
        num_graphs=len(prepared),
        total_nodes=int(counts.sum()),
        node_counts=counts,
        node_offsets=offsets,
        node_graph=torch.from_numpy(node_graph),
        label_idx=torch.from_numpy(labels),
        edge_src=torch.from_numpy(np.ascontiguousarray(edges[:, 0])),
        edge_dst=torch.from_numpy(np.ascontiguousarray(edges[:, 1])),
    )


def pack_graphs(graphs: Sequence[CellGraph]) -> PackedGraphs:
    return pack_prepared([prepare_graph(g) for g in graphs])


def propagate_packed(
    h: torch.Tensor,
    edge_src: torch.Tensor,
    edge_dst: torch.Tensor,
    params: RoundParams,
) -> torch.Tensor:
    """One bidirectional message-passing round over packed node embeddings."""
    n, d_n = h.shape
    if edge_src.numel() == 0:
        summed = h.new_zeros((n, 2 * d_n))
    else:
        h_src = h[edge_src]
        h_dst = h[edge_dst]
        fwd = params.message(torch.cat([h_dst, h_src], dim=-1))
        rev = params.reverse_message(torch.cat([h_src, h_dst], dim=-1))
        summed = h.new_zeros((n, 2 * d_n)).index_add(0, edge_dst, fwd)
        summed = summed.index_add(0, edge_src, rev)
    return gru_cell(summed, h, params.update)


def aggregate_packed(
    h: torch.Tensor,
    node_graph: torch.Tensor,
    num_graphs: int,
    agg: AggregationParams,
) -> torch.Tensor:
    """Gated sum of node embeddings into per-graph embeddings [G, d_g]."""
    vals = agg.transform(h) * sigmoid(agg.gate(h))
    out = vals.new_zeros((num_graphs, vals.shape[-1]))
    return out.index_add(0, node_graph, vals)


def encode_packed(
    packed: PackedGraphs, params: EncoderParams, cfg: EncoderConfig
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Encode a packed batch; returns (mean [G, d_g], logvar [G, d_g] or None)."""
    h = params.lookup[packed.label_idx]
    for rp in params.rounds:
        h = propagate_packed(h, packed.edge_src, packed.edge_dst, rp)
    mean = aggregate_packed(h, packed.node_graph, packed.num_graphs, params.agg)
    logvar = None
    if cfg.variational:
        if params.var_agg is None:
            raise ValueError("variational config requires the second aggregation head")
        raw = aggregate_packed(h, packed.node_graph, packed.num_graphs, params.var_agg)
        logvar = torch.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)
    return mean, logvar


def encode_batch(
    graphs: Sequence[CellGraph], params: EncoderParams, cfg: EncoderConfig
) -> tuple[torch.Tensor, torch.Tensor | None]:
    return encode_packed(pack_graphs(graphs), params, cfg)


# ---------------------------------------------------------------------------
# single-graph surface


def init_embeddings(g: CellGraph, lookup: torch.Tensor) -> torch.Tensor:
    """Initial node embeddings: row v is the lookup row of label v."""
    idx = torch.tensor([TYPE_TO_INDEX[t] for t in g.labels], dtype=torch.int64)
    return lookup[idx]


def propagate_round(h: torch.Tensor, g: CellGraph, params: RoundParams) -> torch.Tensor:
    if h.shape[0] != g.n:
        raise ValueError(f"embedding rows ({h.shape[0]}) must match node count ({g.n})")
    edges = np.array(sorted(g.edges), dtype=np.int64).reshape(-1, 2)
    return propagate_packed(
        h,
        torch.from_numpy(np.ascontiguousarray(edges[:, 0])),
        torch.from_numpy(np.ascontiguousarray(edges[:, 1])),
        params,
    )


def aggregate(
    h: torch.Tensor,
    agg: AggregationParams,
    var_agg: AggregationParams | None = None,
) -> GraphEmbedding:
    node_graph = torch.zeros(h.shape[0], dtype=torch.int64)
    mean = aggregate_packed(h, node_graph, 1, agg)[0]
    logvar = None
    if var_agg is not None:
        logvar = torch.clamp(
            aggregate_packed(h, node_graph, 1, var_agg)[0], LOGVAR_MIN, LOGVAR_MAX
        )
    return GraphEmbedding(mean=mean, logvar=logvar)


def encode(g: CellGraph, params: EncoderParams, cfg: EncoderConfig) -> GraphEmbedding:
    """Full pipeline on one graph: lookup, T rounds, gated aggregation."""
    mean, logvar = encode_batch([g], params, cfg)
    return GraphEmbedding(mean=mean[0], logvar=None if logvar is None else logvar[0])
