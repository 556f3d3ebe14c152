"""Sequential graph decoder and the joint autoencoder training loop.

Generation starts from a forced input node and repeats four stages until an
output node appears (or a node cap is hit): propagate the partial graph and
summarize it (GraphProp), pick the next node type from the latent point and
the summary (AddNode), embed the new node (InitNode), then score and sample
the edges from every existing node toward the new one (AddEdges).  Training
replaces sampled choices with ground truth (teacher forcing) and accumulates
a node-type cross-entropy and a per-edge binary cross-entropy, both in logit
space; the variational objective adds an alpha-weighted KL term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace, asdict
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Dataset
from .graphs import (
    NODE_TYPE_ORDER,
    NUM_NODE_TYPES,
    TYPE_TO_INDEX,
    CellGraph,
    NodeType,
    validate,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    PreparedGraph,
    PropagationParams,
    aggregation_params,
    aggregate_packed,
    build_encoder_params,
    encode_packed,
    pack_prepared,
    prepare_graph,
    propagate_packed,
    round_params_set,
)
from .primitives import (
    DTYPE,
    MlpParams,
    OptimConfig,
    ParamStore,
    PlateauSchedule,
    adam_step,
    binary_cross_entropy_logits,
    cross_entropy_logits,
    kl_divergence,
    load_checkpoint,
    lookup_params,
    mlp,
    mlp_params,
    reparameterize_with_eps,
    save_checkpoint,
)

_INPUT_IDX = TYPE_TO_INDEX[NodeType.INPUT]


@dataclass
class DecoderParams:
    """All decoder modules, with the exact hidden sizes of the model.

    The lookup table is independent of the encoder's; GraphProp is a full
    copy of the encoder's propagation/aggregation stack with its own weights
    and no variance head.
    """

    lookup: torch.Tensor  # [5, d_n]
    prop: PropagationParams
    add_node: MlpParams  # 2*d_g -> d_g -> 5
    init_node: MlpParams  # 2*d_g + d_n -> d_g + d_n -> d_n
    start_node: MlpParams  # d_g + d_n -> d_g + d_n -> d_n
    add_edges: MlpParams  # 2*d_g + 2*d_n -> d_g + d_n -> 1


def build_decoder_params(
    store: ParamStore,
    cfg: EncoderConfig,
    rng: np.random.Generator | None,
    prefix: str = "decoder",
) -> DecoderParams:
    d_n, d_g = cfg.d_n, cfg.d_g
    return DecoderParams(
        lookup=lookup_params(store, f"{prefix}.lookup", NUM_NODE_TYPES, d_n, rng),
        prop=PropagationParams(
            rounds=round_params_set(store, f"{prefix}.prop", d_n, cfg.rounds, rng),
            agg=aggregation_params(store, f"{prefix}.prop.agg", d_n, d_g, rng),
        ),
        add_node=mlp_params(store, f"{prefix}.add_node", (2 * d_g, d_g, NUM_NODE_TYPES), rng),
        init_node=mlp_params(store, f"{prefix}.init_node", (2 * d_g + d_n, d_g + d_n, d_n), rng),
        start_node=mlp_params(store, f"{prefix}.start_node", (d_g + d_n, d_g + d_n, d_n), rng),
        add_edges=mlp_params(store, f"{prefix}.add_edges", (2 * d_g + 2 * d_n, d_g + d_n, 1), rng),
    )


# ---------------------------------------------------------------------------
# decoder modules (single-graph surface; the batched paths below vectorize
# the exact same computations)


def graph_prop(
    h: torch.Tensor,
    g_partial: CellGraph | Sequence[tuple[int, int]],
    params: PropagationParams,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Propagate the partial graph's embeddings and summarize them.

    Returns (graph summary [d_g], propagated node embeddings [t, d_n]).
    ``g_partial`` is a graph or a bare edge list; the latter also covers the
    one-node partial graph at the very first iteration.
    """
    if isinstance(g_partial, CellGraph):
        if h.shape[0] != g_partial.n:
            raise ValueError(
                f"embedding rows ({h.shape[0]}) must match node count ({g_partial.n})"
            )
        edge_list = sorted(g_partial.edges)
    else:
        edge_list = sorted(tuple(e) for e in g_partial)
        if any(not 0 <= u < v < h.shape[0] for u, v in edge_list):
            raise ValueError("partial-graph edges must be upper triangular within range")
    edges = np.array(edge_list, dtype=np.int64).reshape(-1, 2)
    src = torch.from_numpy(np.ascontiguousarray(edges[:, 0]))
    dst = torch.from_numpy(np.ascontiguousarray(edges[:, 1]))
    for rp in params.rounds:
        h = propagate_packed(h, src, dst, rp)
    node_graph = torch.zeros(h.shape[0], dtype=torch.int64)
    summary = aggregate_packed(h, node_graph, 1, params.agg)[0]
    return summary, h


def add_node(z: torch.Tensor, h_gt: torch.Tensor, params: MlpParams) -> torch.Tensor:
    """Raw logits over the five node types for the next node."""
    return mlp(torch.cat([z, h_gt], dim=-1), params)


def init_node(
    z: torch.Tensor,
    h_gt: torch.Tensor,
    node_type: NodeType,
    params: MlpParams,
    lookup: torch.Tensor,
) -> torch.Tensor:
    """Embedding of a just-created node of the given type."""
    row = lookup[TYPE_TO_INDEX[node_type]]
    return mlp(torch.cat([z, h_gt, row], dim=-1), params)


def start_node(z: torch.Tensor, params: MlpParams, lookup: torch.Tensor) -> torch.Tensor:
    """Embedding of the forced first (input) node; no partial-graph summary
    exists yet, so only the latent point and the lookup row feed in."""
    row = lookup[_INPUT_IDX]
    return mlp(torch.cat([z, row], dim=-1), params)


def add_edges(
    h_new: torch.Tensor,
    h_prop: torch.Tensor,
    z: torch.Tensor,
    h_gt: torch.Tensor,
    params: MlpParams,
) -> torch.Tensor:
    """Edge scores from every existing node toward the new node, shape [t]."""
    t = h_prop.shape[0]
    if t == 0:
        raise ValueError("add_edges needs at least one previous node")
    stacked = torch.cat(
        [
            h_new.unsqueeze(0).expand(t, -1),
            h_prop,
            z.unsqueeze(0).expand(t, -1),
            h_gt.unsqueeze(0).expand(t, -1),
        ],
        dim=-1,
    )
    return mlp(stacked, params).squeeze(-1)


# ---------------------------------------------------------------------------
# free generation


@dataclass(frozen=True)
class GenerationStep:
    node_logits: np.ndarray  # raw logits over the five types
    node_type: NodeType
    edge_scores: np.ndarray  # one score per previous node
    edges_added: tuple[int, ...]  # sources of the sampled edges


@dataclass(frozen=True)
class GenerationTrace:
    steps: tuple[GenerationStep, ...]

    def __len__(self) -> int:
        return len(self.steps)


def decode_batch(
    latents: torch.Tensor | np.ndarray,
    params: DecoderParams,
    rng: np.random.Generator | None,
    max_gen_nodes: int = 7,
    with_traces: bool = False,
    greedy: bool = False,
) -> list[tuple[CellGraph, GenerationTrace | None]]:
    """Decode a batch of latent points into graphs.

    All decodes advance in lockstep (each active decode has t nodes at step
    t); finished decodes drop out of the batch.  Node types are sampled from
    the softmax over logits with the input class masked out; edges are
    Bernoulli draws on the sigmoid of the scores.  A decode ends right after
    the step that adds an output node, or unfinished at ``max_gen_nodes``.

    ``greedy`` switches to deterministic argmax types and probability-above-
    half edges (a debugging mode; the evaluation protocols always sample).
    """
    if rng is None and not greedy:
        raise ValueError("sampling decode needs a generator")
    z_all = torch.as_tensor(latents, dtype=DTYPE)
    if z_all.dim() == 1:
        z_all = z_all.unsqueeze(0)
    if not torch.isfinite(z_all).all():
        raise ValueError("latent points must be finite")
    if max_gen_nodes < 2:
        raise ValueError("max_gen_nodes must be at least 2")
    batch = z_all.shape[0]
    labels: list[list[NodeType]] = [[NodeType.INPUT] for _ in range(batch)]
    edges: list[list[tuple[int, int]]] = [[] for _ in range(batch)]
    traces: list[list[GenerationStep]] = [[] for _ in range(batch)]

    with torch.no_grad():
        active = list(range(batch))
        input_row = params.lookup[_INPUT_IDX]
        h = mlp(torch.cat([z_all, input_row.expand(batch, -1)], dim=-1), params.start_node)
        h = h.unsqueeze(1)  # [A, t, d_n]
        t = 1
        while active:
            a = len(active)
            z = z_all[active]
            flat = h.reshape(a * t, -1)
            edge_arrays = [
                np.asarray(edges[i], dtype=np.int64).reshape(-1, 2) + j * t
                for j, i in enumerate(active)
            ]
            packed_edges = np.concatenate(edge_arrays) if edge_arrays else np.zeros((0, 2), np.int64)
            src = torch.from_numpy(np.ascontiguousarray(packed_edges[:, 0]))
            dst = torch.from_numpy(np.ascontiguousarray(packed_edges[:, 1]))
            for rp in params.prop.rounds:
                flat = propagate_packed(flat, src, dst, rp)
            node_graph = torch.arange(a, dtype=torch.int64).repeat_interleave(t)
            h_gt = aggregate_packed(flat, node_graph, a, params.prop.agg)
            h_prop = flat.reshape(a, t, -1)

            logits = mlp(torch.cat([z, h_gt], dim=-1), params.add_node)
            masked = logits.clone()
            masked[:, _INPUT_IDX] = float("-inf")
            if greedy:
                type_idx = masked.argmax(dim=-1).numpy()
            else:
                shifted = masked - masked.max(dim=-1, keepdim=True).values
                probs = (shifted.exp() / shifted.exp().sum(dim=-1, keepdim=True)).numpy()
                draws = rng.random(a)
                type_idx = (probs.cumsum(axis=1) < draws[:, None]).sum(axis=1)
                type_idx = np.minimum(type_idx, NUM_NODE_TYPES - 1)

            rows = params.lookup[torch.from_numpy(type_idx)]
            h_new = mlp(torch.cat([z, h_gt, rows], dim=-1), params.init_node)
            scores = mlp(
                torch.cat(
                    [
                        h_new.unsqueeze(1).expand(a, t, -1),
                        h_prop,
                        z.unsqueeze(1).expand(a, t, -1),
                        h_gt.unsqueeze(1).expand(a, t, -1),
                    ],
                    dim=-1,
                ),
                params.add_edges,
            ).squeeze(-1)
            edge_probs = torch.sigmoid(scores).numpy().reshape(a, t)
            if greedy:
                edge_draws = edge_probs > 0.5
            else:
                edge_draws = rng.random((a, t)) < edge_probs

            for j, i in enumerate(active):
                node_type = NODE_TYPE_ORDER[int(type_idx[j])]
                labels[i].append(node_type)
                added = tuple(int(u) for u in np.nonzero(edge_draws[j])[0])
                edges[i].extend((u, t) for u in added)
                if with_traces:
                    traces[i].append(
                        GenerationStep(
                            node_logits=logits[j].numpy().copy(),
                            node_type=node_type,
                            edge_scores=scores[j].numpy().copy().reshape(t),
                            edges_added=added,
                        )
                    )
            # keep decodes that neither emitted the output node nor hit the cap
            still = [
                (j, i)
                for j, i in enumerate(active)
                if labels[i][-1] is not NodeType.OUTPUT and t + 1 < max_gen_nodes
            ]
            if still:
                keep_rows = torch.tensor([j for j, _ in still], dtype=torch.int64)
                h = torch.cat([h_prop[keep_rows], h_new[keep_rows].unsqueeze(1)], dim=1)
                active = [i for _, i in still]
                t += 1
            else:
                active = []

    out: list[tuple[CellGraph, GenerationTrace | None]] = []
    for i in range(batch):
        g = CellGraph(len(labels[i]), labels[i], edges[i])
        out.append((g, GenerationTrace(tuple(traces[i])) if with_traces else None))
    return out


def decode(
    z: torch.Tensor | np.ndarray,
    params: DecoderParams,
    rng: np.random.Generator,
    max_gen_nodes: int = 7,
) -> tuple[CellGraph, GenerationTrace]:
    """Decode one latent point; reproducible given the generator state."""
    (g, trace), = decode_batch(z, params, rng, max_gen_nodes, with_traces=True)
    assert trace is not None
    return g, trace


# ---------------------------------------------------------------------------
# teacher-forced losses


def teacher_forced_loss_batch(
    graphs: Sequence[CellGraph],
    latents: torch.Tensor,
    params: DecoderParams,
    prepared: Sequence[PreparedGraph] | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced reconstruction losses for same-size graphs.

    Returns per-graph (node loss, edge loss), each summed over the graph's
    iterations.  All graphs in the batch must have the same node count so
    the iterations align; the trainer groups its batches accordingly.
    Callers passing ``prepared`` vouch for graph validity (the trainer
    validates its dataset once up front).
    """
    if prepared is None:
        prepared = [prepare_graph(g) for g in graphs]
        for g in graphs:
            if not validate(g).valid:
                raise ValueError("teacher forcing needs valid canonical graphs")
    n = prepared[0].n
    if any(p.n != n for p in prepared):
        raise ValueError("all graphs in a teacher-forcing batch must share one size")
    b = len(prepared)
    z = torch.as_tensor(latents, dtype=DTYPE)
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if z.shape[0] != b:
        raise ValueError(f"got {z.shape[0]} latents for {b} graphs")

    label_idx = torch.from_numpy(np.stack([p.label_idx for p in prepared]))  # [b, n]
    adjacency = torch.from_numpy(np.stack([p.adjacency for p in prepared]))  # [b, n, n]

    input_row = params.lookup[_INPUT_IDX]
    h = mlp(torch.cat([z, input_row.expand(b, -1)], dim=-1), params.start_node).unsqueeze(1)
    node_loss = z.new_zeros(b)
    edge_loss = z.new_zeros(b)
    for t in range(1, n):
        flat = h.reshape(b * t, -1)
        edge_arrays = [
            p.edges[: p.prefix_edge_counts[t]] + j * t for j, p in enumerate(prepared)
        ]
        packed_edges = np.concatenate(edge_arrays)
        src = torch.from_numpy(np.ascontiguousarray(packed_edges[:, 0]))
        dst = torch.from_numpy(np.ascontiguousarray(packed_edges[:, 1]))
        for rp in params.prop.rounds:
            flat = propagate_packed(flat, src, dst, rp)
        node_graph = torch.arange(b, dtype=torch.int64).repeat_interleave(t)
        h_gt = aggregate_packed(flat, node_graph, b, params.prop.agg)
        h_prop = flat.reshape(b, t, -1)

        logits = mlp(torch.cat([z, h_gt], dim=-1), params.add_node)
        node_loss = node_loss + cross_entropy_logits(logits, label_idx[:, t])

        rows = params.lookup[label_idx[:, t]]
        h_new = mlp(torch.cat([z, h_gt, rows], dim=-1), params.init_node)
        scores = mlp(
            torch.cat(
                [
                    h_new.unsqueeze(1).expand(b, t, -1),
                    h_prop,
                    z.unsqueeze(1).expand(b, t, -1),
                    h_gt.unsqueeze(1).expand(b, t, -1),
                ],
                dim=-1,
            ),
            params.add_edges,
        ).squeeze(-1)
        targets = adjacency[:, :t, t]
        edge_loss = edge_loss + binary_cross_entropy_logits(scores, targets).sum(dim=-1)

        h = torch.cat([h_prop, h_new.unsqueeze(1)], dim=1)
    return node_loss, edge_loss


def teacher_forced_loss(
    g: CellGraph, z: torch.Tensor, params: DecoderParams
) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced (node, edge) loss of a single graph, summed over its
    generation iterations."""
    node_loss, edge_loss = teacher_forced_loss_batch([g], z, params)
    return node_loss[0], edge_loss[0]


@dataclass
class LossBreakdown:
    node_loss: torch.Tensor
    edge_loss: torch.Tensor
    kl: torch.Tensor
    alpha: float

    @property
    def reconstruction(self) -> torch.Tensor:
        return self.node_loss + self.edge_loss

    @property
    def total(self) -> torch.Tensor:
        return self.node_loss + self.edge_loss + self.alpha * self.kl


def vsgae_loss(
    g: CellGraph,
    encoder: EncoderParams,
    decoder: DecoderParams,
    enc_cfg: EncoderConfig,
    rng: np.random.Generator | None = None,
    alpha: float = 0.005,
    eps: torch.Tensor | None = None,
) -> LossBreakdown:
    """Full variational objective for one graph.

    The posterior noise comes from ``rng`` unless a fixed ``eps`` is given
    (as in gradient checks, where the noise must stay frozen).
    """
    if not enc_cfg.variational:
        raise ValueError("the autoencoder objective needs a variational encoder")
    mu, logvar = encode_packed(pack_prepared([prepare_graph(g)]), encoder, enc_cfg)
    assert logvar is not None
    if eps is None:
        if rng is None:
            raise ValueError("either rng or eps must be given")
        eps = torch.as_tensor(rng.standard_normal(mu.shape[-1]), dtype=DTYPE)
    z = reparameterize_with_eps(mu[0], logvar[0], eps)
    node_loss, edge_loss = teacher_forced_loss(g, z, decoder)
    kl = kl_divergence(mu[0], logvar[0])
    return LossBreakdown(node_loss=node_loss, edge_loss=edge_loss, kl=kl, alpha=alpha)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.005
    lr: float = 1e-4
    epochs: int = 300
    plateau_patience: int = 10
    plateau_decay: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.alpha, self.lr, self.epochs, self.batch_size) <= 0:
            raise ValueError("training config values must be positive")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    node_loss: float
    edge_loss: float
    kl: float
    total: float
    lr: float


LOSS_LOG_HEADER = ("epoch", "L_V", "L_E", "D_KL", "total", "lr")


@dataclass
class VsgaeModel:
    """Trained autoencoder bundle: parameters plus its encoder config."""

    store: ParamStore
    enc_cfg: EncoderConfig
    encoder: EncoderParams
    decoder: DecoderParams

    def encode_graphs(self, graphs: Sequence[CellGraph]) -> tuple[np.ndarray, np.ndarray]:
        """Posterior means and log-variances, detached, shape [G, d_g]."""
        with torch.no_grad():
            mu, logvar = encode_packed(
                pack_prepared([prepare_graph(g) for g in graphs]), self.encoder, self.enc_cfg
            )
        assert logvar is not None
        return mu.numpy(), logvar.numpy()

    def decode_latents(
        self, latents: np.ndarray | torch.Tensor, rng: np.random.Generator,
        max_gen_nodes: int = 7,
    ) -> list[CellGraph]:
        return [g for g, _ in decode_batch(latents, self.decoder, rng, max_gen_nodes)]

    def save(self, path, extra: dict | None = None) -> None:
        manifest = {"kind": "vsgae", "encoder_config": asdict(self.enc_cfg)}
        manifest.update(extra or {})
        save_checkpoint(self.store, path, manifest)

    @classmethod
    def load(cls, path) -> tuple["VsgaeModel", dict]:
        store, extra = load_checkpoint(path)
        if extra.get("kind") != "vsgae":
            raise ValueError(f"{path}: not an autoencoder checkpoint")
        enc_cfg = EncoderConfig(**extra["encoder_config"])
        encoder = build_encoder_params(store, enc_cfg, rng=None)
        decoder = build_decoder_params(store, enc_cfg, rng=None)
        return cls(store, enc_cfg, encoder, decoder), extra


def _bucketed_batches(
    order: np.ndarray, sizes: Sequence[int], batch_size: int, rng: np.random.Generator
) -> list[list[int]]:
    """Same-size mini-batches drawn from a shuffled order.

    Teacher forcing advances all graphs of a batch in lockstep, so batches
    are bucketed by node count; the batch sequence itself is reshuffled so
    sizes interleave across a training epoch.
    """
    by_size: dict[int, list[int]] = {}
    for i in order:
        by_size.setdefault(sizes[i], []).append(int(i))
    batches = [
        members[start : start + batch_size]
        for n, members in sorted(by_size.items())
        for start in range(0, len(members), batch_size)
    ]
    return [batches[i] for i in rng.permutation(len(batches))]


def train_vsgae(
    ds: Dataset,
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    progress: Callable[[EpochStats], None] | None = None,
) -> tuple[VsgaeModel, list[EpochStats]]:
    """Train encoder and decoder jointly, unsupervised, reproducibly.

    Mini-batches are drawn from a seeded shuffle each epoch; the per-batch
    objective is the mean per-graph loss.  The learning rate decays when the
    epoch loss plateaus.  A non-finite loss aborts with a diagnostic.
    """
    if len(ds) == 0:
        raise ValueError("training needs a non-empty dataset")
    enc_cfg = replace(enc_cfg, variational=True)
    root = np.random.SeedSequence(cfg.seed)
    init_rng, train_rng = (np.random.default_rng(s) for s in root.spawn(2))
    store = ParamStore()
    encoder = build_encoder_params(store, enc_cfg, init_rng)
    decoder = build_decoder_params(store, enc_cfg, init_rng)
    opt = OptimConfig(
        lr=cfg.lr, plateau_patience=cfg.plateau_patience, plateau_factor=cfg.plateau_decay
    )
    schedule = PlateauSchedule(opt)
    prepared = [prepare_graph(r.graph) for r in ds.records]
    sizes = [p.n for p in prepared]
    n_records = len(ds)
    log: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = train_rng.permutation(n_records)
        sum_node = sum_edge = sum_kl = 0.0
        for batch in _bucketed_batches(order, sizes, cfg.batch_size, train_rng):
            batch_prep = [prepared[i] for i in batch]
            mu, logvar = encode_packed(pack_prepared(batch_prep), encoder, enc_cfg)
            assert logvar is not None
            eps = torch.as_tensor(train_rng.standard_normal(tuple(mu.shape)), dtype=DTYPE)
            z = reparameterize_with_eps(mu, logvar, eps)
            node_l, edge_l = teacher_forced_loss_batch(
                [ds.records[i].graph for i in batch], z, decoder, batch_prep
            )
            kl = kl_divergence(mu, logvar)
            loss = (node_l + edge_l + cfg.alpha * kl).mean()
            sum_node += float(node_l.detach().sum())
            sum_edge += float(edge_l.detach().sum())
            sum_kl += float(kl.detach().sum())
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise RuntimeError(f"non-finite loss at epoch {epoch}: {loss_value}")
            loss.backward()
            store.fill_missing_grads()
            adam_step(store, opt, lr=schedule.lr)
        stats = EpochStats(
            epoch=epoch,
            node_loss=sum_node / n_records,
            edge_loss=sum_edge / n_records,
            kl=sum_kl / n_records,
            total=(sum_node + sum_edge + cfg.alpha * sum_kl) / n_records,
            lr=schedule.lr,
        )
        log.append(stats)
        if progress is not None:
            progress(stats)
        schedule.update(stats.total)
    return VsgaeModel(store, enc_cfg, encoder, decoder), log
