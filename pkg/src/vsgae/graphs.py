"""Cell graphs: the labeled DAGs that describe convolutional cells.

A cell graph is stored in canonical order, i.e. node indices are a
topological order and every edge (u, v) satisfies u < v, so the adjacency
matrix is strictly upper triangular.  Graphs produced by the generator have
a unique input node at index 0 and a unique output node at index n - 1;
arbitrary graphs (e.g. decoder output) are judged by :func:`validate`.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator


class NodeType(Enum):
    """The five node labels of the cell search space."""

    INPUT = "input"
    OUTPUT = "output"
    CONV3X3 = "conv3x3-bn-relu"
    CONV1X1 = "conv1x1-bn-relu"
    MAXPOOL3X3 = "maxpool3x3"

    @property
    def is_operation(self) -> bool:
        return self not in (NodeType.INPUT, NodeType.OUTPUT)


#: The three labels allowed on interior nodes.
OPERATIONS: tuple[NodeType, ...] = (
    NodeType.CONV3X3,
    NodeType.CONV1X1,
    NodeType.MAXPOOL3X3,
)

#: Fixed label order used for one-hot/lookup indexing throughout the models.
NODE_TYPE_ORDER: tuple[NodeType, ...] = (
    NodeType.INPUT,
    NodeType.OUTPUT,
    NodeType.CONV3X3,
    NodeType.CONV1X1,
    NodeType.MAXPOOL3X3,
)
TYPE_TO_INDEX = {t: i for i, t in enumerate(NODE_TYPE_ORDER)}
NUM_NODE_TYPES = len(NODE_TYPE_ORDER)

_OP_FROM_STRING = {t.value: t for t in NodeType}


@dataclass(frozen=True)
class SearchSpaceLimits:
    """Generator budgets of the cell search space (not validity checks)."""

    max_nodes: int = 7
    max_edges: int = 9
    num_op_types: int = 3

    def __post_init__(self) -> None:
        if self.max_nodes < 2:
            raise ValueError("max_nodes must be >= 2")
        if self.max_edges < 1 or self.num_op_types < 1:
            raise ValueError("limits must be positive")


DEFAULT_LIMITS = SearchSpaceLimits()


@dataclass(frozen=True)
class CellGraph:
    """Labeled DAG in canonical (upper-triangular) node order.

    ``edges`` holds ordered pairs (u, v) with u < v; acyclicity is therefore
    guaranteed by construction.
    """

    n: int
    labels: tuple[NodeType, ...]
    edges: frozenset[tuple[int, int]]

    def __init__(self, n: int, labels: Iterable[NodeType], edges: Iterable[tuple[int, int]]):
        labels = tuple(labels)
        edges = frozenset((int(u), int(v)) for u, v in edges)
        if n < 2:
            raise ValueError(f"node count must be >= 2, got {n}")
        if len(labels) != n:
            raise ValueError(f"expected {n} labels, got {len(labels)}")
        for u, v in edges:
            if not (0 <= u < v < n):
                raise ValueError(f"edge ({u}, {v}) violates canonical order 0 <= u < v < n")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "edges", edges)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def predecessors(self, v: int) -> list[int]:
        return [u for u, w in self.edges if w == v]

    def successors(self, v: int) -> list[int]:
        return [w for u, w in self.edges if u == v]

    def in_degrees(self) -> list[int]:
        deg = [0] * self.n
        for _, v in self.edges:
            deg[v] += 1
        return deg

    def out_degrees(self) -> list[int]:
        deg = [0] * self.n
        for u, _ in self.edges:
            deg[u] += 1
        return deg


@dataclass(frozen=True)
class ValidityReport:
    """Outcome of the five structural validity checks.

    The size/edge budgets of the search space are reported separately and do
    not affect :attr:`valid`: a decoded graph may be structurally valid yet
    exceed the generator's budget.
    """

    single_input: bool
    single_output: bool
    no_sources_but_input: bool
    no_sinks_but_output: bool
    is_dag: bool
    within_node_budget: bool
    within_edge_budget: bool

    @property
    def valid(self) -> bool:
        return (
            self.single_input
            and self.single_output
            and self.no_sources_but_input
            and self.no_sinks_but_output
            and self.is_dag
        )

    def checks(self) -> tuple[bool, bool, bool, bool, bool]:
        return (
            self.single_input,
            self.single_output,
            self.no_sources_but_input,
            self.no_sinks_but_output,
            self.is_dag,
        )


def validate(g: CellGraph, limits: SearchSpaceLimits = DEFAULT_LIMITS) -> ValidityReport:
    """Run the five structural checks on an arbitrary cell graph.

    Malformed graphs yield failed checks, never exceptions.
    """
    indeg = g.in_degrees()
    outdeg = g.out_degrees()
    return ValidityReport(
        single_input=g.labels.count(NodeType.INPUT) == 1,
        single_output=g.labels.count(NodeType.OUTPUT) == 1,
        no_sources_but_input=all(
            indeg[v] > 0 or g.labels[v] is NodeType.INPUT for v in range(g.n)
        ),
        no_sinks_but_output=all(
            outdeg[v] > 0 or g.labels[v] is NodeType.OUTPUT for v in range(g.n)
        ),
        # True by representation (u < v on every edge); asserted regardless.
        is_dag=all(u < v for u, v in g.edges),
        within_node_budget=g.n <= limits.max_nodes,
        within_edge_budget=len(g.edges) <= limits.max_edges,
    )


def _valid_edge_structures(n: int, max_edges: int) -> Iterator[frozenset[tuple[int, int]]]:
    """Upper-triangular edge sets under which any op-labeled interior passes
    the validity checks: nodes 1..n-1 need a predecessor, nodes 0..n-2 a
    successor."""
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    in_need = (1 << n) - 2
    out_need = (1 << (n - 1)) - 1
    for r in range(min(len(pairs), max_edges) + 1):
        for sub in itertools.combinations(pairs, r):
            covered_in = covered_out = 0
            for u, v in sub:
                covered_in |= 1 << v
                covered_out |= 1 << u
            if covered_in & in_need == in_need and covered_out & out_need == out_need:
                yield frozenset(sub)


def enumerate_valid(
    exact_n: int,
    limits: SearchSpaceLimits = DEFAULT_LIMITS,
    dedup: bool = False,
) -> list[CellGraph]:
    """All valid canonical cell graphs with exactly ``exact_n`` nodes.

    Interior labels range over the three operations; the input/output labels
    sit at the canonical endpoints.  With ``dedup`` one representative per
    label-preserving isomorphism class is kept (brute force over interior
    permutations, fine for the <= 7 node space).
    """
    if not 2 <= exact_n <= limits.max_nodes:
        raise ValueError(f"exact_n must be in [2, {limits.max_nodes}], got {exact_n}")
    if limits.num_op_types > len(OPERATIONS):
        raise ValueError(f"at most {len(OPERATIONS)} operation types exist")
    alphabet = OPERATIONS[: limits.num_op_types]
    graphs: list[CellGraph] = []
    seen: set[str] = set()
    for edges in _valid_edge_structures(exact_n, limits.max_edges):
        for interior in itertools.product(alphabet, repeat=exact_n - 2):
            g = CellGraph(exact_n, (NodeType.INPUT, *interior, NodeType.OUTPUT), edges)
            if dedup:
                key = _canonical_form(g)
                if key in seen:
                    continue
                seen.add(key)
            graphs.append(g)
    return graphs


def _interior_permutations(g: CellGraph) -> Iterator[dict[int, int]]:
    """Relabelings fixing the endpoints whose image stays upper triangular."""
    interior = range(1, g.n - 1)
    for perm in itertools.permutations(interior):
        mapping = {0: 0, g.n - 1: g.n - 1}
        mapping.update({old: new for new, old in zip(interior, perm)})
        if all(mapping[u] < mapping[v] for u, v in g.edges):
            yield mapping

def apply_permutation(g: CellGraph, mapping: dict[int, int]) -> CellGraph:
    labels = [NodeType.INPUT] * g.n
    for old, new in mapping.items():
        labels[new] = g.labels[old]
    return CellGraph(g.n, labels, ((mapping[u], mapping[v]) for u, v in g.edges))


def isomorphic_images(g: CellGraph) -> list[CellGraph]:
    """All canonical graphs isomorphic to ``g`` via interior relabeling."""
    return [apply_permutation(g, m) for m in _interior_permutations(g)]


def _form_key(g: CellGraph) -> str:
    ops = ",".join(t.value for t in g.labels)
    edges = ";".join(f"{u}-{v}" for u, v in g.sorted_edges())
    return f"{g.n}|{ops}|{edges}"


def _canonical_form(g: CellGraph) -> str:
    return min(_form_key(img) for img in isomorphic_images(g))


def graph_hash(g: CellGraph, minimize_over_permutations: bool = True) -> str:
    """Fixed-width digest of the graph.

    With permutation minimization (default) label-preserving-isomorphic
    graphs hash equal; without it the digest covers the stored form only.
    """
    key = _canonical_form(g) if minimize_over_permutations else _form_key(g)
    return hashlib.sha256(key.encode("ascii")).hexdigest()


def edit_distance(g1: CellGraph, g2: CellGraph) -> int:
    """Smallest number of single changes (one label turn, or one edge added
    or removed) transforming ``g1`` into ``g2``.

    Minimized over all interior-node relabelings of ``g1`` (endpoints stay
    fixed); each differing label counts 1 and each differing directed pair
    counts 1.  Minimizing over the whole relabeling group makes this a true
    metric on same-size graphs: isomorphic graphs sit at distance zero and
    the triangle inequality holds.  Only defined for graphs of the same
    length.
    """
    if g1.n != g2.n:
        raise ValueError(f"graphs must have equal node counts, got {g1.n} and {g2.n}")
    interior = range(1, g1.n - 1)
    best = None
    for perm in itertools.permutations(interior):
        mapping = {0: 0, g1.n - 1: g1.n - 1}
        mapping.update({old: new for new, old in zip(interior, perm)})
        image_labels = [None] * g1.n
        for old, new in mapping.items():
            image_labels[new] = g1.labels[old]
        cost = sum(1 for v in range(g1.n) if image_labels[v] is not g2.labels[v])
        image_edges = {(mapping[u], mapping[v]) for u, v in g1.edges}
        cost += len(image_edges.symmetric_difference(g2.edges))
        if best is None or cost < best:
            best = cost
            if best == 0:
                break
    assert best is not None
    return best


class GraphRecordError(ValueError):
    """Raised when a serialized graph record is malformed."""

    def __init__(self, fld: str, message: str):
        super().__init__(f"bad graph record field '{fld}': {message}")
        self.record_field = fld


def to_record(g: CellGraph, acc: float | None = None) -> dict:
    return {
        "n": g.n,
        "ops": [t.value for t in g.labels],
        "edges": [[u, v] for u, v in g.sorted_edges()],
        "acc": acc,
    }


def from_record(record: dict) -> tuple[CellGraph, float | None]:
    if not isinstance(record, dict):
        raise GraphRecordError("record", "expected a JSON object")
    n = record.get("n")
    if not isinstance(n, int) or n < 2:
        raise GraphRecordError("n", f"expected integer >= 2, got {n!r}")
    ops = record.get("ops")
    if not isinstance(ops, list) or len(ops) != n:
        raise GraphRecordError("ops", f"expected list of {n} strings")
    labels = []
    for op in ops:
        if op not in _OP_FROM_STRING:
            raise GraphRecordError("ops", f"unknown op string {op!r}")
        labels.append(_OP_FROM_STRING[op])
    raw_edges = record.get("edges")
    if not isinstance(raw_edges, list):
        raise GraphRecordError("edges", "expected list of [u, v] pairs")
    edges = []
    for e in raw_edges:
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(x, int) for x in e)):
            raise GraphRecordError("edges", f"expected [u, v] integer pair, got {e!r}")
        u, v = e
        if not 0 <= u < v < n:
            raise GraphRecordError("edges", f"edge ({u}, {v}) is not upper triangular")
        edges.append((u, v))
    if len(set(edges)) != len(edges):
        raise GraphRecordError("edges", "duplicate edges")
    acc = record.get("acc")
    if acc is not None and not isinstance(acc, (int, float)):
        raise GraphRecordError("acc", f"expected number or null, got {acc!r}")
    return CellGraph(n, labels, edges), (float(acc) if acc is not None else None)


def serialize(g: CellGraph, acc: float | None = None) -> str:
    """One-line JSON record of a graph (edges lexicographically sorted)."""
    return json.dumps(to_record(g, acc), separators=(", ", ": "))


def deserialize(record: str) -> CellGraph:
    try:
        data = json.loads(record)
    except json.JSONDecodeError as exc:
        raise GraphRecordError("record", f"invalid JSON: {exc}") from exc
    return from_record(data)[0]


def longest_path(g: CellGraph) -> int:
    """Maximum edge count over input-to-output paths (DAG dynamic program)."""
    dist = [None] * g.n
    dist[0] = 0
    for u, v in sorted(g.edges):
        if dist[u] is not None and (dist[v] is None or dist[u] + 1 > dist[v]):
            dist[v] = dist[u] + 1
    if dist[g.n - 1] is None:
        raise ValueError("graph has no path from input to output")
    return dist[g.n - 1]
