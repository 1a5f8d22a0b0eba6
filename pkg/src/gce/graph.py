"""Graph data model: one-hot codecs, paired-direction edge storage, batching, I/O.

Undirected edges are stored twice, at positions ``2k`` and ``2k + 1`` as
``(i, j)`` and ``(j, i)`` with ``i < j``, and both rows carry identical
features. Every transformation in the package (batching, pooling, masking)
keeps this pairing intact, which is what lets decoding average a pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CodecError, ContractError, LoadError

NO_BOND = "no_bond"
MASKED = "masked"
DEFAULT_EDGE_CATEGORIES = ("single", "double", "triple", NO_BOND, MASKED)


@dataclass(frozen=True)
class FeatureCodec:
    node_categories: tuple[str, ...]
    edge_categories: tuple[str, ...] = DEFAULT_EDGE_CATEGORIES

    def __post_init__(self):
        object.__setattr__(self, "node_categories", tuple(self.node_categories))
        object.__setattr__(self, "edge_categories", tuple(self.edge_categories))
        if not self.node_categories:
            raise CodecError("codec needs at least one node category")
        for special in (NO_BOND, MASKED):
            if self.edge_categories.count(special) != 1:
                raise CodecError(f"edge categories must contain exactly one {special!r}")
        if len(set(self.node_categories)) != len(self.node_categories):
            raise CodecError("duplicate node category")
        if len(set(self.edge_categories)) != len(self.edge_categories):
            raise CodecError("duplicate edge category")

    @property
    def node_dim(self) -> int:
        return len(self.node_categories)

    @property
    def edge_dim(self) -> int:
        return len(self.edge_categories)

    @property
    def no_bond(self) -> int:
        return self.edge_categories.index(NO_BOND)

    @property
    def masked(self) -> int:
        return self.edge_categories.index(MASKED)

    def node_index(self, label: str) -> int:
        try:
            return self.node_categories.index(label)
        except ValueError:
            raise CodecError(f"unknown node category {label!r}") from None

    def edge_index(self, label: str) -> int:
        try:
            return self.edge_categories.index(label)
        except ValueError:
            raise CodecError(f"unknown edge category {label!r}") from None

    def to_json(self) -> dict:
        return {
            "node_categories": list(self.node_categories),
            "edge_categories": list(self.edge_categories),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureCodec":
        return cls(tuple(obj["node_categories"]), tuple(obj["edge_categories"]))


def encode_one_hot(category_index: int, codec_size: int) -> np.ndarray:
    if not 0 <= category_index < codec_size:
        raise CodecError(f"category {category_index} outside codec of size {codec_size}")
    row = np.zeros(codec_size)
    row[category_index] = 1.0
    return row


def one_hot_matrix(indices: Sequence[int], codec_size: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= codec_size):
        raise CodecError(f"category index outside codec of size {codec_size}")
    out = np.zeros((idx.size, codec_size))
    out[np.arange(idx.size), idx] = 1.0
    return out


def decode_one_hot(row) -> int:
    return int(np.argmax(np.asarray(row)))


@dataclass(frozen=True, eq=False)
class Graph:
    """A graph with one-hot node features ``x`` (N×d_n) and edge features ``e`` (E×d_e)."""

    num_nodes: int
    edges: np.ndarray
    x: np.ndarray
    e: np.ndarray
    label: int | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "e", np.asarray(self.e, dtype=np.float64))
        if self.x.ndim != 2 or self.x.shape[0] != self.num_nodes:
            raise ContractError(f"x has shape {self.x.shape} for {self.num_nodes} nodes")
        if self.e.ndim != 2 or self.e.shape[0] != edges.shape[0]:
            raise ContractError(f"e has shape {self.e.shape} for {edges.shape[0]} edges")
        if edges.shape[0] % 2:
            raise ContractError("edge list must hold paired directions")

    @classmethod
    def from_undirected(
        cls,
        num_nodes: int,
        pairs: Iterable[tuple[int, int]],
        node_cats: Sequence[int],
        edge_cats: Sequence[int],
        codec: FeatureCodec,
        label: int | None = None,
    ) -> "Graph":
        pairs = [tuple(int(v) for v in p) for p in pairs]
        if len(pairs) != len(edge_cats):
            raise ContractError(f"{len(pairs)} edges but {len(edge_cats)} edge categories")
        directed = []
        cats = []
        for (i, j), c in zip(pairs, edge_cats):
            a, b = min(i, j), max(i, j)
            directed += [(a, b), (b, a)]
            cats += [c, c]
        return cls(
            num_nodes,
            np.array(directed, dtype=np.int64).reshape(-1, 2),
            one_hot_matrix(node_cats, codec.node_dim).reshape(num_nodes, codec.node_dim),
            one_hot_matrix(cats, codec.edge_dim),
            label,
        )

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def num_pairs(self) -> int:
        return self.num_edges // 2

    def undirected_pairs(self) -> np.ndarray:
        return self.edges[0::2]

    def node_categories(self) -> np.ndarray:
        return np.argmax(self.x, axis=1) if self.num_nodes else np.zeros(0, np.int64)

    def edge_categories(self) -> np.ndarray:
        return np.argmax(self.e[0::2], axis=1) if self.num_edges else np.zeros(0, np.int64)

    def validate(self, allow_masked_nodes: bool = False) -> None:
        """Raise ``ContractError`` when a structural invariant does not hold."""
        n, E = self.num_nodes, self.num_edges
        if E:
            if self.edges.min() < 0 or self.edges.max() >= n:
                bad = int(np.nonzero((self.edges < 0) | (self.edges >= n))[0][0])
                raise ContractError(f"edge {bad} has an endpoint outside [0, {n})")
            fwd, rev = self.edges[0::2], self.edges[1::2]
            if not np.array_equal(fwd[:, ::-1], rev):
                raise ContractError("edge list is not stored as reverse pairs")
            if np.any(fwd[:, 0] == fwd[:, 1]):
                raise ContractError("self-loop present")
            if not np.array_equal(self.e[0::2], self.e[1::2]):
                raise ContractError("paired edges carry different features")
            keys = {tuple(sorted(p)) for p in fwd.tolist()}
            if len(keys) != fwd.shape[0]:
                raise ContractError("duplicate undirected edge")
        _check_rows(self.x, "node", allow_zero=allow_masked_nodes)
        _check_rows(self.e, "edge", allow_zero=False)

    def same_as(self, other: "Graph") -> bool:
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.e, other.e)
            and self.label == other.label
        )

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``; edge order is kept."""
        perm = np.asarray(perm, dtype=np.int64)
        x = np.empty_like(self.x)
        x[perm] = self.x
        return Graph(self.num_nodes, perm[self.edges], x, self.e.copy(), self.label)


def _check_rows(m: np.ndarray, what: str, allow_zero: bool) -> None:
    if m.size == 0:
        return
    ok_values = np.all((m == 0.0) | (m == 1.0), axis=1)
    sums = m.sum(axis=1)
    ok = ok_values & ((sums == 1.0) | (allow_zero & (sums == 0.0)))
    if not np.all(ok):
        row = int(np.nonzero(~ok)[0][0])
        raise ContractError(f"{what} feature row {row} is not one-hot")


@dataclass(frozen=True, eq=False)
class Batch:
    """Disjoint union of graphs with per-graph node and edge offsets."""

    graph: Graph
    node_offsets: np.ndarray
    edge_offsets: np.ndarray
    graph_of_node: np.ndarray
    labels: tuple[int | None, ...] = field(default=())

    @property
    def num_graphs(self) -> int:
        return len(self.node_offsets) - 1

    @property
    def graph_boundaries(self) -> np.ndarray:
        return self.node_offsets[:-1]


def batch_graphs(graphs: Sequence[Graph]) -> Batch:
    if not graphs:
        raise ContractError("cannot batch an empty list of graphs")
    dn = graphs[0].x.shape[1]
    de = graphs[0].e.shape[1]
    for g in graphs:
        if g.x.shape[1] != dn or g.e.shape[1] != de:
            raise ContractError("graphs in a batch must share one codec")
    node_counts = [g.num_nodes for g in graphs]
    edge_counts = [g.num_edges for g in graphs]
    node_off = np.concatenate([[0], np.cumsum(node_counts)]).astype(np.int64)
    edge_off = np.concatenate([[0], np.cumsum(edge_counts)]).astype(np.int64)
    edges = np.concatenate(
        [g.edges + node_off[k] for k, g in enumerate(graphs)], axis=0
    ).reshape(-1, 2)
    merged = Graph(
        int(node_off[-1]),
        edges,
        np.concatenate([g.x for g in graphs], axis=0).reshape(-1, dn),
        np.concatenate([g.e for g in graphs], axis=0).reshape(-1, de),
    )
    gid = np.repeat(np.arange(len(graphs)), node_counts).astype(np.int64)
    return Batch(merged, node_off, edge_off, gid, tuple(g.label for g in graphs))


def unbatch(batch: Batch) -> list[Graph]:
    g = batch.graph
    out = []
    for k in range(batch.num_graphs):
        n0, n1 = batch.node_offsets[k], batch.node_offsets[k + 1]
        e0, e1 = batch.edge_offsets[k], batch.edge_offsets[k + 1]
        label = batch.labels[k] if batch.labels else None
        out.append(
            Graph(int(n1 - n0), g.edges[e0:e1] - n0, g.x[n0:n1], g.e[e0:e1], label)
        )
    return out


def as_batch(data: Graph | Batch) -> Batch:
    return data if isinstance(data, Batch) else batch_graphs([data])


# ---------------------------------------------------------------------------
# graph-JSON datasets


def _graph_from_record(rec: dict, codec: FeatureCodec, lineno: int) -> Graph:
    try:
        n = int(rec["n"])
        pairs = [tuple(p) for p in rec["edges"]]
        xs = list(rec["x"])
        es = list(rec["e"])
        label = rec.get("label")
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"line {lineno}: malformed graph record ({exc})") from None
    if len(xs) != n:
        raise LoadError(f"line {lineno}: {len(xs)} node categories for n={n}")
    seen = set()
    for k, p in enumerate(pairs):
        if len(p) != 2:
            raise LoadError(f"line {lineno}: edge {k} is not a pair")
        i, j = int(p[0]), int(p[1])
        if not (0 <= i < n and 0 <= j < n):
            raise LoadError(f"line {lineno}: edge {k} ({i},{j}) dangles outside [0, {n})")
        if i >= j:
            raise LoadError(f"line {lineno}: edge {k} ({i},{j}) is not canonical i<j")
        if (i, j) in seen:
            raise LoadError(f"line {lineno}: duplicate edge ({i},{j})")
        seen.add((i, j))
    try:
        g = Graph.from_undirected(n, pairs, xs, es, codec, None if label is None else int(label))
        g.validate()
    except (CodecError, ContractError) as exc:
        raise LoadError(f"line {lineno}: {exc}") from None
    return g


def graph_to_record(g: Graph) -> dict:
    return {
        "n": g.num_nodes,
        "edges": g.undirected_pairs().tolist(),
        "x": g.node_categories().tolist(),
        "e": g.edge_categories().tolist(),
        "label": g.label,
    }


def load_dataset(path) -> tuple[list[Graph], FeatureCodec]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise LoadError(f"{path}: empty dataset file")
    try:
        codec = FeatureCodec.from_json(json.loads(lines[0]))
    except (json.JSONDecodeError, KeyError, TypeError, CodecError) as exc:
        raise LoadError(f"line 1: bad codec header ({exc})") from None
    graphs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LoadError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        graphs.append(_graph_from_record(rec, codec, lineno))
    return graphs, codec


def save_dataset(path, graphs: Sequence[Graph], codec: FeatureCodec) -> None:
    lines = [json.dumps(codec.to_json())]
    lines += [json.dumps(graph_to_record(g)) for g in graphs]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# synthetic labelled datasets

SYNTH_CODEC = FeatureCodec(("a", "b", "c"))


def _cycle(n: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)] + [(0, n - 1)]


def _path(n: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)]


def _motif_graph(n: int, motif: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    # a ring of size ``motif`` with a random tree hanging off it
    pairs = _cycle(motif)
    for v in range(motif, n):
        pairs.append((int(rng.integers(0, v)), v))
    return pairs


def synth_dataset(
    kind: str, n_graphs: int, size_range: tuple[int, int], seed: int, codec: FeatureCodec = SYNTH_CODEC
) -> list[Graph]:
    """Balanced binary graph-classification datasets.

    ``cycles_vs_paths``: label 1 for a cycle, 0 for a path.
    ``two_motifs``: label 0 when the graph contains a triangle, 1 for a 4-ring.
    """
    lo, hi = size_range
    if n_graphs < 2:
        raise ContractError("need at least two graphs")
    min_size = {"cycles_vs_paths": 3, "two_motifs": 4}.get(kind)
    if min_size is None:
        raise ContractError(f"unknown synthetic dataset kind {kind!r}")
    if lo > hi or lo < min_size:
        raise ContractError(f"degenerate size range {size_range} for {kind}")
    rng = np.random.default_rng(seed)
    labels = np.array([k % 2 for k in range(n_graphs)])
    rng.shuffle(labels)
    single = codec.edge_index("single")
    graphs = []
    for label in labels.tolist():
        n = int(rng.integers(lo, hi + 1))
        if kind == "cycles_vs_paths":
            pairs = _cycle(n) if label == 1 else _path(n)
        else:
            pairs = _motif_graph(n, 3 if label == 0 else 4, rng)
        xs = rng.integers(0, codec.node_dim, size=n).tolist()
        graphs.append(Graph.from_undirected(n, pairs, xs, [single] * len(pairs), codec, label))
    return graphs
