"""Graph Context Encoder network.

Encoder layers run GINe convolution, an edge update and top-k pooling;
decoder layers unpool back onto the recorded structure, add the encoder
skip, convolve and update edges again. Two-layer MLP read-outs map the
final node and edge states back to codec width.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError, NumericError
from .graph import Batch, Graph, as_batch
from .tensor import Tensor


@dataclass
class GceConfig:
    node_in_dim: int
    edge_in_dim: int
    num_layers: int = 6
    hidden_channels: int = 50
    pooling_rate: float = 0.5
    epsilon: float = 0.0
    train_epsilon: bool = True
    use_residual: bool = True
    edge_update_all_layers: bool = True
    num_classes: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 2 or self.num_layers % 2:
            raise ConfigurationError(f"num_layers must be even and >= 2, got {self.num_layers}")
        if self.hidden_channels < 1:
            raise ConfigurationError("hidden_channels must be >= 1")
        if not 0.0 < self.pooling_rate <= 1.0:
            raise ConfigurationError(f"pooling_rate must lie in (0, 1], got {self.pooling_rate}")
        if self.num_classes is not None and self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")

    @property
    def depth(self) -> int:
        return self.num_layers // 2

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "GceConfig":
        return cls(**obj)


# named presets (hidden width / depth / pooling); codec dims are filled in by the caller
PRESETS = {
    "molecule-generation": dict(num_layers=6, hidden_channels=50, pooling_rate=0.5, use_residual=True),
    "gine": dict(num_layers=6, hidden_channels=50, pooling_rate=1.0, use_residual=True),
    "graph-mnist": dict(num_layers=4, hidden_channels=50, pooling_rate=0.5, use_residual=True),
}


@dataclass
class GceModel:
    config: GceConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: GceConfig) -> "GceModel":
        rng = np.random.default_rng(config.seed)
        model = cls(config)
        h = config.hidden_channels
        model._mlp(rng, "node_in", config.node_in_dim, h, h)
        model._mlp(rng, "edge_in", config.edge_in_dim, h, h)
        for prefix in model.layer_prefixes():
            eps = Tensor(np.array([config.epsilon]), requires_grad=config.train_epsilon)
            model.params[f"{prefix}.eps"] = eps
            model._mlp(rng, f"{prefix}.theta", h, h, h)
            model._mlp(rng, f"{prefix}.phi", h, h, h)
            if model.has_edge_update(prefix):
                model._mlp(rng, f"{prefix}.update", 3 * h, h, h)
            if prefix.startswith("enc"):
                bound = 1.0 / math.sqrt(h)
                model._add(f"{prefix}.pool.p", rng.uniform(-bound, bound, size=h))
        model._mlp(rng, "node_out", h, h, config.node_in_dim)
        model._mlp(rng, "edge_out", h, h, config.edge_in_dim)
        if config.num_classes is not None:
            model.attach_head(config.num_classes, rng)
        return model

    def attach_head(self, num_classes: int, rng: np.random.Generator) -> None:
        h = self.config.hidden_channels
        self.config.num_classes = num_classes
        self._mlp(rng, "head", h, h, num_classes)

    def layer_prefixes(self) -> list[str]:
        d = self.config.depth
        return [f"enc{k}" for k in range(d)] + [f"dec{k}" for k in range(d)]

    def has_edge_update(self, prefix: str) -> bool:
        return self.config.edge_update_all_layers or prefix.startswith("dec")

    def is_encoder_param(self, name: str) -> bool:
        return name.split(".")[0] in ("node_in", "edge_in") or name.startswith("enc")

    def is_head_param(self, name: str) -> bool:
        return name.startswith("head.")

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _linear(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self._add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self._add(f"{name}.b", rng.uniform(-bound, bound, size=(1, fan_out)))

    def _mlp(self, rng, name: str, fan_in: int, hidden: int, fan_out: int) -> None:
        self._linear(rng, f"{name}.0", fan_in, hidden)
        self._linear(rng, f"{name}.1", hidden, fan_out)

    # callable sub-networks
    def linear(self, name: str) -> Callable[[Tensor], Tensor]:
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        return lambda x: linear(x, w, b)

    def mlp(self, name: str) -> Callable[[Tensor], Tensor]:
        first, second = self.linear(f"{name}.0"), self.linear(f"{name}.1")
        return lambda x: second(T.relu(first(x)))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + T.matmul(T.ones(x.shape[0], 1), b)


def expand_rows(col: Tensor, width: int) -> Tensor:
    """N×1 -> N×width by repetition (explicit, via a ones row)."""
    return T.matmul(col, T.ones(1, width))


# ---------------------------------------------------------------------------
# layers


def gine_conv(
    x: Tensor,
    edges: np.ndarray,
    e: Tensor,
    eps: Tensor | float,
    f_theta: Callable[[Tensor], Tensor],
    f_phi: Callable[[Tensor], Tensor],
) -> Tensor:
    """``f_theta((1 + eps) x_i + sum_{j->i} relu(x_j + f_phi(e_ji)))``."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.shape[0] != edges.shape[0]:
        raise DimensionError(f"gine_conv: {edges.shape[0]} edges but edge features {e.shape}")
    n = x.shape[0]
    src, dst = edges[:, 0], edges[:, 1]
    edge_emb = f_phi(e)
    if edge_emb.shape[1] != x.shape[1]:
        raise DimensionError(
            f"gine_conv: embedded edge width {edge_emb.shape[1]} != node width {x.shape[1]}"
        )
    messages = T.relu(T.gather(x, src) + edge_emb)
    agg = T.scatter_add(messages, dst, n)
    self_term = (1.0 + (eps if isinstance(eps, Tensor) else T.constant(eps))) * x
    return f_theta(self_term + agg)


def edge_update(
    e: Tensor, x: Tensor, edges: np.ndarray, f_update: Callable[[Tensor], Tensor]
) -> Tensor:
    """Per-edge MLP over ``[e_ij, x_i, x_j]`` for each stored direction."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.shape[0] != edges.shape[0]:
        raise DimensionError(f"edge_update: {edges.shape[0]} edges but features {e.shape}")
    cat = T.concat([e, T.gather(x, edges[:, 0]), T.gather(x, edges[:, 1])], axis=1)
    return f_update(cat)


@dataclass
class PoolRecord:
    indices: np.ndarray
    num_nodes: int
    edges: np.ndarray
    edge_features: Tensor
    kept_edges: np.ndarray
    graph_of_node: np.ndarray
    scores: np.ndarray

    @property
    def k(self) -> int:
        return int(self.indices.shape[0])


def pool_sizes(counts: np.ndarray, rate: float) -> np.ndarray:
    """Nodes kept per graph: ceil(rate * n), at least 1 (0 for an empty graph)."""
    counts = np.asarray(counts, dtype=np.int64)
    k = np.ceil(rate * counts - 1e-12).astype(np.int64)
    return np.where(counts > 0, np.maximum(k, 1), 0)


TIE_TOL = 1e-12


def _tie_levels(scores: np.ndarray, gid: np.ndarray) -> np.ndarray:
    """Scores with roundoff-level differences collapsed onto one value per graph.

    Symmetric nodes score equal in exact arithmetic but may differ in the last
    bits depending on how rows were batched; merging them keeps the
    lowest-index tie rule stable.
    """
    order = np.lexsort((-scores, gid))
    levels = scores.copy()
    for a, b in zip(order[:-1], order[1:]):
        if gid[a] == gid[b] and levels[a] - scores[b] <= TIE_TOL * (1.0 + abs(scores[b])):
            levels[b] = levels[a]
    return levels


def topk_pool(
    x: Tensor,
    edges: np.ndarray,
    e: Tensor,
    p: Tensor,
    rate: float,
    graph_of_node: np.ndarray | None = None,
):
    """Keep the top ``ceil(rate * n)`` nodes of each graph by projection score.

    Returns ``(x_pooled, edges_pooled, e_pooled, graph_of_node_pooled, record)``.
    Ties are broken towards the lower node index.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n, h = x.shape
    gid = np.zeros(n, np.int64) if graph_of_node is None else np.asarray(graph_of_node)
    p_col = T.reshape(p, (h, 1))
    norm = T.sqrt(T.sum(p * p))
    if norm.item() == 0.0:
        raise NumericError("top-k pooling projection vector has zero norm")
    y = T.matmul(x, p_col) / norm
    scores = y.data.reshape(-1)

    n_graphs = int(gid.max()) + 1 if n else 0
    counts = np.bincount(gid, minlength=n_graphs)
    k = pool_sizes(counts, rate)
    order = np.lexsort((np.arange(n), -_tie_levels(scores, gid), gid))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]) if n else np.zeros(0, np.int64)
    sorted_gid = gid[order]
    rank = np.arange(n) - starts[sorted_gid]
    chosen = np.sort(order[rank < k[sorted_gid]])

    gated = x * expand_rows(T.tanh(y), h)
    x_new = T.gather(gated, chosen)

    remap = np.full(n, -1, np.int64)
    remap[chosen] = np.arange(chosen.shape[0])
    kept = np.nonzero((remap[edges[:, 0]] >= 0) & (remap[edges[:, 1]] >= 0))[0] if edges.size else np.zeros(0, np.int64)
    edges_new = remap[edges[kept]].reshape(-1, 2)
    e_new = T.gather(e, kept)
    record = PoolRecord(chosen, n, edges, e, kept, gid, scores)
    return x_new, edges_new, e_new, gid[chosen], record


def unpool(x_small: Tensor, record: PoolRecord, e_small: Tensor | None = None):
    """Place pooled rows back at their recorded indices; restore the recorded edges.

    Unselected rows are zero. Edge features are the recorded pre-pool ones,
    plus ``e_small`` scattered onto the surviving edges when given.
    """
    if x_small.shape[0] != record.k:
        raise ContractError(f"unpool: {x_small.shape[0]} rows but record holds k={record.k}")
    x_large = T.scatter_add(x_small, record.indices, record.num_nodes)
    e_large = record.edge_features
    if e_small is not None:
        if e_small.shape[0] != record.kept_edges.shape[0]:
            raise ContractError("unpool: pooled edge features do not match the record")
        e_large = e_large + T.scatter_add(e_small, record.kept_edges, record.edges.shape[0])
    return x_large, record.edges, e_large


# ---------------------------------------------------------------------------
# full networks


def _check_codec(model: GceModel, g: Graph) -> None:
    c = model.config
    if g.x.shape[1] != c.node_in_dim or g.e.shape[1] != c.edge_in_dim:
        raise ContractError(
            f"batch features ({g.x.shape[1]}, {g.e.shape[1]}) do not match the model codec "
            f"({c.node_in_dim}, {c.edge_in_dim})"
        )


def _layer(model: GceModel, prefix: str, x: Tensor, edges, e: Tensor):
    P = model.params
    x = gine_conv(x, edges, e, P[f"{prefix}.eps"], model.mlp(f"{prefix}.theta"), model.mlp(f"{prefix}.phi"))
    if model.has_edge_update(prefix):
        e = edge_update(e, x, edges, model.mlp(f"{prefix}.update"))
    return x, e


def encode(model: GceModel, batch: Batch):
    """Run the encoder stack; returns final (x, edges, e, graph_of_node), skips and records."""
    g = batch.graph
    _check_codec(model, g)
    x = model.mlp("node_in")(T.constant(g.x))
    e = model.mlp("edge_in")(T.constant(g.e))
    edges, gid = g.edges, batch.graph_of_node
    skips, records = [], []
    for level in range(model.config.depth):
        prefix = f"enc{level}"
        x, e = _layer(model, prefix, x, edges, e)
        skips.append(x)
        x, edges, e, gid, rec = topk_pool(
            x, edges, e, model.params[f"{prefix}.pool.p"], model.config.pooling_rate, gid
        )
        records.append(rec)
    return x, edges, e, gid, skips, records


def forward(model: GceModel, data: Graph | Batch, return_records: bool = False):
    """Reconstruct node (N×d_n) and edge (E×d_e) features of a masked batch."""
    batch = as_batch(data)
    x, edges, e, _, skips, records = encode(model, batch)
    depth = model.config.depth
    for level in range(depth):
        rec = records[depth - 1 - level]
        x, edges, e = unpool(x, rec, e)
        if model.config.use_residual:
            x = x + skips[depth - 1 - level]
        x, e = _layer(model, f"dec{level}", x, edges, e)
    x_hat = model.mlp("node_out")(x)
    e_hat = model.mlp("edge_out")(e)
    if return_records:
        return x_hat, e_hat, records
    return x_hat, e_hat


def _graph_means(x: Tensor, gid: np.ndarray, n_graphs: int) -> Tensor:
    counts = np.bincount(gid, minlength=n_graphs).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    return T.scatter_add(x, gid, n_graphs) * T.constant(np.repeat(inv[:, None], x.shape[1], axis=1))


def graph_embeddings(model: GceModel, data: Graph | Batch) -> Tensor:
    """Per-graph embedding (num_graphs × hidden).

    Each encoder level's node states (taken before that level pools) are
    mean-pooled per graph and the level means are summed, so structure
    that pooling discards still reaches the head.
    """
    batch = as_batch(data)
    _, _, _, _, skips, records = encode(model, batch)
    gids = [batch.graph_of_node] + [r.graph_of_node[r.indices] for r in records[:-1]]
    out = None
    for x, gid in zip(skips, gids):
        level = _graph_means(x, gid, batch.num_graphs)
        out = level if out is None else out + level
    return out


def classifier_forward(model: GceModel, data: Graph | Batch) -> Tensor:
    if "head.0.w" not in model.params:
        raise ConfigurationError("model has no classifier head attached")
    return model.mlp("head")(graph_embeddings(model, data))
