"""Corruption pipeline for self-supervised reconstruction, and its loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .graph import FeatureCodec, Graph
from .tensor import Tensor

NORM_SMOOTHING = 1e-12


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass
class MaskPlan:
    masked_nodes: list[int]
    pseudo_edges: list[tuple[int, int]]
    masked_edges: list[int]  # undirected ids into the original pair list
    rng_seed: int | None = None

    def to_json(self) -> dict:
        return {
            "masked_nodes": list(self.masked_nodes),
            "pseudo_edges": [list(p) for p in self.pseudo_edges],
            "masked_edges": list(self.masked_edges),
        }


@dataclass
class MaskedPair:
    ground_truth: Graph
    masked: Graph
    plan: MaskPlan = field(default_factory=lambda: MaskPlan([], [], []))


def mask_count(num_nodes: int, rate: float) -> int:
    if rate <= 0 or num_nodes == 0:
        return 0
    return min(num_nodes, max(1, round_half_up(rate * num_nodes)))


def mask_nodes(g: Graph, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    """Zero the feature rows of ``K`` nodes sampled without replacement."""
    k = mask_count(g.num_nodes, rate)
    omega = sorted(rng.choice(g.num_nodes, size=k, replace=False).tolist()) if k else []
    x = g.x.copy()
    x[omega] = 0.0
    return x, omega


def add_pseudo_edges(
    g: Graph, omega, per_node: int, rng: np.random.Generator, codec: FeatureCodec
) -> tuple[Graph, list[tuple[int, int]]]:
    """Connect each masked node to up to ``per_node`` random non-neighbours.

    New pairs carry the no-bond category and are appended after the
    original edges, keeping the paired storage layout.
    """
    if per_node <= 0 or not len(omega):
        return g, []
    connected = {tuple(sorted(p)) for p in g.undirected_pairs().tolist()}
    added: list[tuple[int, int]] = []
    for w in omega:
        candidates = [
            v for v in range(g.num_nodes) if v != w and (min(v, w), max(v, w)) not in connected
        ]
        take = min(per_node, len(candidates))
        if take == 0:
            continue
        for v in rng.choice(candidates, size=take, replace=False).tolist():
            pair = (min(v, w), max(v, w))
            connected.add(pair)
            added.append(pair)
    if not added:
        return g, []
    new_edges = np.array([d for a, b in added for d in ((a, b), (b, a))], dtype=np.int64)
    no_bond = np.zeros((2 * len(added), codec.edge_dim))
    no_bond[:, codec.no_bond] = 1.0
    augmented = Graph(
        g.num_nodes,
        np.concatenate([g.edges, new_edges]),
        g.x,
        np.concatenate([g.e, no_bond]),
        g.label,
    )
    return augmented, added


def mask_edges(
    augmented: Graph,
    num_original_pairs: int,
    edge_rate: float,
    rng: np.random.Generator,
    codec: FeatureCodec,
) -> tuple[np.ndarray, list[int]]:
    """Masked edge features: every pseudo pair plus a sampled share of original pairs."""
    e = augmented.e.copy()
    n_mask = round_half_up(edge_rate * num_original_pairs) if edge_rate > 0 else 0
    n_mask = min(n_mask, num_original_pairs)
    chosen = sorted(rng.choice(num_original_pairs, size=n_mask, replace=False).tolist()) if n_mask else []
    pair_ids = list(chosen) + list(range(num_original_pairs, augmented.num_pairs))
    rows = [r for k in pair_ids for r in (2 * k, 2 * k + 1)]
    if rows:
        e[rows] = 0.0
        e[rows, codec.masked] = 1.0
    return e, chosen


def corrupt(
    g: Graph,
    codec: FeatureCodec,
    rng: np.random.Generator,
    node_rate: float = 0.1,
    edge_rate: float | None = None,
    pseudo_per_node: int = 5,
) -> MaskedPair:
    """Full pipeline: mask nodes, add pseudo-edges, mask edges.

    ``edge_rate`` defaults to ``node_rate``.
    """
    edge_rate = node_rate if edge_rate is None else edge_rate
    x_masked, omega = mask_nodes(g, node_rate, rng)
    augmented, pseudo = add_pseudo_edges(g, omega, pseudo_per_node, rng, codec)
    e_masked, masked_ids = mask_edges(augmented, g.num_pairs, edge_rate, rng, codec)
    masked = Graph(g.num_nodes, augmented.edges.copy(), x_masked, e_masked, g.label)
    return MaskedPair(augmented, masked, MaskPlan(omega, pseudo, masked_ids))


def _smoothed_row_norms(residual: Tensor) -> Tensor:
    sq = T.matmul(residual * residual, T.ones(residual.shape[1], 1))
    return T.sqrt(sq + NORM_SMOOTHING)


def reconstruction_terms(x_hat: Tensor, e_hat: Tensor, x_true, e_true) -> tuple[Tensor, Tensor]:
    """Mean smoothed L2 residual norms over all nodes and all directed edges."""
    x_true = np.asarray(x_true, dtype=np.float64)
    e_true = np.asarray(e_true, dtype=np.float64)
    if x_hat.shape != x_true.shape:
        raise DimensionError(f"node reconstruction {x_hat.shape} vs ground truth {x_true.shape}")
    if e_hat.shape != e_true.shape:
        raise DimensionError(f"edge reconstruction {e_hat.shape} vs ground truth {e_true.shape}")
    node_term = T.mean(_smoothed_row_norms(x_hat - T.constant(x_true)))
    if e_true.shape[0]:
        edge_term = T.mean(_smoothed_row_norms(e_hat - T.constant(e_true)))
    else:
        edge_term = T.constant(0.0)
    return node_term, edge_term


def reconstruction_loss(x_hat: Tensor, e_hat: Tensor, ground_truth: Graph, lam: float = 2.0) -> Tensor:
    node_term, edge_term = reconstruction_terms(x_hat, e_hat, ground_truth.x, ground_truth.e)
    return node_term + lam * edge_term
