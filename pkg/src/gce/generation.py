"""n-shot masked generation, reconstruction decoding and the metric suite."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, ConversionError
from .graph import FeatureCodec, Graph
from .masking import add_pseudo_edges, mask_edges, mask_nodes
from .model import GceModel, forward
from .molecule import (
    DESCRIPTOR_NAMES,
    INTEGER_DESCRIPTORS,
    Molecule,
    canonical_key,
    descriptors,
    graph_to_molecule,
    is_valid,
    molecule_to_graph,
    write_fragments,
)
from .training import STREAM_GENERATE, stream

KL_SMOOTHING = 1e-10
WEIGHT_BINS = 20


@dataclass
class GenerationConfig:
    shots: int = 1
    mask_rate: float = 0.1
    pseudo_edges: int = 5
    seed: int = 0
    sanitize: bool = False
    num_samples: int = 1000

    def __post_init__(self):
        if self.shots < 1:
            raise ContractError(f"shots must be >= 1, got {self.shots}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ContractError(f"mask_rate must lie in [0, 1], got {self.mask_rate}")
        if self.pseudo_edges < 0:
            raise ContractError("pseudo_edges must be >= 0")
        if self.num_samples < 1:
            raise ContractError("num_samples must be >= 1")


def decode_reconstruction(x_hat, e_hat, masked: Graph, codec: FeatureCodec) -> Graph:
    """Turn raw reconstructions into a clean graph.

    Nodes take the row argmax. Each undirected pair takes the argmax of its
    two directed rows averaged, with the masked category excluded; pairs that
    decode to no-bond are dropped.
    """
    x_hat = np.asarray(getattr(x_hat, "data", x_hat), dtype=np.float64)
    e_hat = np.asarray(getattr(e_hat, "data", e_hat), dtype=np.float64)
    if x_hat.shape != (masked.num_nodes, codec.node_dim):
        raise ContractError(f"node reconstruction shape {x_hat.shape} does not fit the masked graph")
    if e_hat.shape != (masked.num_edges, codec.edge_dim):
        raise ContractError(f"edge reconstruction shape {e_hat.shape} does not fit the masked graph")
    node_cats = np.argmax(x_hat, axis=1)
    pairs = masked.undirected_pairs()
    if len(pairs):
        avg = 0.5 * (e_hat[0::2] + e_hat[1::2])
        avg[:, codec.masked] = -np.inf
        edge_cats = np.argmax(avg, axis=1)
        keep = edge_cats != codec.no_bond
        pairs, edge_cats = pairs[keep], edge_cats[keep]
    else:
        edge_cats = np.zeros(0, dtype=np.int64)
    return Graph.from_undirected(
        masked.num_nodes, [tuple(p) for p in pairs.tolist()], node_cats.tolist(), edge_cats.tolist(), codec
    )


def reconstruct_once(model: GceModel, g: Graph, codec: FeatureCodec, rng, mask_rate: float, pseudo_edges: int):
    """One shot: corrupt ``g`` (ground truth not needed), run the model, decode.

    Returns ``(masked graph, decoded graph, mask plan dict)``.
    """
    x_masked, omega = mask_nodes(g, mask_rate, rng)
    augmented, pseudo = add_pseudo_edges(g, omega, pseudo_edges, rng, codec)
    e_masked, masked_ids = mask_edges(augmented, g.num_pairs, mask_rate, rng, codec)
    masked = Graph(g.num_nodes, augmented.edges, x_masked, e_masked, g.label)
    x_hat, e_hat = forward(model, masked)
    decoded = decode_reconstruction(x_hat, e_hat, masked, codec)
    plan = {
        "masked_nodes": omega,
        "pseudo_edges": [list(p) for p in pseudo],
        "masked_edges": masked_ids,
    }
    return masked, decoded, plan


@dataclass
class GeneratedMolecule:
    seed_smiles: str
    molecule: Molecule | None
    smiles: str | None
    valid: bool
    shots: list[dict] = field(default_factory=list)

    def provenance(self) -> dict:
        return {"seed": self.seed_smiles, "output": self.smiles, "valid": self.valid,
                "shots": len(self.shots), "plans": self.shots}


def _safe_smiles(mol: Molecule) -> str | None:
    try:
        return write_fragments(mol)
    except ContractError:
        return None


def generate_nshot(
    model: GceModel,
    seeds: Sequence[Molecule],
    config: GenerationConfig,
    codec: FeatureCodec,
    seed_smiles: Sequence[str] | None = None,
) -> list[GeneratedMolecule]:
    """Draw ``config.num_samples`` molecules, cycling through ``seeds``.

    Draw ``d`` starts from ``seeds[d % len(seeds)]`` and is masked and
    reconstructed ``config.shots`` times, each shot feeding the next. Draw
    randomness comes from its own stream, so results do not depend on how
    many draws precede it.
    """
    if not seeds:
        raise ContractError("generation needs at least one seed molecule")
    names = list(seed_smiles) if seed_smiles is not None else [_safe_smiles(m) or "" for m in seeds]
    out: list[GeneratedMolecule] = []
    for draw in range(config.num_samples):
        k = draw % len(seeds)
        rng = stream(config.seed, STREAM_GENERATE, draw)
        g = molecule_to_graph(seeds[k], codec)
        plans = []
        for _ in range(config.shots):
            _, g, plan = reconstruct_once(model, g, codec, rng, config.mask_rate, config.pseudo_edges)
            plans.append(plan)
        try:
            mol = graph_to_molecule(g, codec)
        except ConversionError as exc:
            # decoding never emits the masked category, so this is a bug
            raise RuntimeError(f"draw {draw}: decoded graph does not convert: {exc}") from exc
        valid = is_valid(mol)
        if config.sanitize and not valid:
            continue
        out.append(GeneratedMolecule(names[k], mol, _safe_smiles(mol), valid, plans))
    return out


def save_generation(out_dir, generated: Sequence[GeneratedMolecule], config: GenerationConfig) -> tuple[Path, Path]:
    """Write ``generated.smi`` and the ``provenance.json`` sidecar.

    Molecules too tangled to write (more than nine open rings) are absent
    from the SMILES file and have a null output in the sidecar.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    smi = out_dir / "generated.smi"
    side = out_dir / "provenance.json"
    smi.write_text("".join(f"{g.smiles}\n" for g in generated if g.smiles is not None))
    side.write_text(json.dumps({"config": asdict(config), "draws": [g.provenance() for g in generated]},
                               indent=1, sort_keys=True))
    return smi, side


# ---------------------------------------------------------------------------
# metrics


def _need(mols, what: str) -> None:
    if not len(mols):
        raise ContractError(f"{what} is undefined on an empty set")


def metric_validity(generated: Sequence[Molecule]) -> float:
    _need(generated, "validity")
    return sum(is_valid(m) for m in generated) / len(generated)


def _valid_keys(mols: Sequence[Molecule]) -> list[str]:
    return [canonical_key(m) for m in mols if is_valid(m)]


def metric_uniqueness(generated: Sequence[Molecule]) -> float:
    """Distinct canonical keys over the valid molecules only."""
    keys = _valid_keys(generated)
    _need(keys, "uniqueness")
    return len(set(keys)) / len(keys)


def metric_novelty(generated: Sequence[Molecule], training: Sequence[Molecule]) -> float:
    unique = set(_valid_keys(generated))
    _need(unique, "novelty")
    seen = {canonical_key(m) for m in training}
    return len(unique - seen) / len(unique)


def _histograms(ref: np.ndarray, gen: np.ndarray, integer: bool) -> tuple[np.ndarray, np.ndarray]:
    lo = min(ref.min(), gen.min())
    hi = max(ref.max(), gen.max())
    if integer:
        edges = np.arange(math.floor(lo), math.floor(hi) + 2) - 0.5
    elif hi > lo:
        edges = np.linspace(lo, hi, WEIGHT_BINS + 1)
    else:
        edges = np.array([lo - 0.5, lo + 0.5])
    p, _ = np.histogram(ref, bins=edges)
    q, _ = np.histogram(gen, bins=edges)
    return p.astype(np.float64), q.astype(np.float64)


def kl_divergence(p_counts, q_counts) -> float:
    """KL(p || q) of two count vectors after additive smoothing."""
    p = np.asarray(p_counts, dtype=np.float64) + KL_SMOOTHING
    q = np.asarray(q_counts, dtype=np.float64) + KL_SMOOTHING
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def metric_kl_score(generated: Sequence[Molecule], reference: Sequence[Molecule]) -> tuple[float, dict[str, float]]:
    """Mean over descriptors of ``exp(-KL(reference || generated))``."""
    _need(generated, "kl_score (generated set)")
    _need(reference, "kl_score (reference set)")
    for name, mols in (("generated", generated), ("reference", reference)):
        if not all(is_valid(m) for m in mols):
            raise ContractError(f"kl_score expects only valid molecules in the {name} set")
    gen = np.stack([descriptors(m) for m in generated])
    ref = np.stack([descriptors(m) for m in reference])
    per = {}
    for col, name in enumerate(DESCRIPTOR_NAMES):
        p, q = _histograms(ref[:, col], gen[:, col], name in INTEGER_DESCRIPTORS)
        per[name] = kl_divergence(p, q)
    score = float(np.mean([math.exp(-v) for v in per.values()]))
    return score, per


@dataclass
class MetricsReport:
    validity: float
    uniqueness: float
    novelty: float
    kl_score: float
    kl_per_descriptor: dict[str, float]
    generated: int
    valid: int
    unique: int
    novel: int

    def to_json(self) -> dict:
        return asdict(self)

    def csv_row(self) -> str:
        buf = io.StringIO()
        fields = ["validity", "uniqueness", "novelty", "kl_score", "generated", "valid", "unique", "novel"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        w.writerow([getattr(self, f) for f in fields])
        return buf.getvalue()


def evaluate_generation(
    generated: Sequence[Molecule], reference: Sequence[Molecule], training: Sequence[Molecule] | None = None
) -> MetricsReport:
    """Full metric suite. Novelty is measured against ``training`` (default: ``reference``)."""
    training = reference if training is None else training
    validity = metric_validity(generated)
    valid = [m for m in generated if is_valid(m)]
    if not valid:
        raise ContractError("no valid molecules were generated; uniqueness and kl_score are undefined")
    keys = {canonical_key(m) for m in valid}
    seen = {canonical_key(m) for m in training}
    ref_valid = [m for m in reference if is_valid(m)]
    kl, per = metric_kl_score(valid, ref_valid)
    return MetricsReport(
        validity=validity,
        uniqueness=len(keys) / len(valid),
        novelty=len(keys - seen) / len(keys),
        kl_score=kl,
        kl_per_descriptor=per,
        generated=len(generated),
        valid=len(valid),
        unique=len(keys),
        novel=len(keys - seen),
    )
