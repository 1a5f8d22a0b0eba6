"""Adam, the reconstruction pretraining loop, weight transfer and classifier training.

Randomness is split into independent streams keyed by ``(seed, purpose, ...)``
so that an epoch's shuffle and masks depend only on the epoch number; this
is what makes a resumed run identical to an uninterrupted one.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ContractError, DataError, NumericError, TransferError
from .graph import FeatureCodec, Graph, batch_graphs
from .masking import corrupt, reconstruction_loss
from .model import GceConfig, GceModel, classifier_forward, forward

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"GCECKPT\x00"

STREAM_SHUFFLE = 0
STREAM_MASK = 1
STREAM_SPLIT = 2
STREAM_GENERATE = 3


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    mask_rate: float = 0.1
    edge_mask_rate: float | None = None
    edge_weight: float = 2.0
    pseudo_edges: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, T.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``; missing grads count as zero."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
    return state


def named_grads(model: GceModel, grads: dict[T.Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: grads[p] for name, p in model.trainable().items() if p in grads}


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: GceConfig
    codec: FeatureCodec
    params: dict[str, np.ndarray]
    optimizer: AdamState = field(default_factory=AdamState)
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: GceModel, codec: FeatureCodec, optimizer: AdamState | None = None, **metadata):
        return cls(
            GceConfig(**asdict(model.config)),
            codec,
            {k: v.data.copy() for k, v in model.params.items()},
            optimizer or AdamState(),
            dict(metadata),
        )

    def to_model(self) -> GceModel:
        model = GceModel.init(GceConfig(**asdict(self.config)))
        if set(model.params) != set(self.params):
            missing = sorted(set(model.params) ^ set(self.params))
            raise CheckpointError(f"checkpoint parameters do not match config: {missing[:5]}")
        for name, value in self.params.items():
            model.params[name].data = value.copy()
        return model

    @property
    def epoch(self) -> int:
        return int(self.metadata.get("epoch", 0))


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "format_version": ckpt.version,
        "config": ckpt.config.to_json(),
        "codec": ckpt.codec.to_json(),
        "optimizer_step": ckpt.optimizer.step,
        "metadata": ckpt.metadata,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam.m/{k}", v) for k, v in ckpt.optimizer.m.items()]
    tensors += [(f"adam.v/{k}", v) for k, v in ckpt.optimizer.v.items()]
    body = MAGIC + struct.pack("<I", ckpt.version) + struct.pack("<Q", len(blob)) + blob
    body += struct.pack("<I", len(tensors)) + b"".join(_pack_tensor(n, a) for n, a in tensors)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 + 8 + 4 + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted file)")
    if body[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", body, pos + 4)
    pos += 12
    meta = json.loads(body[pos : pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4 : pos + 4 + nlen].decode()
        pos += 4 + nlen
        (ndim,) = struct.unpack_from("<I", body, pos)
        shape = struct.unpack_from(f"<{ndim}Q", body, pos + 4)
        pos += 4 + 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        kind, key = name.split("/", 1)
        {"param": params, "adam.m": m, "adam.v": v}[kind][key] = arr
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(
        GceConfig.from_json(meta["config"]),
        FeatureCodec.from_json(meta["codec"]),
        params,
        AdamState(meta["optimizer_step"], m, v),
        meta["metadata"],
        version,
    )


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# pretraining


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start : start + size]


def pretrain_step(model: GceModel, graphs: Sequence[Graph], codec: FeatureCodec, rngs, cfg: TrainConfig):
    """Corrupt, reconstruct and return ``(loss, grads)`` for one batch."""
    pairs = [
        corrupt(g, codec, rng, cfg.mask_rate, cfg.edge_mask_rate, cfg.pseudo_edges)
        for g, rng in zip(graphs, rngs)
    ]
    masked = batch_graphs([p.masked for p in pairs])
    truth = batch_graphs([p.ground_truth for p in pairs])
    with T.Tape() as tape:
        x_hat, e_hat = forward(model, masked)
        loss = reconstruction_loss(x_hat, e_hat, truth.graph, cfg.edge_weight)
    grads = T.backward(loss, tape)
    return loss.item(), named_grads(model, grads)


def pretrain(
    graphs: Sequence[Graph],
    codec: FeatureCodec,
    gce_config: GceConfig | None,
    train_config: TrainConfig,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, list[float]]:
    """Train the reconstruction model; runs ``train_config.epochs`` further epochs.

    Returns the final checkpoint and the full per-epoch loss history
    (including epochs recorded in ``resume``).
    """
    if not graphs:
        raise ContractError("pretraining needs a nonempty dataset")
    for k, g in enumerate(graphs):
        if g.x.shape[1] != codec.node_dim or g.e.shape[1] != codec.edge_dim:
            raise ContractError(f"graph {k} does not match the dataset codec")
    if resume is not None:
        model = resume.to_model()
        state = AdamState(resume.optimizer.step, dict(resume.optimizer.m), dict(resume.optimizer.v))
        history = list(resume.metadata.get("loss_history", []))
        start = resume.epoch
    else:
        model = GceModel.init(gce_config)
        state, history, start = AdamState(), [], 0
    cfg = train_config
    for epoch in range(start, start + cfg.epochs):
        order = stream(cfg.seed, STREAM_SHUFFLE, epoch).permutation(len(graphs))
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(order, cfg.batch_size)):
            rngs = [stream(cfg.seed, STREAM_MASK, epoch, int(i)) for i in idx]
            try:
                loss, grads = pretrain_step(model, [graphs[i] for i in idx], codec, rngs, cfg)
                adam_step(model.trainable(), grads, state, cfg)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from None
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
        log.info("epoch %d loss %.6f", epoch + 1, history[-1])
    ckpt = Checkpoint.from_model(
        model,
        codec,
        state,
        kind="pretrain",
        epoch=start + cfg.epochs,
        loss_history=history,
        train_config=cfg.to_json(),
    )
    return ckpt, history


def evaluate_masked_accuracy(
    model: GceModel, graphs: Sequence[Graph], codec: FeatureCodec, cfg: TrainConfig, seed: int, rounds: int = 1
) -> float:
    """Share of masked nodes whose argmax reconstruction recovers the true category."""
    hits = total = 0
    for r in range(rounds):
        for k, g in enumerate(graphs):
            pair = corrupt(g, codec, stream(seed, STREAM_MASK, 10**6 + r, k), cfg.mask_rate,
                           cfg.edge_mask_rate, cfg.pseudo_edges)
            x_hat, _ = forward(model, pair.masked)
            omega = pair.plan.masked_nodes
            pred = np.argmax(x_hat.data[omega], axis=1)
            hits += int(np.sum(pred == g.node_categories()[omega]))
            total += len(omega)
    return hits / total if total else 1.0


# ---------------------------------------------------------------------------
# transfer and supervised training


@dataclass
class TransferReport:
    loaded: list[str]
    initialized: list[str]


def transfer_weights(pretrained: Checkpoint, classifier_config: GceConfig) -> tuple[GceModel, TransferReport]:
    """Initialise a classifier from a reconstruction checkpoint; the head stays fresh."""
    if classifier_config.num_classes is None:
        raise TransferError("classifier config needs num_classes")
    model = GceModel.init(classifier_config)
    loaded, initialized = [], []
    for name, p in model.params.items():
        if model.is_head_param(name):
            initialized.append(name)
            continue
        src = pretrained.params.get(name)
        if src is None:
            if model.is_encoder_param(name):
                raise TransferError(f"pretrained checkpoint lacks encoder tensor {name!r}")
            initialized.append(name)
            continue
        if src.shape != p.shape:
            raise TransferError(f"tensor {name!r}: checkpoint shape {src.shape} vs model {p.shape}")
        p.data = src.copy()
        loaded.append(name)
    return model, TransferReport(loaded, initialized)


def classification_accuracy(model: GceModel, graphs: Sequence[Graph], batch_size: int = 64) -> float:
    if not graphs:
        return math.nan
    hits = 0
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start : start + batch_size]
        logits = classifier_forward(model, batch_graphs(chunk)).data
        hits += int(np.sum(np.argmax(logits, axis=1) == np.array([g.label for g in chunk])))
    return hits / len(graphs)


def split_dataset(graphs: Sequence[Graph], val_fraction: float, seed: int):
    n = len(graphs)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    order = stream(seed, STREAM_SPLIT).permutation(n)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [graphs[i] for i in train], [graphs[i] for i in val]


def train_classifier(
    graphs: Sequence[Graph],
    model: GceModel,
    codec: FeatureCodec,
    train_config: TrainConfig,
) -> tuple[Checkpoint, list[dict]]:
    """Softmax cross-entropy training of ``classifier_forward``; per-epoch accuracy history."""
    n_classes = model.config.num_classes
    if n_classes is None:
        raise ContractError("model has no classifier head")
    for k, g in enumerate(graphs):
        if g.label is None or not 0 <= g.label < n_classes:
            raise DataError(f"graph {k}: label {g.label} outside [0, {n_classes})")
    if len({g.label for g in graphs}) < 2:
        warnings.warn("classifier dataset holds a single class", stacklevel=2)
    cfg = train_config
    train, val = split_dataset(graphs, cfg.val_fraction, cfg.seed)
    state = AdamState()
    history = []
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, STREAM_SHUFFLE, epoch).permutation(len(train))
        total = 0.0
        for idx in _batches(order, cfg.batch_size):
            chunk = [train[i] for i in idx]
            with T.Tape() as tape:
                logits = classifier_forward(model, batch_graphs(chunk))
                loss = T.softmax_cross_entropy(logits, [g.label for g in chunk])
            grads = named_grads(model, T.backward(loss, tape))
            adam_step(model.trainable(), grads, state, cfg)
            total += loss.item() * len(idx)
        row = {
            "epoch": epoch + 1,
            "loss": total / len(train),
            "train_acc": classification_accuracy(model, train),
            "val_acc": classification_accuracy(model, val),
        }
        history.append(row)
        log.info("epoch %d loss %.5f train_acc %.3f", epoch + 1, row["loss"], row["train_acc"])
    ckpt = Checkpoint.from_model(
        model,
        codec,
        state,
        kind="classifier",
        epoch=cfg.epochs,
        history=history,
        train_config=cfg.to_json(),
    )
    return ckpt, history


def write_log(path, rows: Sequence[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
