import csv
import hashlib
import struct

import numpy as np
import pytest

from conftest import small_config
from gce import tensor as T
from gce.errors import CheckpointError, ContractError, DataError, NumericError, TransferError
from gce.graph import batch_graphs, synth_dataset
from gce.masking import corrupt, reconstruction_loss
from gce.model import GceConfig, GceModel, forward
from gce.tensor import Tensor
from gce.training import (
    MAGIC,
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    checkpoint_bytes,
    load_checkpoint,
    named_grads,
    parse_checkpoint,
    pretrain,
    save_checkpoint,
    train_classifier,
    transfer_weights,
    write_log,
)


# --- Adam -----------------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    p = {"w": Tensor([1.0, 1.0])}
    adam_step(p, {"w": np.array([0.5, -0.5])}, AdamState(), TrainConfig(learning_rate=0.01))
    assert np.allclose(p["w"].data, [0.99, 1.01], atol=1e-9)


def test_adam_zero_gradient_leaves_parameters():
    p = {"w": Tensor([0.3, -0.2])}
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, state, TrainConfig())
    assert np.array_equal(p["w"].data, [0.3, -0.2])
    assert state.step == 5


def test_adam_descends_on_quadratic():
    theta = Tensor([1.0], requires_grad=True)
    state, cfg = AdamState(), TrainConfig(learning_rate=0.01)
    values = []
    for _ in range(10):
        with T.Tape() as tape:
            f = T.sum(theta * theta)
        values.append(f.item())
        adam_step({"theta": theta}, {"theta": T.backward(f, tape)[theta]}, state, cfg)
    values.append(float(theta.data[0] ** 2))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_rejects_nan_with_name():
    with pytest.raises(NumericError, match="enc0.theta.0.w"):
        adam_step({"enc0.theta.0.w": Tensor([1.0])}, {"enc0.theta.0.w": np.array([np.nan])}, AdamState(), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(epochs=0)
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0.0)
    d = TrainConfig()
    assert (d.learning_rate, d.epochs, d.mask_rate, d.edge_weight) == (1e-2, 100, 0.1, 2.0)
    assert (d.beta1, d.beta2, d.adam_eps, d.batch_size) == (0.9, 0.999, 1e-8, 32)


# --- descent sanity -------------------------------------------------------------


def test_one_small_step_decreases_frozen_batch_loss(codec, corpus_graphs):
    model = GceModel.init(GceConfig(codec.node_dim, codec.edge_dim))
    pairs = [corrupt(g, codec, np.random.default_rng(k), 0.1) for k, g in enumerate(corpus_graphs[:8])]
    masked = batch_graphs([p.masked for p in pairs])
    truth = batch_graphs([p.ground_truth for p in pairs]).graph

    def batch_loss():
        x_hat, e_hat = forward(model, masked)
        return reconstruction_loss(x_hat, e_hat, truth, 2.0)

    with T.Tape() as tape:
        before = batch_loss()
    grads = named_grads(model, T.backward(before, tape))
    adam_step(model.trainable(), grads, AdamState(), TrainConfig(learning_rate=1e-3))
    assert batch_loss().item() < before.item()


# --- checkpoints ----------------------------------------------------------------


def _tiny_run(codec, graphs, epochs, resume=None, seed=0):
    cfg = small_config(codec, num_layers=2, hidden_channels=6)
    return pretrain(graphs, codec, cfg, TrainConfig(epochs=epochs, batch_size=4, seed=seed), resume)


def test_checkpoint_round_trip_bitwise(tmp_path, codec, corpus_graphs):
    ckpt, _ = _tiny_run(codec, corpus_graphs[:6], 2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert set(back.params) == set(ckpt.params)
    for k in ckpt.params:
        assert back.params[k].tobytes() == ckpt.params[k].tobytes()
    for k in ckpt.optimizer.m:
        assert back.optimizer.m[k].tobytes() == ckpt.optimizer.m[k].tobytes()
        assert back.optimizer.v[k].tobytes() == ckpt.optimizer.v[k].tobytes()
    assert back.optimizer.step == ckpt.optimizer.step
    assert back.config == ckpt.config and back.codec == ckpt.codec
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_preserves_forward(codec, corpus_graphs):
    ckpt, _ = _tiny_run(codec, corpus_graphs[:6], 1)
    a = forward(ckpt.to_model(), corpus_graphs[3])
    b = forward(parse_checkpoint(checkpoint_bytes(ckpt)).to_model(), corpus_graphs[3])
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_truncated_checkpoint_fails_checksum(tmp_path, codec):
    ckpt = Checkpoint.from_model(GceModel.init(small_config(codec)), codec)
    data = checkpoint_bytes(ckpt)
    for cut in (10, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointError):
            parse_checkpoint(data[:cut])


def test_corrupted_checkpoint_fails_checksum(codec):
    data = bytearray(checkpoint_bytes(Checkpoint.from_model(GceModel.init(small_config(codec)), codec)))
    data[200] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        parse_checkpoint(bytes(data))


def test_checkpoint_version_mismatch(codec):
    data = checkpoint_bytes(Checkpoint.from_model(GceModel.init(small_config(codec)), codec))
    body = bytearray(data[:-32])
    struct.pack_into("<I", body, len(MAGIC), 99)
    with pytest.raises(CheckpointError, match="version 99"):
        parse_checkpoint(bytes(body) + hashlib.sha256(bytes(body)).digest())


def test_checkpoint_bad_magic():
    body = b"NOTACKPT" + bytes(40)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        parse_checkpoint(body + hashlib.sha256(body).digest())


# --- pretraining ----------------------------------------------------------------


def test_one_epoch_one_graph_is_one_step(codec, corpus_graphs):
    ckpt, history = _tiny_run(codec, corpus_graphs[:1], 1)
    assert ckpt.optimizer.step == 1 and len(history) == 1


def test_pretrain_is_deterministic(codec, corpus_graphs):
    _, h1 = _tiny_run(codec, corpus_graphs[:8], 3)
    _, h2 = _tiny_run(codec, corpus_graphs[:8], 3)
    assert h1 == h2


def test_pretrain_rejects_empty_and_mismatched(codec, corpus_graphs):
    with pytest.raises(ContractError):
        _tiny_run(codec, [], 1)
    with pytest.raises(ContractError):
        _tiny_run(codec, synth_dataset("cycles_vs_paths", 4, (4, 5), 0), 1)


def test_resume_equivalence(tmp_path, codec, corpus_graphs):
    graphs = corpus_graphs[:10]
    full, h_full = _tiny_run(codec, graphs, 4)
    half, _ = _tiny_run(codec, graphs, 2)
    path = tmp_path / "half.ckpt"
    save_checkpoint(path, half)
    resumed, h_resumed = _tiny_run(codec, graphs, 2, resume=load_checkpoint(path))
    assert h_resumed == h_full
    # the metadata differs only in the recorded epoch count of the last leg
    assert resumed.epoch == full.epoch == 4
    assert resumed.optimizer.step == full.optimizer.step
    for k in full.params:
        assert resumed.params[k].tobytes() == full.params[k].tobytes()
        assert resumed.optimizer.m[k].tobytes() == full.optimizer.m[k].tobytes()


# --- transfer and fine-tuning ---------------------------------------------------


def test_transfer_copies_encoder_and_fresh_head(codec, corpus_graphs):
    ckpt, _ = _tiny_run(codec, corpus_graphs[:4], 1)
    cfg = small_config(codec, num_layers=2, hidden_channels=6, num_classes=2, seed=5)
    model, report = transfer_weights(ckpt, cfg)
    assert report.loaded and all(model.params[n].data.tobytes() == ckpt.params[n].tobytes() for n in report.loaded)
    assert all(model.is_encoder_param(n) or n.startswith(("dec", "node_out", "edge_out")) for n in report.loaded)
    heads = [n for n in report.initialized if n.startswith("head.")]
    assert len(heads) == 4
    stored = [v.tobytes() for v in ckpt.params.values()]
    assert all(model.params[n].data.tobytes() not in stored for n in heads)


def test_transfer_width_mismatch(codec, corpus_graphs):
    ckpt, _ = _tiny_run(codec, corpus_graphs[:4], 1)
    with pytest.raises(TransferError, match="node_in"):
        transfer_weights(ckpt, small_config(codec, num_layers=2, hidden_channels=7, num_classes=2))


def test_transfer_needs_classes(codec, corpus_graphs):
    ckpt, _ = _tiny_run(codec, corpus_graphs[:4], 1)
    with pytest.raises(TransferError):
        transfer_weights(ckpt, small_config(codec, num_layers=2, hidden_channels=6))


def _classifier(codec, seed=0):
    return GceModel.init(small_config(codec, num_layers=2, hidden_channels=6, num_classes=2, seed=seed))


def test_train_classifier_single_class_warns(codec):
    # every graph is a path (label 0); a one-class head is trivially right
    graphs = [g for g in synth_dataset("cycles_vs_paths", 10, (4, 6), 0, codec) if g.label == 0]
    model = GceModel.init(small_config(codec, num_layers=2, hidden_channels=6, num_classes=1))
    with pytest.warns(UserWarning, match="single class"):
        _, rows = train_classifier(graphs, model, codec, TrainConfig(epochs=1))
    assert rows[-1]["train_acc"] == 1.0


def test_train_classifier_label_out_of_range(codec):
    graphs = synth_dataset("cycles_vs_paths", 4, (4, 6), 0, codec)
    model = _classifier(codec)
    model.config.num_classes = 1
    with pytest.raises(DataError):
        train_classifier(graphs, model, codec, TrainConfig(epochs=1))


def test_train_classifier_deterministic(codec):
    graphs = synth_dataset("cycles_vs_paths", 12, (4, 6), 0, codec)
    _, a = train_classifier(graphs, _classifier(codec), codec, TrainConfig(epochs=3, learning_rate=1e-3))
    _, b = train_classifier(graphs, _classifier(codec), codec, TrainConfig(epochs=3, learning_rate=1e-3))
    assert a == b
    assert set(a[0]) == {"epoch", "loss", "train_acc", "val_acc"}


def test_write_log(tmp_path):
    path = tmp_path / "log.csv"
    write_log(path, [{"epoch": 1, "loss": 0.5}, {"epoch": 2, "loss": 0.25}])
    rows = list(csv.reader(path.open()))
    assert rows == [["epoch", "loss"], ["1", "0.5"], ["2", "0.25"]]
