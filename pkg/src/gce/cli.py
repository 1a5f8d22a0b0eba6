"""``gce`` command line: pretrain, finetune, generate, evaluate, reconstruct, inspect.

Settings come from an optional ``key=value`` config file, then ``--set``
overrides. Every run that writes to ``--out`` leaves a ``manifest.json``
holding the resolved settings, so the run can be replayed exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from . import __version__
from .errors import ConfigurationError, ContractError, GceError, LoadError
from .generation import (
    GenerationConfig,
    evaluate_generation,
    generate_nshot,
    reconstruct_once,
    save_generation,
)
from .graph import load_dataset
from .model import PRESETS, GceConfig
from .molecule import (
    Molecule,
    graph_to_molecule,
    molecule_codec,
    molecule_to_graph,
    parse_smiles,
    read_smiles_file,
    write_fragments,
    write_smiles,
)
from .training import (
    FORMAT_VERSION,
    STREAM_GENERATE,
    TrainConfig,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    stream,
    train_classifier,
    transfer_weights,
    write_log,
)

log = logging.getLogger("gce")

COMMANDS = ("pretrain", "finetune", "generate", "evaluate", "reconstruct", "inspect")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, keys or values; reported with exit code 2."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("none", "") else float(text)


# key -> (parser, section, field name)
SETTINGS: dict[str, tuple[Callable[[str], object], str, str]] = {
    "learning_rate": (float, "train", "learning_rate"),
    "lr": (float, "train", "learning_rate"),
    "epochs": (int, "train", "epochs"),
    "batch_size": (int, "train", "batch_size"),
    "mask_rate": (float, "train", "mask_rate"),
    "edge_mask_rate": (_optional_float, "train", "edge_mask_rate"),
    "edge_weight": (float, "train", "edge_weight"),
    "lambda": (float, "train", "edge_weight"),
    "pseudo_edges": (int, "train", "pseudo_edges"),
    "beta1": (float, "train", "beta1"),
    "beta2": (float, "train", "beta2"),
    "adam_eps": (float, "train", "adam_eps"),
    "val_fraction": (float, "train", "val_fraction"),
    "num_layers": (int, "model", "num_layers"),
    "hidden_channels": (int, "model", "hidden_channels"),
    "pooling_rate": (float, "model", "pooling_rate"),
    "epsilon": (float, "model", "epsilon"),
    "train_epsilon": (_parse_bool, "model", "train_epsilon"),
    "use_residual": (_parse_bool, "model", "use_residual"),
    "edge_update_all_layers": (_parse_bool, "model", "edge_update_all_layers"),
    "preset": (str, "model", "preset"),
    "shots": (int, "generate", "shots"),
    "num_samples": (int, "generate", "num_samples"),
    "sanitize": (_parse_bool, "generate", "sanitize"),
    "seed": (int, "run", "seed"),
}


@dataclass
class RunConfig:
    command: str
    data: Path | None = None
    out: Path | None = None
    config_path: Path | None = None
    model: Path | None = None
    smiles: str | None = None
    generated: Path | None = None
    reference: Path | None = None
    training: Path | None = None
    mask_rate: float | None = None
    seed: int = 0
    threads: int = 1
    settings: dict[str, object] = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return {SETTINGS[k][2]: v for k, v in self.settings.items() if SETTINGS[k][1] == name}

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.section("train"))

    def model_config(self, node_dim: int, edge_dim: int, num_classes: int | None = None) -> GceConfig:
        opts = self.section("model")
        preset = opts.pop("preset", None)
        if preset and preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}")
        base = dict(PRESETS[preset]) if preset else {}
        base.update(opts)
        return GceConfig(node_dim, edge_dim, num_classes=num_classes, seed=self.seed, **base)

    def generation_config(self) -> GenerationConfig:
        opts = self.section("generate")
        train = self.section("train")
        mask_rate = self.mask_rate if self.mask_rate is not None else train.get("mask_rate", 0.1)
        return GenerationConfig(
            mask_rate=mask_rate,
            pseudo_edges=train.get("pseudo_edges", 5),
            seed=self.seed,
            **opts,
        )

    def manifest(self) -> dict:
        def plain(v):
            return str(v) if isinstance(v, Path) else v

        return {
            "command": self.command,
            "package_version": __version__,
            "checkpoint_format_version": FORMAT_VERSION,
            "seed": self.seed,
            "threads": self.threads,
            "inputs": {
                k: plain(getattr(self, k))
                for k in ("data", "model", "smiles", "generated", "reference", "training", "mask_rate")
                if getattr(self, k) is not None
            },
            "settings": {k: self.settings[k] for k in sorted(self.settings)},
        }


def parse_setting(key: str, value: str) -> tuple[str, object]:
    key = key.strip()
    if key not in SETTINGS:
        raise UsageError(f"unknown config key {key!r}")
    parser = SETTINGS[key][0]
    try:
        parsed = parser(value.strip())
    except ValueError:
        raise UsageError(f"bad value for {key!r}: {value.strip()!r}") from None
    # aliases collapse onto the canonical key so the manifest has one spelling
    canonical = {"lr": "learning_rate", "lambda": "edge_weight"}.get(key, key)
    return canonical, parsed


def read_config_file(path: Path) -> list[tuple[str, str]]:
    items = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        items.append((key, value))
    return items


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gce", description="Graph Context Encoder runs")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--data", type=Path, help="graph dataset (.jsonl) or SMILES file (.smi)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--config", type=Path, dest="config_path", help="key=value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a setting")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--model", type=Path, help="checkpoint file")
    p.add_argument("--smiles", help="SMILES string (reconstruct)")
    p.add_argument("--mask-rate", type=float, dest="mask_rate")
    p.add_argument("--generated", type=Path, help="generated SMILES file (evaluate)")
    p.add_argument("--reference", type=Path, help="reference SMILES file (evaluate)")
    p.add_argument("--training", type=Path, help="training SMILES file for novelty (evaluate)")
    p.add_argument("--threads", type=int, default=1, help="worker cap (runs are single-threaded)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


REQUIRED = {
    "pretrain": ("data", "out"),
    "finetune": ("data", "model", "out"),
    "generate": ("data", "model", "out"),
    "evaluate": ("generated", "reference"),
    "reconstruct": ("model", "smiles"),
    "inspect": ("model",),
}


def parse_args(argv: list[str]) -> RunConfig:
    """Parse argv into a RunConfig; raises UsageError (or SystemExit from argparse)."""
    ns = build_parser().parse_args(argv)
    raw: list[tuple[str, str]] = []
    if ns.config_path is not None:
        if not ns.config_path.is_file():
            raise UsageError(f"config file {ns.config_path} does not exist")
        raw += read_config_file(ns.config_path)
    for item in ns.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        raw.append(tuple(item.split("=", 1)))
    settings = dict(parse_setting(k, v) for k, v in raw)
    seed = settings.pop("seed", 0)
    if ns.seed is not None:
        seed = ns.seed
    cfg = RunConfig(
        command=ns.command,
        data=ns.data,
        out=ns.out,
        config_path=ns.config_path,
        model=ns.model,
        smiles=ns.smiles,
        generated=ns.generated,
        reference=ns.reference,
        training=ns.training,
        mask_rate=ns.mask_rate,
        seed=seed,
        threads=ns.threads,
        settings=settings,
    )
    for name in REQUIRED[cfg.command]:
        if getattr(cfg, name) is None:
            raise UsageError(f"{cfg.command} requires --{name.replace('_', '-')}")
    for name in ("data", "model", "generated", "reference", "training", "config_path"):
        path = getattr(cfg, name)
        if path is not None and not path.exists():
            raise UsageError(f"--{name} path {path} does not exist")
    if cfg.threads < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# data helpers


def load_graphs(path: Path):
    """Graphs and codec from a .jsonl dataset or a .smi file (molecule codec)."""
    if path.suffix == ".smi":
        codec = molecule_codec()
        graphs = []
        for k, text in enumerate(read_smiles_file(path)):
            try:
                graphs.append(molecule_to_graph(parse_smiles(text), codec))
            except GceError as exc:
                raise LoadError(f"{path}: entry {k + 1} ({text!r}): {exc}") from None
        return graphs, codec
    return load_dataset(path)


def load_molecules(path: Path):
    texts = read_smiles_file(path)
    mols = []
    for k, text in enumerate(texts):
        try:
            mols.append(parse_smiles(text))
        except GceError as exc:
            raise LoadError(f"{path}: entry {k + 1} ({text!r}): {exc}") from None
    return texts, mols


def load_generated(path: Path):
    """Generated SMILES may hold '.'-joined fragments; those count as invalid molecules."""
    mols = []
    for k, text in enumerate(read_smiles_file(path)):
        parts = text.split(".")
        try:
            pieces = [parse_smiles(p) for p in parts]
        except GceError as exc:
            raise LoadError(f"{path}: entry {k + 1} ({text!r}): {exc}") from None
        atoms, bonds, offset = [], [], 0
        for m in pieces:
            atoms += m.atoms
            bonds += [(i + offset, j + offset, o) for i, j, o in m.bonds]
            offset += m.num_atoms
        mols.append(Molecule(tuple(atoms), tuple(bonds)))
    return mols


class Outputs:
    """Tracks files written into --out so a failed run can remove them."""

    def __init__(self, out: Path | None):
        self.out = out
        self.created_dir = False
        self.files: list[Path] = []
        self.resolved: dict = {}

    def __enter__(self):
        if self.out is not None:
            self.created_dir = not self.out.exists()
            self.out.mkdir(parents=True, exist_ok=True)
        return self

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None or self.out is None:
            return False
        if self.created_dir:
            shutil.rmtree(self.out, ignore_errors=True)
        else:
            for p in self.files:
                p.unlink(missing_ok=True)
        return False


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: RunConfig, out: Outputs) -> None:
    graphs, codec = load_graphs(cfg.data)
    gce_cfg = cfg.model_config(codec.node_dim, codec.edge_dim)
    train_cfg = cfg.train_config()
    out.resolved = {"model": gce_cfg.to_json(), "train": train_cfg.to_json(), "codec": codec.to_json()}
    ckpt, history = pretrain(graphs, codec, gce_cfg, train_cfg)
    save_checkpoint(out.path("model.ckpt"), ckpt)
    write_log(out.path("log.csv"), [{"epoch": k + 1, "loss": v} for k, v in enumerate(history)])
    print(f"pretrained {len(graphs)} graphs for {len(history)} epochs; final loss {history[-1]:.6f}")


def cmd_finetune(cfg: RunConfig, out: Outputs) -> None:
    graphs, codec = load_graphs(cfg.data)
    pre = load_checkpoint(cfg.model)
    if pre.codec != codec:
        raise ContractError("dataset codec differs from the checkpoint codec")
    labels = [g.label for g in graphs]
    if any(lab is None for lab in labels):
        raise LoadError(f"{cfg.data}: every graph needs a label for fine-tuning")
    model_cfg = GceConfig(**{**asdict(pre.config), "num_classes": max(labels) + 1, "seed": cfg.seed})
    train_cfg = cfg.train_config()
    out.resolved = {"model": model_cfg.to_json(), "train": train_cfg.to_json(), "codec": codec.to_json()}
    model, report = transfer_weights(pre, model_cfg)
    ckpt, history = train_classifier(graphs, model, codec, train_cfg)
    save_checkpoint(out.path("classifier.ckpt"), ckpt)
    write_log(out.path("log.csv"), history)
    _write_json(out.path("transfer.json"), {"loaded": report.loaded, "initialized": report.initialized})
    last = history[-1]
    print(f"fine-tuned {len(graphs)} graphs; train_acc {last['train_acc']:.3f} val_acc {last['val_acc']:.3f}")


def cmd_generate(cfg: RunConfig, out: Outputs) -> None:
    ckpt = load_checkpoint(cfg.model)
    texts, seeds = load_molecules(cfg.data)
    gen_cfg = cfg.generation_config()
    out.resolved = {"generation": asdict(gen_cfg)}
    generated = generate_nshot(ckpt.to_model(), seeds, gen_cfg, ckpt.codec, texts)
    out.files += [out.out / "generated.smi", out.out / "provenance.json"]
    save_generation(out.out, generated, gen_cfg)
    valid = sum(g.valid for g in generated)
    print(f"generated {len(generated)} molecules ({valid} valid) with {gen_cfg.shots}-shot masking")


def cmd_evaluate(cfg: RunConfig, out: Outputs) -> None:
    generated = load_generated(cfg.generated)
    _, reference = load_molecules(cfg.reference)
    training = load_molecules(cfg.training)[1] if cfg.training is not None else None
    report = evaluate_generation(generated, reference, training)
    text = json.dumps(report.to_json(), indent=1, sort_keys=True)
    print(text)
    if out.out is not None:
        out.path("metrics.json").write_text(text + "\n")
        out.path("metrics.csv").write_text(report.csv_row())


def cmd_reconstruct(cfg: RunConfig, out: Outputs) -> None:
    ckpt = load_checkpoint(cfg.model)
    codec = ckpt.codec
    mol = parse_smiles(cfg.smiles)
    rate = cfg.mask_rate if cfg.mask_rate is not None else 0.1
    pseudo = cfg.section("train").get("pseudo_edges", 5)
    rng = stream(cfg.seed, STREAM_GENERATE, 0)
    _, decoded, plan = reconstruct_once(ckpt.to_model(), molecule_to_graph(mol, codec), codec, rng, rate, pseudo)
    labels = ["*" if k in plan["masked_nodes"] else a for k, a in enumerate(mol.atoms)]
    print(f"masked:        {write_smiles(mol, labels)}")
    print(f"reconstructed: {write_fragments(graph_to_molecule(decoded, codec))}")
    if out.out is not None:
        _write_json(out.path("reconstruction.json"), {
            "input": cfg.smiles,
            "plan": plan,
            "output": write_fragments(graph_to_molecule(decoded, codec)),
        })


def cmd_inspect(cfg: RunConfig, out: Outputs) -> None:
    ckpt = load_checkpoint(cfg.model)
    print(f"format version {ckpt.version}; optimizer step {ckpt.optimizer.step}")
    print("config " + json.dumps(ckpt.config.to_json(), sort_keys=True))
    print("codec  " + json.dumps(ckpt.codec.to_json(), sort_keys=True))
    meta = {k: v for k, v in ckpt.metadata.items() if k not in ("loss_history", "history")}
    print("meta   " + json.dumps(meta, sort_keys=True))
    width = max(len(n) for n in ckpt.params)
    for name in sorted(ckpt.params):
        arr = ckpt.params[name]
        print(f"{name:<{width}}  shape={str(arr.shape):<10} mean={arr.mean():+.5f} std={arr.std():.5f}")


HANDLERS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
    "inspect": cmd_inspect,
}


def run(cfg: RunConfig) -> int:
    try:
        with Outputs(cfg.out) as out:
            HANDLERS[cfg.command](cfg, out)
            if cfg.out is not None:
                manifest = cfg.manifest()
                manifest["resolved"] = out.resolved
                manifest["outputs"] = {p.name: _file_digest(p) for p in sorted(out.files) if p.exists()}
                _write_json(out.path("manifest.json"), manifest)
    except (GceError, OSError, ValueError) as exc:
        print(f"gce {cfg.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except UsageError as exc:
        print(f"gce: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(message)s")
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
