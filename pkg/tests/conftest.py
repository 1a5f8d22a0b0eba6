import numpy as np
import pytest

from gce.graph import Graph
from gce.model import GceConfig
from gce.molecule import molecule_codec, molecule_to_graph, parse_smiles, toy_corpus
from gce.training import TrainConfig, pretrain

OVERFIT_EPOCHS = 200


@pytest.fixture(scope="session")
def codec():
    return molecule_codec()


@pytest.fixture(scope="session")
def corpus_smiles():
    return toy_corpus()


@pytest.fixture(scope="session")
def corpus_mols(corpus_smiles):
    return [parse_smiles(s) for s in corpus_smiles]


@pytest.fixture(scope="session")
def corpus_graphs(corpus_mols, codec):
    return [molecule_to_graph(m, codec) for m in corpus_mols]


@pytest.fixture(scope="session")
def overfit_run(corpus_graphs, codec):
    """Reconstruction model trained on the toy corpus with the default settings."""
    cfg = GceConfig(codec.node_dim, codec.edge_dim, num_layers=6, hidden_channels=50)
    ckpt, history = pretrain(corpus_graphs, codec, cfg, TrainConfig(epochs=OVERFIT_EPOCHS, seed=0))
    return ckpt, history


@pytest.fixture(scope="session")
def overfit_model(overfit_run):
    return overfit_run[0].to_model()


def random_graph(rng, n, m, codec, node_cats=None, edge_cats=None, label=None) -> Graph:
    """Random simple graph with ``n`` nodes and ``m`` undirected edges."""
    all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    m = min(m, len(all_pairs))
    pick = rng.choice(len(all_pairs), size=m, replace=False)
    pairs = [all_pairs[k] for k in sorted(pick.tolist())]
    node_cats = node_cats or codec.node_dim
    edge_cats = edge_cats or codec.edge_dim
    xs = rng.integers(0, node_cats, size=n).tolist()
    es = rng.integers(0, edge_cats, size=m).tolist()
    return Graph.from_undirected(n, pairs, xs, es, codec, label)


def small_config(codec, **kw) -> GceConfig:
    base = dict(num_layers=4, hidden_channels=8, seed=0)
    base.update(kw)
    return GceConfig(codec.node_dim, codec.edge_dim, **base)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12))


def min_score_gap(model, data) -> float:
    """Smallest gap between pooling scores of two nodes of the same graph, over all levels."""
    from gce.model import forward

    _, _, records = forward(model, data, return_records=True)
    gap = np.inf
    for rec in records:
        for g in np.unique(rec.graph_of_node):
            s = np.sort(rec.scores[rec.graph_of_node == g])
            if s.size > 1:
                gap = min(gap, float(np.min(np.diff(s))))
    return gap


# one line per acceptance criterion, printed after the run
CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(k: int, ok: bool, detail: str) -> None:
    CRITERIA[k] = (ok, detail)
    print(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]
        terminalreporter.write_line(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}")
