"""Kekulized SMILES subset, valence checks, canonical keys and descriptors.

Grammar: organic-subset atoms ``C N O F S P Cl Br``, bond symbols ``- = #``,
branches ``( )`` and ring-closure digits ``1``-``9``. No aromatic atoms,
charges, brackets, stereo marks or dot-separated fragments.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError, ConversionError, SmilesParseError
from .graph import MASKED, NO_BOND, FeatureCodec, Graph

ELEMENTS = ("C", "N", "O", "F", "S", "Cl", "Br", "P")
VALENCES: dict[str, tuple[int, ...]] = {
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "F": (1,),
    "S": (2, 4, 6),
    "Cl": (1,),
    "Br": (1,),
    "P": (3, 5),
}
MASSES = {
    "H": 1.008,
    "C": 12.011,
    "N": 14.007,
    "O": 15.999,
    "F": 18.998,
    "S": 32.06,
    "Cl": 35.45,
    "Br": 79.904,
    "P": 30.974,
}
BOND_NAMES = {1: "single", 2: "double", 3: "triple"}
BOND_ORDERS = {name: order for order, name in BOND_NAMES.items()}
_BOND_SYMBOLS = {"-": 1, "=": 2, "#": 3}
_BOND_TEXT = {1: "", 2: "=", 3: "#"}


def molecule_codec() -> FeatureCodec:
    return FeatureCodec(ELEMENTS, ("single", "double", "triple", NO_BOND, MASKED))


@dataclass(frozen=True)
class Molecule:
    atoms: tuple[str, ...]
    bonds: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        atoms = tuple(self.atoms)
        seen = set()
        bonds = []
        for i, j, order in self.bonds:
            i, j, order = int(i), int(j), int(order)
            if i == j:
                raise ContractError(f"bond ({i},{j}) joins an atom to itself")
            if not (0 <= i < len(atoms) and 0 <= j < len(atoms)):
                raise ContractError(f"bond ({i},{j}) outside {len(atoms)} atoms")
            if order not in BOND_NAMES:
                raise ContractError(f"unsupported bond order {order}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ContractError(f"duplicate bond {key}")
            seen.add(key)
            bonds.append((key[0], key[1], order))
        for a in atoms:
            if a not in VALENCES:
                raise ContractError(f"unsupported element {a!r}")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "bonds", tuple(bonds))

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    def bond_order_sums(self) -> list[int]:
        sums = [0] * len(self.atoms)
        for i, j, order in self.bonds:
            sums[i] += order
            sums[j] += order
        return sums

    def neighbors(self) -> list[list[tuple[int, int]]]:
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for i, j, order in self.bonds:
            adj[i].append((j, order))
            adj[j].append((i, order))
        return adj

    @property
    def implicit_hydrogens(self) -> list[int]:
        """Hydrogens filling each atom up to its smallest sufficient valence (0 if exceeded)."""
        out = []
        for atom, used in zip(self.atoms, self.bond_order_sums()):
            fits = [v for v in VALENCES[atom] if v >= used]
            out.append(fits[0] - used if fits else 0)
        return out

    def components(self) -> list[list[int]]:
        adj = self.neighbors()
        seen = [False] * len(self.atoms)
        comps = []
        for start in range(len(self.atoms)):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                v = stack.pop()
                comp.append(v)
                for u, _ in adj[v]:
                    if not seen[u]:
                        seen[u] = True
                        stack.append(u)
            comps.append(sorted(comp))
        return comps


# ---------------------------------------------------------------------------
# parsing


def parse_smiles(text: str) -> Molecule:
    atoms: list[str] = []
    bonds: list[tuple[int, int, int]] = []
    bonded: set[tuple[int, int]] = set()
    prev: int | None = None
    pending: tuple[int, int] | None = None  # (order, offset)
    branches: list[tuple[int, int, int]] = []  # (atom, atom count at open, offset)
    rings: dict[str, tuple[int, int | None, int]] = {}

    def add_bond(a: int, b: int, order: int, offset: int) -> None:
        key = (min(a, b), max(a, b))
        if a == b:
            raise SmilesParseError("ring closure onto the same atom", offset)
        if key in bonded:
            raise SmilesParseError(f"duplicate bond between atoms {key}", offset)
        bonded.add(key)
        bonds.append((key[0], key[1], order))

    if not text:
        raise SmilesParseError("empty SMILES", 0)
    pos = 0
    while pos < len(text):
        ch = text[pos]
        two = text[pos : pos + 2]
        if two in ("Cl", "Br") or ch in "CNOFSP":
            symbol = two if two in ("Cl", "Br") else ch
            idx = len(atoms)
            atoms.append(symbol)
            if prev is not None:
                add_bond(prev, idx, pending[0] if pending else 1, pos)
            elif pending is not None:
                raise SmilesParseError("bond to nothing", pending[1])
            pending = None
            prev = idx
            pos += len(symbol)
            continue
        if ch in _BOND_SYMBOLS:
            if prev is None or pending is not None:
                raise SmilesParseError("bond to nothing", pos)
            pending = (_BOND_SYMBOLS[ch], pos)
        elif ch == "(":
            if prev is None or pending is not None:
                raise SmilesParseError("branch with no preceding atom", pos)
            branches.append((prev, len(atoms), pos))
        elif ch == ")":
            if not branches:
                raise SmilesParseError("unmatched ')'", pos)
            if pending is not None:
                raise SmilesParseError("bond to nothing", pending[1])
            anchor, count, open_pos = branches.pop()
            if len(atoms) == count:
                raise SmilesParseError("empty branch", open_pos)
            prev = anchor
        elif ch in "123456789":
            if prev is None:
                raise SmilesParseError("ring digit with no preceding atom", pos)
            if ch in rings:
                partner, order_open, _ = rings.pop(ch)
                order_close = pending[0] if pending else None
                if order_open and order_close and order_open != order_close:
                    raise SmilesParseError(f"conflicting bond orders on ring {ch}", pos)
                add_bond(partner, prev, order_open or order_close or 1, pos)
            else:
                rings[ch] = (prev, pending[0] if pending else None, pos)
            pending = None
        else:
            raise SmilesParseError(f"unknown symbol {ch!r}", pos)
        pos += 1

    if pending is not None:
        raise SmilesParseError("bond to nothing", pending[1])
    if branches:
        raise SmilesParseError("unmatched '('", branches[-1][2])
    if rings:
        digit, (_, _, offset) = min(rings.items(), key=lambda kv: kv[1][2])
        raise SmilesParseError(f"unmatched ring digit {digit}", offset)
    return Molecule(tuple(atoms), tuple(bonds))


def read_smiles_file(path) -> list[str]:
    """Non-empty, non-comment lines of a SMILES file.

    A comment is a line starting with ``#`` or anything after whitespace
    followed by ``#``; a bare ``#`` inside a SMILES is a triple bond.
    """
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        out.append(line.split()[0])
    return out


def toy_corpus() -> list[str]:
    """The 50-molecule toy corpus shipped with the package."""
    return read_smiles_file(Path(__file__).parent / "data" / "toy_corpus.smi")


# ---------------------------------------------------------------------------
# canonical labelling


def _refine(colors: list[int], adj) -> list[int]:
    """Colour refinement to a stable partition; colour ids are isomorphism-invariant."""
    n_classes = len(set(colors))
    for _ in range(len(colors) + 1):
        sigs = [
            (colors[v], tuple(sorted((order, colors[u]) for u, order in adj[v])))
            for v in range(len(colors))
        ]
        table = {s: k for k, s in enumerate(sorted(set(sigs)))}
        colors = [table[s] for s in sigs]
        if len(table) == n_classes:
            break
        n_classes = len(table)
    return colors


def _initial_colors(mol: Molecule, adj) -> list[int]:
    inv = [
        (ELEMENTS.index(a), tuple(sorted(order for _, order in adj[v])))
        for v, a in enumerate(mol.atoms)
    ]
    table = {s: k for k, s in enumerate(sorted(set(inv)))}
    return [table[s] for s in inv]


def _certificate(mol: Molecule, order: Sequence[int]) -> tuple:
    rank = {v: r for r, v in enumerate(order)}
    atoms = tuple(mol.atoms[v] for v in order)
    bonds = tuple(sorted((min(rank[i], rank[j]), max(rank[i], rank[j]), o) for i, j, o in mol.bonds))
    return atoms, bonds


def _orbit_of(v: int, autos: list[list[int]]) -> set[int]:
    orbit, frontier = {v}, [v]
    while frontier:
        w = frontier.pop()
        for g in autos:
            u = g[w]
            if u not in orbit:
                orbit.add(u)
                frontier.append(u)
    return orbit


def canonical_order(mol: Molecule) -> list[int]:
    """Atom indices in canonical order (individualization-refinement search)."""
    n = mol.num_atoms
    if n == 0:
        return []
    adj = mol.neighbors()
    best: dict = {"cert": None, "order": None}
    autos: list[list[int]] = []

    def search(colors: list[int], path: list[int]) -> None:
        colors = _refine(colors, adj)
        cells: dict[int, list[int]] = {}
        for v, c in enumerate(colors):
            cells.setdefault(c, []).append(v)
        target = next((c for c in sorted(cells) if len(cells[c]) > 1), None)
        if target is None:
            order = sorted(range(n), key=lambda v: colors[v])
            cert = _certificate(mol, order)
            if best["cert"] is None or cert < best["cert"]:
                best["cert"], best["order"] = cert, order
            elif cert == best["cert"]:
                gamma = [0] * n
                for a, b in zip(best["order"], order):
                    gamma[a] = b
                autos.append(gamma)
            return
        explored: list[int] = []
        for v in cells[target]:
            fixing = [g for g in autos if all(g[p] == p for p in path)]
            if any(v in _orbit_of(w, fixing) for w in explored):
                continue
            explored.append(v)
            nxt = [2 * c + (1 if c == target and u != v else 0) for u, c in enumerate(colors)]
            search(nxt, path + [v])

    search(_initial_colors(mol, adj), [])
    return best["order"]


def canonical_key(mol: Molecule) -> str:
    """Isomorphism-invariant string for ``mol``."""
    atoms, bonds = _certificate(mol, canonical_order(mol))
    return ",".join(atoms) + "|" + ",".join(f"{i}-{j}:{o}" for i, j, o in bonds)


# ---------------------------------------------------------------------------
# writing


def write_smiles(mol: Molecule, labels: Sequence[str] | None = None) -> str:
    """Canonical SMILES of a connected molecule.

    ``labels`` optionally replaces the printed symbol per atom (used for
    display of masked atoms); the traversal is unaffected.
    """
    comps = mol.components()
    if len(comps) != 1:
        raise ContractError(f"cannot write a molecule with {len(comps)} components")
    order = canonical_order(mol)
    rank = {v: r for r, v in enumerate(order)}
    adj = [sorted(nb, key=lambda t: rank[t[0]]) for nb in mol.neighbors()]
    symbols = list(labels) if labels is not None else list(mol.atoms)

    children: dict[int, list[tuple[int, int]]] = {v: [] for v in range(mol.num_atoms)}
    openings: dict[int, list[tuple[int, int]]] = {v: [] for v in range(mol.num_atoms)}
    closings: dict[int, list[tuple[int, int]]] = {v: [] for v in range(mol.num_atoms)}
    visited = [False] * mol.num_atoms
    used: set[tuple[int, int]] = set()

    def explore(v: int) -> None:
        visited[v] = True
        for u, order in adj[v]:
            key = (min(u, v), max(u, v))
            if key in used:
                continue
            used.add(key)
            if visited[u]:
                # u is an ancestor: the ring bond opens at u and closes at v
                openings[u].append((v, order))
                closings[v].append((u, order))
            else:
                children[v].append((u, order))
                explore(u)

    root = order[0]
    explore(root)

    digits: dict[tuple[int, int], int] = {}
    free = list(range(1, 10))
    out: list[str] = []

    def emit(v: int) -> None:
        out.append(symbols[v])
        release = []
        for u, _ in sorted(closings[v], key=lambda t: rank[t[0]]):
            d = digits.pop((u, v))
            out.append(str(d))
            release.append(d)
        for u, order in sorted(openings[v], key=lambda t: rank[t[0]]):
            if not free:
                raise ContractError("more than 9 simultaneously open rings")
            d = free.pop(0)
            digits[(v, u)] = d
            out.append(_BOND_TEXT[order] + str(d))
        free.extend(release)
        free.sort()
        kids = children[v]
        for k, (u, order) in enumerate(kids):
            last = k == len(kids) - 1
            if not last:
                out.append("(")
            out.append(_BOND_TEXT[order])
            emit(u)
            if not last:
                out.append(")")

    emit(root)
    return "".join(out)


def write_fragments(mol: Molecule) -> str:
    """Write each connected component and join with ``.`` (output files only)."""
    if mol.num_atoms == 0:
        return ""
    parts = []
    for comp in mol.components():
        index = {v: k for k, v in enumerate(comp)}
        sub = Molecule(
            tuple(mol.atoms[v] for v in comp),
            tuple((index[i], index[j], o) for i, j, o in mol.bonds if i in index),
        )
        parts.append(write_smiles(sub))
    return ".".join(sorted(parts))


# ---------------------------------------------------------------------------
# validity


class Violation(NamedTuple):
    kind: str  # "valence" | "disconnected" | "empty"
    atom: int | None
    excess: int


class Validity(NamedTuple):
    valid: bool
    violations: list[Violation]


def check_validity(mol: Molecule) -> Validity:
    violations = []
    if mol.num_atoms == 0:
        violations.append(Violation("empty", None, 0))
    for k, (atom, used) in enumerate(zip(mol.atoms, mol.bond_order_sums())):
        limit = max(VALENCES[atom])
        if used > limit:
            violations.append(Violation("valence", k, used - limit))
    if mol.num_atoms:
        n_comp = len(mol.components())
        if n_comp > 1:
            violations.append(Violation("disconnected", None, n_comp - 1))
    return Validity(not violations, violations)


def is_valid(mol: Molecule) -> bool:
    return check_validity(mol).valid


# ---------------------------------------------------------------------------
# graph conversion


def molecule_to_graph(mol: Molecule, codec: FeatureCodec) -> Graph:
    node_cats = [codec.node_index(a) for a in mol.atoms]
    edge_cats = [codec.edge_index(BOND_NAMES[o]) for _, _, o in mol.bonds]
    return Graph.from_undirected(
        mol.num_atoms, [(i, j) for i, j, _ in mol.bonds], node_cats, edge_cats, codec
    )


def graph_to_molecule(g: Graph, codec: FeatureCodec) -> Molecule:
    atoms = tuple(codec.node_categories[c] for c in g.node_categories())
    bonds = []
    for (i, j), c in zip(g.undirected_pairs().tolist(), g.edge_categories().tolist()):
        name = codec.edge_categories[c]
        if name == NO_BOND:
            continue
        if name == MASKED:
            raise ConversionError(f"edge ({i},{j}) is still masked; decode before converting")
        if name not in BOND_ORDERS:
            raise ConversionError(f"edge category {name!r} has no bond order")
        bonds.append((i, j, BOND_ORDERS[name]))
    try:
        return Molecule(atoms, tuple(bonds))
    except ContractError as exc:
        raise ConversionError(str(exc)) from None


# ---------------------------------------------------------------------------
# descriptors

DESCRIPTOR_NAMES = (
    ("heavy_atoms",)
    + tuple(f"count_{a}" for a in ELEMENTS)
    + ("bonds_single", "bonds_double", "bonds_triple", "rings", "mol_weight")
)
INTEGER_DESCRIPTORS = frozenset(DESCRIPTOR_NAMES) - {"mol_weight"}


def descriptors(mol: Molecule) -> np.ndarray:
    """Descriptor vector in ``DESCRIPTOR_NAMES`` order."""
    if not is_valid(mol):
        raise ContractError("descriptors need a valid molecule")
    counts = [mol.atoms.count(a) for a in ELEMENTS]
    orders = [sum(1 for b in mol.bonds if b[2] == o) for o in (1, 2, 3)]
    rings = len(mol.bonds) - mol.num_atoms + 1
    weight = sum(MASSES[a] for a in mol.atoms) + MASSES["H"] * sum(mol.implicit_hydrogens)
    return np.array([mol.num_atoms, *counts, *orders, rings, weight], dtype=np.float64)
