"""A SMILES subset parser, atom/bond featurizer and scaffold keys.

Supported grammar: organic-subset atoms (``B C N O P S F Cl Br I`` and
aromatic ``b c n o p s``), bracket atoms with hydrogen count and charge,
bonds ``- = # :``, branches and ring closures (``0-9`` and ``%nn``).
Stereochemistry, isotopes and multi-fragment (``.``) input are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class SmilesError(ValueError):
    """Malformed or unsupported SMILES; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


ELEMENTS = ("C", "N", "O", "F", "P", "S", "Cl", "Br", "I", "B", "H", "other")
BOND_ORDERS = ("single", "double", "triple", "aromatic")

NODE_FEATURES = len(ELEMENTS) + 6 + 5 + 3 + 1 + 1
EDGE_FEATURES = len(BOND_ORDERS) + 1 + 1

_ORGANIC = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
_AROMATIC_ORGANIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
_VALENCES = {
    "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}
# bracket atoms may name any element; those outside ELEMENTS map to "other"
_PERIODIC = set("""
H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn
Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce
Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn
Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr
""".split())
_BOND_SYMBOLS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic"}
_BOND_VALENCE = {"single": 1, "double": 2, "triple": 3, "aromatic": 1}


@dataclass
class Atom:
    element: str
    charge: int = 0
    aromatic: bool = False
    num_hs: int = 0
    in_ring: bool = False
    bracket: bool = False


@dataclass
class Bond:
    begin: int
    end: int
    order: str = "single"
    in_ring: bool = False


@dataclass
class MolGraph:
    """Molecular graph with both orientations of every bond.

    Directed edge ``2k`` runs ``bonds[k].begin -> bonds[k].end`` and ``2k + 1``
    the reverse, so ``rev[e] == e ^ 1``.
    """

    atoms: list[Atom]
    bonds: list[Bond]
    smiles: str = ""
    node_features: np.ndarray | None = None
    edge_features: np.ndarray | None = None
    _edge_index: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    @property
    def num_edges(self) -> int:
        return 2 * len(self.bonds)

    def _edges(self):
        if self._edge_index is None:
            src = np.empty(self.num_edges, dtype=np.int64)
            dst = np.empty(self.num_edges, dtype=np.int64)
            for k, b in enumerate(self.bonds):
                src[2 * k], dst[2 * k] = b.begin, b.end
                src[2 * k + 1], dst[2 * k + 1] = b.end, b.begin
            rev = np.arange(self.num_edges) ^ 1
            self._edge_index = (src, dst, rev)
        return self._edge_index

    @property
    def edge_src(self) -> np.ndarray:
        return self._edges()[0]

    @property
    def edge_dst(self) -> np.ndarray:
        return self._edges()[1]

    @property
    def edge_rev(self) -> np.ndarray:
        return self._edges()[2]

    def degree(self, i: int) -> int:
        return sum(1 for b in self.bonds if i in (b.begin, b.end))

    def neighbors(self, i: int) -> list[int]:
        out = []
        for b in self.bonds:
            if b.begin == i:
                out.append(b.end)
            elif b.end == i:
                out.append(b.begin)
        return out

    def permuted(self, perm) -> "MolGraph":
        """Relabel atoms so that old atom ``perm[k]`` becomes new atom ``k``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        atoms = [replace(self.atoms[old]) for old in perm]
        bonds = [Bond(inv[b.begin], inv[b.end], b.order, b.in_ring) for b in self.bonds]
        g = MolGraph(atoms, bonds, self.smiles)
        if self.node_features is not None:
            g.node_features = self.node_features[perm]
            g.edge_features = self.edge_features
        return g


def _match_bracket_element(s: str, i: int) -> tuple[str, bool, int]:
    if s[i] in "bcnops":
        if s[i:i + 2] == "se":
            return "Se", True, i + 2
        return _AROMATIC_ORGANIC[s[i]], True, i + 1
    if s[i:i + 2] == "as":
        return "As", True, i + 2
    if s[i].isupper():
        two = s[i:i + 2]
        if len(two) == 2 and two[1].islower() and two in _PERIODIC:
            return two, False, i + 2
        if s[i] in _PERIODIC:
            return s[i], False, i + 1
    raise SmilesError(f"unknown element in bracket atom {s[i:i + 2]!r}", i)


def _parse_bracket(s: str, start: int) -> tuple[Atom, int]:
    close = s.find("]", start)
    if close < 0:
        raise SmilesError("unclosed bracket atom", start)
    i = start + 1
    if i < close and s[i].isdigit():
        raise SmilesError("isotopes are not supported", i)
    if i >= close:
        raise SmilesError("empty bracket atom", start)
    element, aromatic, i = _match_bracket_element(s, i)
    if i < close and s[i] == "@":
        raise SmilesError("stereochemistry is not supported", i)
    hs = 0
    if i < close and s[i] == "H":
        i += 1
        hs = 1
        if i < close and s[i].isdigit():
            hs = int(s[i])
            i += 1
    charge = 0
    if i < close and s[i] in "+-":
        sign = 1 if s[i] == "+" else -1
        i += 1
        if i < close and s[i].isdigit():
            j = i
            while j < close and s[j].isdigit():
                j += 1
            charge = sign * int(s[i:j])
            i = j
        else:
            charge = sign
            while i < close and s[i] == ("+" if sign > 0 else "-"):
                charge += sign
                i += 1
    if i != close:
        raise SmilesError(f"unsupported bracket atom content {s[i:close]!r}", i)
    label = element if element in ELEMENTS else "other"
    return Atom(label, charge, aromatic, hs, bracket=True), close + 1


def parse_smiles(s: str) -> MolGraph:
    """Parse ``s`` into an unfeaturized :class:`MolGraph`."""
    if not s:
        raise SmilesError("empty SMILES", 0)
    if not s.isascii():
        raise SmilesError("non-ASCII input", next(i for i, ch in enumerate(s) if not ch.isascii()))

    atoms: list[Atom] = []
    bonds: list[Bond] = []
    explicit: list[str | None] = []  # bond symbol as written, None for implicit
    bonded: set[frozenset] = set()
    stack: list[int] = []
    open_parens: list[int] = []
    open_rings: dict[int, tuple[int, str | None, int]] = {}
    prev: int | None = None
    pending_bond: str | None = None
    pending_at = 0
    i, n = 0, len(s)

    def connect(a: int, b: int, sym: str | None, at: int) -> None:
        key = frozenset((a, b))
        if a == b or key in bonded:
            raise SmilesError("duplicate bond or self-loop", at)
        bonded.add(key)
        bonds.append(Bond(a, b))
        explicit.append(sym)

    while i < n:
        ch = s[i]
        if ch == "(":
            if prev is None:
                raise SmilesError("branch before any atom", i)
            stack.append(prev)
            open_parens.append(i)
            i += 1
        elif ch == ")":
            if not stack:
                raise SmilesError("unbalanced ')'", i)
            if pending_bond is not None:
                raise SmilesError("bond symbol before ')'", i)
            prev = stack.pop()
            open_parens.pop()
            i += 1
        elif ch in _BOND_SYMBOLS:
            if pending_bond is not None or prev is None:
                raise SmilesError(f"misplaced bond symbol {ch!r}", i)
            pending_bond, pending_at = ch, i
            i += 1
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise SmilesError("ring closure before any atom", i)
            if ch == "%":
                digits = s[i + 1:i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesError("'%' must be followed by two digits", i)
                num, width = int(s[i + 1:i + 3]), 3
            else:
                num, width = int(ch), 1
            if num in open_rings:
                other, sym, at = open_rings.pop(num)
                if sym is not None and pending_bond is not None and sym != pending_bond:
                    raise SmilesError("conflicting ring-closure bond symbols", i)
                connect(other, prev, pending_bond or sym, i)
            else:
                open_rings[num] = (prev, pending_bond, i)
            pending_bond = None
            i += width
        elif ch == "[":
            atom, i_next = _parse_bracket(s, i)
            idx = len(atoms)
            atoms.append(atom)
            if prev is not None:
                connect(prev, idx, pending_bond, i)
            pending_bond = None
            prev = idx
            i = i_next
        elif ch in "/\\@":
            raise SmilesError("stereochemistry is not supported", i)
        elif ch == ".":
            raise SmilesError("multi-fragment SMILES are not supported", i)
        elif ch.isalpha():
            if s[i:i + 2] in ("Cl", "Br"):
                sym, width, aromatic = s[i:i + 2], 2, False
            elif ch in _ORGANIC:
                sym, width, aromatic = ch, 1, False
            elif ch in _AROMATIC_ORGANIC:
                sym, width, aromatic = _AROMATIC_ORGANIC[ch], 1, True
            else:
                raise SmilesError(f"unknown element {ch!r}", i)
            idx = len(atoms)
            atoms.append(Atom(sym, 0, aromatic))
            if prev is not None:
                connect(prev, idx, pending_bond, i)
            pending_bond = None
            prev = idx
            i += width
        else:
            raise SmilesError(f"unexpected character {ch!r}", i)

    if pending_bond is not None:
        raise SmilesError("dangling bond symbol", pending_at)
    if stack:
        raise SmilesError("unbalanced '('", open_parens[-1])
    if open_rings:
        raise SmilesError(f"dangling ring closure {min(open_rings)}", min(v[2] for v in open_rings.values()))
    if not atoms:
        raise SmilesError("no atoms", 0)

    for b, sym in zip(bonds, explicit):
        if sym is not None:
            b.order = _BOND_SYMBOLS[sym]
        elif atoms[b.begin].aromatic and atoms[b.end].aromatic:
            b.order = "aromatic"
        else:
            b.order = "single"

    g = MolGraph(atoms, bonds, s)
    _assign_rings(g)
    _assign_hydrogens(g, s)
    return g


def _assign_rings(g: MolGraph) -> None:
    """A bond is in a ring iff its endpoints stay connected without it."""
    adj: list[list[tuple[int, int]]] = [[] for _ in g.atoms]
    for k, b in enumerate(g.bonds):
        adj[b.begin].append((b.end, k))
        adj[b.end].append((b.begin, k))
    for k, b in enumerate(g.bonds):
        seen = {b.begin}
        frontier = [b.begin]
        while frontier and b.end not in seen:
            u = frontier.pop()
            for v, kk in adj[u]:
                if kk != k and v not in seen:
                    seen.add(v)
                    frontier.append(v)
        if b.end in seen:
            b.in_ring = True
            g.atoms[b.begin].in_ring = True
            g.atoms[b.end].in_ring = True


def _assign_hydrogens(g: MolGraph, s: str) -> None:
    used = [0] * g.num_atoms
    for b in g.bonds:
        v = _BOND_VALENCE[b.order]
        used[b.begin] += v
        used[b.end] += v
    for idx, atom in enumerate(g.atoms):
        if atom.bracket:
            continue
        # an aromatic atom spends one valence on the pi system when it can
        # (c, n); o and s contribute a lone pair instead
        needs = [used[idx] + 1, used[idx]] if atom.aromatic else [used[idx]]
        for need in needs:
            val = next((v for v in _VALENCES[atom.element] if v >= need), None)
            if val is not None:
                atom.num_hs = val - need
                break
        else:
            raise SmilesError(f"valence overflow on atom {idx} ({atom.element})", _atom_offset(s, idx))


def _atom_offset(s: str, idx: int) -> int:
    count = -1
    i = 0
    while i < len(s):
        ch = s[i]
        if ch == "[":
            count += 1
            if count == idx:
                return i
            i = s.index("]", i) + 1
            continue
        if ch.isalpha():
            count += 1
            if count == idx:
                return i
            i += 2 if s[i:i + 2] in ("Cl", "Br") else 1
            continue
        i += 1
    return 0


def _onehot(index: int, width: int) -> list[float]:
    v = [0.0] * width
    v[min(index, width - 1)] = 1.0
    return v


def featurize(g: MolGraph) -> MolGraph:
    """Return a copy of ``g`` with node (28-wide) and edge (6-wide) features."""
    nodes = np.zeros((g.num_atoms, NODE_FEATURES))
    for i, a in enumerate(g.atoms):
        charge = 0 if a.charge < 0 else (1 if a.charge == 0 else 2)
        nodes[i] = (
            _onehot(ELEMENTS.index(a.element), len(ELEMENTS))
            + _onehot(g.degree(i), 6)
            + _onehot(a.num_hs, 5)
            + _onehot(charge, 3)
            + [float(a.aromatic), float(a.in_ring)]
        )
    edges = np.zeros((g.num_edges, EDGE_FEATURES))
    for k, b in enumerate(g.bonds):
        row = _onehot(BOND_ORDERS.index(b.order), 4) + [float(b.in_ring), float(b.order == "aromatic")]
        edges[2 * k] = row
        edges[2 * k + 1] = row
    out = replace(g, node_features=nodes, edge_features=edges)
    out._edge_index = g._edge_index
    return out


def scaffold_key(g: MolGraph) -> str:
    """Canonical key of the ring framework left after pruning side chains.

    Acyclic molecules map to ``""``.  Keys compare frameworks by their
    atom and bond signatures, not by full graph canonization.
    """
    if not any(a.in_ring for a in g.atoms):
        return ""
    alive = set(range(g.num_atoms))
    bonds = list(g.bonds)
    while True:
        deg = {i: 0 for i in alive}
        for b in bonds:
            deg[b.begin] += 1
            deg[b.end] += 1
        drop = {i for i in alive if not g.atoms[i].in_ring and deg[i] <= 1}
        if not drop:
            break
        alive -= drop
        bonds = [b for b in bonds if b.begin in alive and b.end in alive]
    deg = {i: 0 for i in alive}
    for b in bonds:
        deg[b.begin] += 1
        deg[b.end] += 1

    def label(i: int) -> str:
        a = g.atoms[i]
        return a.element.lower() if a.aromatic else a.element

    atom_sig = sorted(f"{label(i)}/{deg[i]}/{int(g.atoms[i].in_ring)}" for i in alive)
    edge_sig = sorted(
        "~".join(sorted((f"{label(b.begin)}/{deg[b.begin]}", f"{label(b.end)}/{deg[b.end]}"))) + f"/{b.order}"
        for b in bonds
    )
    return ";".join(atom_sig) + "|" + ";".join(edge_sig)
