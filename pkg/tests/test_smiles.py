import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gate.smiles import (EDGE_FEATURES, ELEMENTS, NODE_FEATURES, SmilesError, featurize, parse_smiles,
                         scaffold_key)


def test_methane():
    g = parse_smiles("C")
    assert g.num_atoms == 1 and g.bonds == [] and g.atoms[0].num_hs == 4


def test_ethanol():
    g = parse_smiles("CCO")
    assert g.num_atoms == 3 and len(g.bonds) == 2 and g.num_edges == 4
    assert all(b.order == "single" for b in g.bonds)
    assert [a.num_hs for a in g.atoms] == [3, 2, 1]


def test_benzene():
    g = parse_smiles("c1ccccc1")
    assert g.num_atoms == 6 and len(g.bonds) == 6
    assert all(a.aromatic and a.in_ring and a.element == "C" for a in g.atoms)
    assert all(b.order == "aromatic" and b.in_ring for b in g.bonds)
    assert all(a.num_hs == 1 for a in g.atoms)


@pytest.mark.parametrize("smi, atoms, bonds", [
    ("CC(=O)O", 4, 3),
    ("C#N", 2, 1),
    ("c1ccncc1", 6, 6),
    ("c1ccoc1", 5, 5),
    ("c1ccsc1", 5, 5),
    ("C1CC2CCC1C2", 7, 8),
    ("C%10CCCC%10", 5, 5),
    ("[NH4+]", 1, 0),
    ("[O-]C(=O)C", 4, 3),
    ("ClCBr", 3, 2),
    ("c1ccc2ccccc2c1", 10, 11),
    ("C-C=C", 3, 2),
])
def test_grammar_coverage(smi, atoms, bonds):
    g = parse_smiles(smi)
    assert (g.num_atoms, len(g.bonds)) == (atoms, bonds)


def test_bracket_atoms():
    g = parse_smiles("[NH4+]")
    assert g.atoms[0].charge == 1 and g.atoms[0].num_hs == 4
    g = parse_smiles("[Fe]")
    assert g.atoms[0].element == "other"


def test_ring_membership_excludes_side_chain():
    g = parse_smiles("c1ccccc1CC")
    assert [a.in_ring for a in g.atoms] == [True] * 6 + [False, False]
    assert sum(b.in_ring for b in g.bonds) == 6


@pytest.mark.parametrize("smi, offset", [
    ("C(C", 1),
    ("CC)", 2),
    ("C1CC", 1),
    ("CXC", 1),
    ("C(C)(C)(C)(C)C", None),
    ("[13CH4]", 1),
    ("C/C=C/C", 1),
    ("C.C", 1),
    ("", 0),
])
def test_parse_errors(smi, offset):
    with pytest.raises(SmilesError) as info:
        parse_smiles(smi)
    if offset is not None:
        assert info.value.offset == offset


def test_valence_overflow_reports_atom_offset():
    with pytest.raises(SmilesError) as info:
        parse_smiles("CC(C)(C)(C)C")
    assert info.value.offset == 1


def test_feature_examples():
    g = featurize(parse_smiles("C"))
    x = g.node_features[0]
    assert x.shape == (NODE_FEATURES,) == (28,)
    deg = x[12:18]
    hs = x[18:23]
    assert deg[0] == 1 and hs[4] == 1 and x[26] == 0

    b = featurize(parse_smiles("c1ccccc1")).node_features[0]
    assert b[26] == 1 and b[27] == 1 and b[12 + 2] == 1


@pytest.mark.parametrize("smi", ["CCO", "c1ccccc1", "[NH4+]", "CC(=O)[O-]", "C1CCCCC1N", "FC(F)(F)Cl"])
def test_one_hot_blocks(smi):
    g = featurize(parse_smiles(smi))
    x = g.node_features
    for lo, hi in [(0, 12), (12, 18), (18, 23), (23, 26)]:
        assert np.all(x[:, lo:hi].sum(axis=1) == 1)
    assert set(np.unique(x)) <= {0.0, 1.0}
    e = g.edge_features
    assert e.shape == (g.num_edges, EDGE_FEATURES)
    assert np.all(e[:, :4].sum(axis=1) == 1)
    assert np.array_equal(e[0::2], e[1::2])


def test_element_vocabulary():
    assert len(ELEMENTS) == 12 and ELEMENTS[-1] == "other"


def test_scaffold_examples():
    assert scaffold_key(parse_smiles("CCCC")) == ""
    benz = scaffold_key(parse_smiles("c1ccccc1"))
    assert benz == scaffold_key(parse_smiles("c1ccccc1C"))
    assert benz != scaffold_key(parse_smiles("C1CCCCC1"))
    # a linker between rings survives pruning
    assert scaffold_key(parse_smiles("c1ccccc1CCc1ccccc1")) != scaffold_key(parse_smiles("c1ccccc1c1ccccc1"))


RINGS = ["c1ccccc1", "C1CCCCC1", "c1ccncc1", "C1CCNCC1", "c1ccc2ccccc2c1", "C1CC1"]
CHAINS = ["C", "CC", "CO", "C(C)C", "CCN", "CCl", "OC", "C(=O)C", "CC#N"]


def _decorate(ring: str, positions: list[int], chains: list[str]) -> str:
    """Attach a branch to the chosen carbon atoms of ``ring`` (after any ring digits)."""
    picks = dict(zip(positions, chains))
    out, atom, i = [], -1, 0
    while i < len(ring):
        ch = ring[i]
        out.append(ch)
        i += 1
        if ch in "cC":
            atom += 1
            while i < len(ring) and ring[i].isdigit():
                out.append(ring[i])
                i += 1
            if atom in picks:
                out.append(f"({picks[atom]})")
    return "".join(out)


def test_decorate_helper():
    assert _decorate("c1ccccc1", [0, 2], ["C", "O"]) == "c1(C)cc(O)ccc1"


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(RINGS), st.lists(st.integers(0, 9), max_size=3, unique=True),
       st.lists(st.sampled_from(CHAINS), min_size=3, max_size=3))
def test_scaffold_invariant_under_side_chains(ring, positions, chains):
    base = parse_smiles(ring)
    try:
        decorated = parse_smiles(_decorate(ring, positions, chains))
    except SmilesError:
        # only fused atoms lack room for a branch
        assert ring == "c1ccc2ccccc2c1"
        return
    assert scaffold_key(decorated) == scaffold_key(base)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(RINGS + ["CCO", "CC(=O)O", "c1ccccc1CCN", "[NH4+]", "C#CC"]))
def test_structural_properties(smi):
    g1, g2 = parse_smiles(smi), parse_smiles(smi)
    assert g1.atoms == g2.atoms and g1.bonds == g2.bonds
    rev = g1.edge_rev
    assert np.array_equal(rev[rev], np.arange(g1.num_edges))
    assert np.array_equal(g1.edge_src[rev], g1.edge_dst)
    assert g1.num_edges == 2 * len(g1.bonds)
