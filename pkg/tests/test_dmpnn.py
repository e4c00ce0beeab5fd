import numpy as np
import pytest

from gate import autodiff as ad
from gate.autodiff import DimensionError, Value
from gate.dmpnn import DMPNN, batch_graphs
from gate.smiles import Atom, Bond, MolGraph, featurize, parse_smiles

from gradcheck import max_rel_error


def random_graph(rng, max_atoms=6, fv=5, fe=3) -> MolGraph:
    """Connected or not, at most one bond per pair; random real-valued features."""
    n = int(rng.integers(1, max_atoms + 1))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    keep = [p for p in pairs if rng.random() < 0.45]
    g = MolGraph([Atom("C") for _ in range(n)], [Bond(i, j) if rng.random() < 0.5 else Bond(j, i)
                                                  for i, j in keep])
    g.node_features = rng.standard_normal((n, fv))
    g.edge_features = rng.standard_normal((g.num_edges, fe))
    return g


def naive_dmpnn(g: MolGraph, w_in, w_e, w_n, depth=2) -> tuple[np.ndarray, np.ndarray]:
    """Literal per-edge loops over the message-passing equations."""
    x, e = g.node_features, g.edge_features
    edges = [(int(s), int(d)) for s, d in zip(g.edge_src, g.edge_dst)]
    index = {ij: k for k, ij in enumerate(edges)}
    relu = lambda v: np.maximum(v, 0.0)  # noqa: E731
    h0 = {}
    for (i, j), k in index.items():
        h0[(i, j)] = relu(np.concatenate([x[i], e[k]]) @ w_in)
    h = dict(h0)
    for _ in range(depth):
        new = {}
        for (i, j) in edges:
            m = np.zeros(w_e.shape[0])
            for (k, i2) in edges:
                if i2 == i and k != j:
                    m = m + h[(k, i)]
            new[(i, j)] = relu(h0[(i, j)] + m @ w_e)
        h = new
    nodes = []
    for i in range(g.num_atoms):
        m = np.zeros(w_e.shape[0])
        for (j, i2) in edges:
            if i2 == i:
                m = m + h[(j, i)]
        nodes.append(relu(np.concatenate([x[i], m]) @ w_n))
    nodes = np.array(nodes)
    return nodes, nodes.sum(axis=0)


def test_oracle_200_random_graphs():
    rng = np.random.default_rng(2024)
    net = DMPNN(5, 3, 7, 4, depth=2, rng=np.random.default_rng(1))
    graphs = [random_graph(rng) for _ in range(200)]
    out = net(batch_graphs(graphs))
    offset = 0
    worst = 0.0
    for k, g in enumerate(graphs):
        nodes, pooled = naive_dmpnn(g, net.W_in.data, net.W_e.data, net.W_n.data)
        got = out.nodes.data[offset:offset + g.num_atoms]
        worst = max(worst, np.abs(got - nodes).max(), np.abs(out.pooled.data[k] - pooled).max())
        offset += g.num_atoms
    assert worst <= 1e-12


def test_leaf_edge_and_path_incidence():
    g = featurize(parse_smiles("CCC"))
    b = batch_graphs([g])
    msg = b.message.toarray()
    # edge 0 is 0->1 (a leaf edge: nothing arrives at atom 0 except from 1)
    assert np.all(msg[0] == 0)
    # edge 2 is 1->2 and receives exactly h(0->1) = edge 0
    assert np.array_equal(msg[2], np.eye(4)[0])


def test_single_atom_and_symmetric_pair():
    net = DMPNN(28, 6, 8, 5, rng=np.random.default_rng(0))
    g = featurize(parse_smiles("C"))
    out = net(batch_graphs([g]))
    x = g.node_features[0]
    expect = np.maximum(np.concatenate([x, np.zeros(8)]) @ net.W_n.data, 0.0)
    assert np.allclose(out.nodes.data[0], expect, atol=1e-14)
    assert out.edges.shape == (0, 8)

    cc = batch_graphs([featurize(parse_smiles("CC"))])
    s = net.init_edges(cc, Value(cc.node_features), Value(cc.edge_features))
    assert np.array_equal(s.initial.data[0], s.initial.data[1])
    assert np.all(s.initial.data >= 0)


def test_width_mismatch():
    net = DMPNN(28, 6, 8, 5)
    b = batch_graphs([featurize(parse_smiles("CC"))])
    with pytest.raises(DimensionError):
        net.init_edges(b, Value(np.ones((2, 27))), Value(b.edge_features))


def test_disjoint_copies_double_pooled():
    net = DMPNN(28, 6, 8, 5, rng=np.random.default_rng(3))
    g = parse_smiles("CC(=O)Nc1ccccc1")
    n = g.num_atoms
    union = MolGraph(g.atoms + g.atoms,
                     g.bonds + [Bond(b.begin + n, b.end + n, b.order, b.in_ring) for b in g.bonds])
    one = net(batch_graphs([featurize(g)])).pooled.data[0]
    two = net(batch_graphs([featurize(union)])).pooled.data[0]
    assert np.allclose(two, 2 * one, rtol=0, atol=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    net = DMPNN(5, 3, 6, 4, rng=np.random.default_rng(2))
    for _ in range(20):
        g = random_graph(rng)
        perm = rng.permutation(g.num_atoms)
        h = g.permuted(perm)
        a = net(batch_graphs([g]))
        b = net(batch_graphs([h]))
        assert np.allclose(b.nodes.data, a.nodes.data[perm], atol=1e-12)
        assert np.allclose(b.pooled.data, a.pooled.data, atol=1e-12)


def test_tile_matches_repeated_batch():
    graphs = [featurize(parse_smiles(s)) for s in ("CCO", "c1ccccc1", "C")]
    b = batch_graphs(graphs)
    t = b.tile(3)
    ref = batch_graphs(graphs * 3)
    for name in ("src", "dst", "rev", "graph_index"):
        assert np.array_equal(getattr(t, name), getattr(ref, name))
    assert (t.message != ref.message).nnz == 0


def test_replica_edge_rows_broadcast():
    graphs = [featurize(parse_smiles(s)) for s in ("CCO", "c1ccncc1")]
    b = batch_graphs(graphs)
    t = b.tile(4)
    net = DMPNN(28, 6, 8, 5, rng=np.random.default_rng(0))
    nodes = Value(np.tile(b.node_features, (4, 1)))
    full = net(t, nodes, Value(t.edge_features))
    short = net(t, nodes, Value(b.edge_features))
    assert np.array_equal(full.nodes.data, short.nodes.data)
    with pytest.raises(DimensionError):
        net(t, nodes, Value(np.ones((b.num_edges - 1, 6))))


def test_parameter_gradients():
    rng = np.random.default_rng(4)
    net = DMPNN(5, 3, 6, 4, rng=np.random.default_rng(5))
    b = batch_graphs([random_graph(rng) for _ in range(4)])
    w = Value(rng.standard_normal(4))

    def loss():
        return ad.total(ad.matmul(net(b).pooled, w))

    assert max_rel_error(loss, net.parameters(), h=1e-5) < 1e-5


def test_input_gradients():
    rng = np.random.default_rng(6)
    net = DMPNN(5, 3, 6, 4, rng=np.random.default_rng(7))
    b = batch_graphs([random_graph(rng) for _ in range(3)])
    x = Value(b.node_features.copy(), requires_grad=True)
    e = Value(b.edge_features.copy(), requires_grad=True)
    assert max_rel_error(lambda: ad.mean(ad.relu(net(b, x, e).pooled)), [x, e], h=1e-5) < 1e-5
