"""
Directed message passing on a few molecules
===========================================

Parse SMILES, batch the graphs, run a depth-2 DMPNN and take a gradient
of the pooled output back to the weights.
"""
import numpy as np

from gate import autodiff as ad
from gate.dmpnn import DMPNN, batch_graphs
from gate.smiles import featurize, parse_smiles, scaffold_key

smiles = ["CCO", "c1ccccc1O", "CC(=O)N", "C1CCNCC1"]
graphs = [featurize(parse_smiles(s)) for s in smiles]
for s, g in zip(smiles, graphs):
    print(f"{s:12s} atoms={g.num_atoms:2d} directed edges={g.num_edges:2d} scaffold={scaffold_key(g)!r}")

b = batch_graphs(graphs)
print("node features", b.node_features.shape, "edge features", b.edge_features.shape)

net = DMPNN(b.node_features.shape[1], b.edge_features.shape[1], 16, 8, rng=np.random.default_rng(0))
with ad.Tape() as tape:
    out = net(b)
    loss = ad.mean(out.pooled)
ad.backward(tape, loss)
print("pooled", out.pooled.shape, "loss", loss.item())
for p in net.parameters():
    print(p.name, p.shape, "grad norm", np.linalg.norm(p.grad))
