"""
Principal components of the learned latent space
================================================

Train GATE briefly, then project both tasks' latents onto two principal
axes found with the Jacobi eigensolver.
"""
import numpy as np

from gate import autodiff as ad
from gate.data import normalize, synth_pair
from gate.dmpnn import batch_graphs
from gate.evaluation import desk_config, pca_project
from gate.training import train_gate

target, source = (normalize(d)[0] for d in synth_pair(80, 160, rho=0.9, seed=5))
rc = desk_config(seed=5, epochs=5)
model = train_gate([target, source], rc.train, rc.model).model

with ad.no_grad():
    z_t = model.latent(batch_graphs(target.graphs), 0).data
    z_s = model.latent(batch_graphs(source.graphs), 1).data

res = pca_project(np.vstack([z_t, z_s]), k=2)
share = res.eigenvalues[:2] / res.eigenvalues.sum()
print("latent width", z_t.shape[1], "explained by two axes:", np.round(share, 3))
pts_t, pts_s = res.projections[:len(z_t)], res.projections[len(z_t):]
print("target centroid", pts_t.mean(0), "source centroid", pts_s.mean(0))
