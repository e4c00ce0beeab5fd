"""GATE: geometrically aligned transfer encoders for molecular regression.

A small numpy/scipy stack: a tape autodiff engine, a SMILES parser and
featurizer, directed message passing, the GATE model zoo with STL/MTL
baselines, training, data utilities, Riemannian geometry checks and the
evaluation drivers.
"""
from .autodiff import ContractError, DimensionError, Tape, Value, backward, no_grad
from .data import Dataset, SplitManifest, corrupt, load_csv, make_split, normalize, synth_pair
from .evaluation import RunConfig, cross_validate, pca_project, rmse
from .losses import LossWeights
from .networks import GateModel, ModelConfig, MTLModel, PerturbConfig, STLModel, load_checkpoint, save_checkpoint
from .smiles import MolGraph, SmilesError, featurize, parse_smiles
from .training import TrainConfig, train_gate, train_mtl, train_stl

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DimensionError", "Tape", "Value", "backward", "no_grad",
    "Dataset", "SplitManifest", "corrupt", "load_csv", "make_split", "normalize", "synth_pair",
    "RunConfig", "cross_validate", "pca_project", "rmse", "LossWeights",
    "GateModel", "ModelConfig", "MTLModel", "PerturbConfig", "STLModel", "load_checkpoint", "save_checkpoint",
    "MolGraph", "SmilesError", "featurize", "parse_smiles",
    "TrainConfig", "train_gate", "train_mtl", "train_stl",
]
