"""Directional message passing over bond-oriented hidden states.

Molecules are batched as a disjoint union; every gather, message and
pooling step is a constant sparse operator applied with :func:`spmm`, so a
batch of any size costs a fixed number of tape records.

For a directed edge ``(i, j)`` the recurrence is::

    h0_ij   = ReLU(W_in . [x_i, e_ij])
    m_ij    = sum_{k in N(i), k != j} h_ki
    h_ij    = ReLU(h0_ij + W_e . m_ij)          (repeated ``depth`` times)
    m_i     = sum_{j in N(i)} h_ji                (incoming edges)
    h_i     = ReLU(W_n . [x_i, m_i])
    pooled  = sum_i h_i
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import DimensionError, Value
from .smiles import MolGraph


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _indicator(rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=shape)


@dataclass(eq=False)
class GraphBatch:
    """Featurized graphs joined into one disjoint-union graph."""

    node_features: np.ndarray
    edge_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rev: np.ndarray
    graph_index: np.ndarray  # node -> graph
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return len(self.graph_index)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @cached_property
    def gather_src(self) -> sp.csr_matrix:
        """``[E, V]``: row ``e`` selects the source node of edge ``e``."""
        return _indicator(np.arange(self.num_edges), self.src, (self.num_edges, self.num_nodes))

    @cached_property
    def incoming(self) -> sp.csr_matrix:
        """``[V, E]``: sums hidden states of edges arriving at each node."""
        return _indicator(self.dst, np.arange(self.num_edges), (self.num_nodes, self.num_edges))

    @cached_property
    def message(self) -> sp.csr_matrix:
        """``[E, E]``: ``m_ij = sum_{k != j} h_ki``, i.e. incoming(src) minus the reverse edge."""
        msg = (self.gather_src @ self.incoming).tocsr()
        msg = msg - _indicator(np.arange(self.num_edges), self.rev, (self.num_edges, self.num_edges))
        msg.eliminate_zeros()
        return msg.tocsr()

    @cached_property
    def pool(self) -> sp.csr_matrix:
        """``[G, V]``: sum pooling of node states per graph."""
        return _indicator(self.graph_index, np.arange(self.num_nodes), (self.num_graphs, self.num_nodes))

    def tile(self, copies: int) -> "GraphBatch":
        """``copies`` independent replicas of the whole batch, stacked block-wise."""
        v, e, g = self.num_nodes, self.num_edges, self.num_graphs
        off_v = np.repeat(np.arange(copies) * v, e)
        off_e = np.repeat(np.arange(copies) * e, e)
        return GraphBatch(
            node_features=np.tile(self.node_features, (copies, 1)),
            edge_features=np.tile(self.edge_features, (copies, 1)),
            src=np.tile(self.src, copies) + off_v,
            dst=np.tile(self.dst, copies) + off_v,
            rev=np.tile(self.rev, copies) + off_e,
            graph_index=np.tile(self.graph_index, copies) + np.repeat(np.arange(copies) * g, v),
            num_graphs=copies * g,
        )


def batch_graphs(graphs: Sequence[MolGraph]) -> GraphBatch:
    """Join featurized graphs; graph ``k`` keeps its atoms contiguous and in order."""
    if not graphs:
        raise ValueError("cannot batch zero graphs")
    if any(g.node_features is None for g in graphs):
        raise ValueError("graphs must be featurized before batching")
    n_nodes = np.array([g.num_atoms for g in graphs])
    n_edges = np.array([g.num_edges for g in graphs])
    node_off = np.concatenate([[0], np.cumsum(n_nodes)[:-1]])
    edge_off = np.concatenate([[0], np.cumsum(n_edges)[:-1]])
    fe = graphs[0].edge_features.shape[1]
    return GraphBatch(
        node_features=np.concatenate([g.node_features for g in graphs], axis=0),
        edge_features=np.concatenate(
            [g.edge_features.reshape(-1, fe) for g in graphs], axis=0),
        src=np.concatenate([g.edge_src + o for g, o in zip(graphs, node_off)]).astype(np.int64),
        dst=np.concatenate([g.edge_dst + o for g, o in zip(graphs, node_off)]).astype(np.int64),
        rev=np.concatenate([g.edge_rev + o for g, o in zip(graphs, edge_off)]).astype(np.int64),
        graph_index=np.repeat(np.arange(len(graphs)), n_nodes),
        num_graphs=len(graphs),
    )


@dataclass
class GraphRepr:
    """Node states ``[V, H_out]``, edge states ``[E, H]`` and pooled ``[G, H_out]``."""

    nodes: Value
    edges: Value
    pooled: Value


@dataclass
class EdgeStates:
    initial: Value
    current: Value
    step: int = 0


class DMPNN:
    """Edge-centred message passing with ``depth`` update steps.

    Parameters are stored input-major (``x @ W``).  No bias terms, matching
    the recurrence in the module docstring.
    """

    def __init__(self, node_in: int, edge_in: int, hidden: int, out: int,
                 depth: int = 2, rng: np.random.Generator | None = None, name: str = "dmpnn"):
        if min(node_in, edge_in, hidden, out) < 1 or depth < 1:
            raise ValueError("DMPNN widths and depth must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.node_in, self.edge_in, self.hidden, self.out, self.depth = node_in, edge_in, hidden, out, depth
        self.W_in = Value(xavier_uniform(rng, node_in + edge_in, hidden), True, f"{name}.W_in")
        self.W_e = Value(xavier_uniform(rng, hidden, hidden), True, f"{name}.W_e")
        self.W_n = Value(xavier_uniform(rng, node_in + hidden, out), True, f"{name}.W_n")

    def parameters(self) -> list[Value]:
        return [self.W_in, self.W_e, self.W_n]

    def init_edges(self, batch: GraphBatch, nodes: Value, edges: Value) -> EdgeStates:
        """Initial edge states.

        ``edges`` may hold the rows of a single replica when ``batch`` is a
        tiled batch; the edge term is then computed once and repeated.
        """
        if nodes.shape[1] != self.node_in or edges.shape[1] != self.edge_in:
            raise DimensionError(
                f"DMPNN expects node/edge widths {self.node_in}/{self.edge_in}, "
                f"got {nodes.shape[1]}/{edges.shape[1]}")
        n_e = edges.shape[0]
        if n_e != batch.num_edges and (n_e == 0 or batch.num_edges % n_e):
            raise DimensionError(f"{n_e} edge rows do not match {batch.num_edges} edges")
        # W_in . [x_src, e] split as x-part (gathered after the matmul) plus e-part
        w_x = ad.rows(self.W_in, 0, self.node_in)
        w_b = ad.rows(self.W_in, self.node_in, self.node_in + self.edge_in)
        edge_term = ad.matmul(edges, w_b)
        if n_e != batch.num_edges:
            edge_term = ad.tile_rows(edge_term, batch.num_edges // n_e)
        h0 = ad.add_relu(ad.spmm(batch.gather_src, ad.matmul(nodes, w_x)), edge_term)
        return EdgeStates(h0, h0, 0)

    def message_step(self, s: EdgeStates, batch: GraphBatch) -> EdgeStates:
        m = ad.spmm(batch.message, s.current)
        h = ad.add_relu(s.initial, ad.matmul(m, self.W_e))
        return EdgeStates(s.initial, h, s.step + 1)

    def node_readout(self, s: EdgeStates, batch: GraphBatch, nodes: Value) -> GraphRepr:
        m = ad.spmm(batch.incoming, s.current)
        h = ad.relu(ad.matmul(ad.concat(nodes, m), self.W_n))
        return GraphRepr(h, s.current, ad.spmm(batch.pool, h))

    def __call__(self, batch: GraphBatch, nodes: Value | None = None, edges: Value | None = None) -> GraphRepr:
        """Run on ``batch``; defaults to the batch's raw atom and bond features."""
        nodes = Value(batch.node_features) if nodes is None else nodes
        edges = Value(batch.edge_features) if edges is None else edges
        s = self.init_edges(batch, nodes, edges)
        for _ in range(self.depth):
            s = self.message_step(s, batch)
        return self.node_readout(s, batch, nodes)
