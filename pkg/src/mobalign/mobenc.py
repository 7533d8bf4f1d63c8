"""LightGCN propagation over the sampled mobility subgraph.

The only parameters are the per-node embedding rows.  Layers apply a fixed
normalized adjacency and the output is the sum of all layer embeddings::

    e(0) = table,  e(l+1) = A_hat @ e(l),  out = e(0) + ... + e(L)

``symmetric`` normalization uses ``1 / sqrt(d_i d_j)``; ``row`` uses
``1 / sqrt(d_i)`` for every neighbor of ``i``.  Both use the binary
adjacency, ignoring edge weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .embedding import EmbeddingTable
from .errors import ConfigError, ValidationError
from .graphbuild import MobilityGraph

NORM_MODES = ("symmetric", "row")


@dataclass
class PropagationPlan:
    adjacency: sp.csr_matrix
    layers: int = 2
    norm_mode: str = "symmetric"

    def __post_init__(self):
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        self._adjoint = None

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def adjoint(self) -> sp.csr_matrix:
        if self._adjoint is None:
            self._adjoint = self.adjacency if self.norm_mode == "symmetric" \
                else self.adjacency.T.tocsr()
        return self._adjoint


def normalized_adjacency(g: MobilityGraph, norm_mode: str = "symmetric") -> sp.csr_matrix:
    deg = g.degrees().astype(np.float64)
    inv_sqrt = np.zeros_like(deg)
    inv_sqrt[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    rows = g.rows()
    cols = g.col_indices.astype(np.int64)
    if norm_mode == "symmetric":
        vals = inv_sqrt[rows] * inv_sqrt[cols]
    elif norm_mode == "row":
        vals = inv_sqrt[rows]
    else:
        raise ConfigError(f"norm_mode must be one of {NORM_MODES}, got {norm_mode!r}")
    return sp.csr_matrix((vals, cols, g.row_offsets.copy()), shape=(g.n_nodes, g.n_nodes))


def make_plan(g: MobilityGraph, layers: int = 2, norm_mode: str = "symmetric") -> PropagationPlan:
    return PropagationPlan(normalized_adjacency(g, norm_mode), layers, norm_mode)


@dataclass
class NodeEmbeddingParams:
    table: np.ndarray

    @classmethod
    def from_init(cls, init: EmbeddingTable, node_index, seed: int = 0) -> "NodeEmbeddingParams":
        """Rows of ``init`` aligned to ``node_index``.

        Nodes missing from ``init`` get small random rows in the same
        range LINE uses for its own initialization.
        """
        table, found = init.reindexed(node_index)
        missing = ~found
        if missing.any():
            rng = np.random.default_rng(seed)
            table.vectors[missing] = (rng.random((int(missing.sum()), init.dim)) - 0.5) / init.dim
        return cls(table.vectors)


def _check(x: np.ndarray, plan: PropagationPlan):
    if x.ndim != 2 or x.shape[0] != plan.n_nodes:
        raise ValidationError(f"expected ({plan.n_nodes}, d) rows, got {x.shape}")


def _power_sum(op: sp.csr_matrix, x: np.ndarray, layers: int) -> np.ndarray:
    out = x.copy()
    cur = x
    for _ in range(layers):
        cur = op @ cur
        out += cur
    return out


def propagate(params: NodeEmbeddingParams | np.ndarray, plan: PropagationPlan) -> np.ndarray:
    table = params.table if isinstance(params, NodeEmbeddingParams) else np.asarray(params)
    _check(table, plan)
    return _power_sum(plan.adjacency, table, plan.layers)


def propagate_backward(grad_out: np.ndarray, plan: PropagationPlan) -> np.ndarray:
    """Gradient w.r.t. the table: ``sum_k (A_hat^T)^k @ grad_out``."""
    grad_out = np.asarray(grad_out)
    _check(grad_out, plan)
    return _power_sum(plan.adjoint, grad_out, plan.layers)
