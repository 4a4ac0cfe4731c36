"""Face-block quotient graph of a trace system."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True, eq=False)
class BlockGraph:
    """Undirected graph with one node per block (mesh face).

    ``adj`` is a symmetric CSR pattern without diagonal; ``weights`` holds
    the scalar size of every block and ``offsets`` the first scalar index.
    """

    adj: sp.csr_matrix
    weights: np.ndarray
    offsets: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.adj.shape[0]

    @property
    def n_edges(self) -> int:
        return self.adj.nnz // 2

    def neighbors(self, i: int) -> np.ndarray:
        return self.adj.indices[self.adj.indptr[i]:self.adj.indptr[i + 1]]


def _symmetric_pattern(rows, cols, n):
    m = sp.coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n)).tocsr()
    m = ((m + m.T) != 0).astype(np.int8)
    m.setdiag(0)
    m.eliminate_zeros()
    m.sort_indices()
    return m.tocsr()


def block_graph_from_matrix(K, offsets) -> BlockGraph:
    """Quotient graph of ``K`` for the block partition given by ``offsets``."""
    offsets = np.asarray(offsets, dtype=np.int64)
    sizes = np.diff(offsets)
    nb = sizes.size
    owner = np.repeat(np.arange(nb), sizes)
    coo = sp.coo_matrix(K)
    r, c = owner[coo.row], owner[coo.col]
    keep = r != c
    key = np.unique(r[keep] * nb + c[keep])
    adj = _symmetric_pattern(key // nb, key % nb, nb)
    return BlockGraph(adj, sizes, offsets)


def build_block_graph(system) -> BlockGraph:
    return block_graph_from_matrix(system.K, system.face_offsets)


def scalar_graph_stats(K) -> dict:
    """Node and undirected edge counts of the scalar adjacency graph of ``K``."""
    coo = sp.coo_matrix(K)
    off = coo.row != coo.col
    pat = _symmetric_pattern(coo.row[off], coo.col[off], K.shape[0])
    return {"nodes": K.shape[0], "edges": pat.nnz // 2}


def graph_reduction(system) -> dict:
    """Scalar vs block graph sizes and the resulting reduction factors."""
    bg = build_block_graph(system)
    sc = scalar_graph_stats(system.K)
    return {
        "scalar_nodes": sc["nodes"],
        "scalar_edges": sc["edges"],
        "block_nodes": bg.n_nodes,
        "block_edges": bg.n_edges,
        "node_reduction": sc["nodes"] / bg.n_nodes,
        "edge_reduction": sc["edges"] / max(bg.n_edges, 1),
    }
