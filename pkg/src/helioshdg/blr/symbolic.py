"""Symbolic factorization on the block graph: elimination tree and fronts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .graph import BlockGraph

CLUSTER_SIZE = 64


@dataclass(eq=False)
class Front:
    """One supernode: pivot blocks and contribution-block (CB) blocks."""

    index: int
    pivots: np.ndarray      # block ids eliminated here, clustered for tiling
    cb: np.ndarray          # block ids of the update region
    parent: int = -1
    children: list = field(default_factory=list)
    nfs: int = 0            # scalar fully-summed size
    ncb: int = 0            # scalar CB size
    fs_splits: np.ndarray = None    # scalar offsets of cluster starts within the pivots
    cb_splits: np.ndarray = None    # same within the CB


@dataclass(eq=False)
class EliminationPlan:
    perm: np.ndarray            # block elimination order
    position: np.ndarray        # inverse permutation
    fronts: list                # children before parents
    block_front: np.ndarray     # front owning each block as a pivot
    weights: np.ndarray
    offsets: np.ndarray
    fr_entries: float
    fr_flops: float

    @property
    def n_fronts(self) -> int:
        return len(self.fronts)

    def summary(self) -> dict:
        sizes = [f.nfs + f.ncb for f in self.fronts]
        return {
            "fronts": len(self.fronts),
            "max_front": int(max(sizes)) if sizes else 0,
            "fr_entries": self.fr_entries,
            "fr_flops": self.fr_flops,
        }


def front_flops(nfs: int, nfront: int) -> float:
    """Full-rank LU operations for eliminating nfs pivots in a front of size nfront."""
    k = np.arange(nfs, dtype=float)
    r = nfront - k - 1
    return float(np.sum(r + 2.0 * r * r))


def elimination_tree(indptr, indices, perm, position):
    """Liu's algorithm on the permuted pattern (symmetric)."""
    n = perm.size
    parent = -np.ones(n, dtype=np.int64)
    ancestor = -np.ones(n, dtype=np.int64)
    for k in range(n):
        v = perm[k]
        for u in indices[indptr[v]:indptr[v + 1]]:
            i = position[u]
            if i >= k:
                continue
            # climb from i to the root with path compression
            while ancestor[i] != -1 and ancestor[i] != k:
                nxt = ancestor[i]
                ancestor[i] = k
                i = nxt
            if ancestor[i] == -1:
                ancestor[i] = k
                parent[i] = k
    return parent


def cluster_blocks(reach: sp.csr_matrix, blocks, weights, leaf: int):
    """Reorder ``blocks`` so that consecutive runs of about ``leaf`` scalars are compact.

    Recursive bisection of the subgraph induced by ``reach`` on ``blocks``:
    each part is split in two halves of a breadth-first sweep started from
    a pseudo-peripheral node.  Disconnected pieces are handled one by one
    and consecutive small clusters are merged up to ``leaf``.  Returns the
    reordered blocks and the scalar offset at which each cluster starts.
    """
    blocks = np.asarray(blocks, dtype=np.int64)
    if blocks.size < 2 or weights[blocks].sum() <= leaf:
        return blocks, np.zeros(min(blocks.size, 1), dtype=np.int64)
    sub = reach[blocks][:, blocks].tocsr()
    w = weights[blocks]
    out = []
    stack = [np.arange(blocks.size)]
    while stack:
        idx = stack.pop()
        if w[idx].sum() <= leaf or idx.size < 2:
            out.append(idx)
            continue
        g = sub[idx][:, idx]
        ncomp, lab = connected_components(g, directed=False)
        if ncomp > 1:
            parts = [idx[lab == c] for c in range(ncomp)]
            stack.extend(parts[::-1])
            continue
        order = breadth_first_order(g, 0, directed=False, return_predecessors=False)
        order = breadth_first_order(g, int(order[-1]), directed=False, return_predecessors=False)
        cw = np.cumsum(w[idx[order]])
        cut = int(np.searchsorted(cw, cw[-1] / 2.0)) + 1
        cut = min(max(cut, 1), idx.size - 1)
        stack.append(idx[order[cut:]])
        stack.append(idx[order[:cut]])
    sizes = []
    for i in out:
        wi = int(w[i].sum())
        if sizes and sizes[-1] + wi <= leaf:
            sizes[-1] += wi
        else:
            sizes.append(wi)
    return blocks[np.concatenate(out)], np.concatenate([[0], np.cumsum(sizes)[:-1]])


def cluster_fronts(plan: "EliminationPlan", graph: BlockGraph, leaf: int) -> None:
    """Cluster the pivot and CB blocks of every front in place.

    Separator faces are often connected only through eliminated cells, so
    the clustering graph also links blocks at distance two.
    """
    a = graph.adj.astype(np.int32)
    reach = ((a + a @ a) != 0).astype(np.int8).tocsr()
    w = np.asarray(graph.weights, dtype=np.int64)
    for f in plan.fronts:
        f.pivots, f.fs_splits = cluster_blocks(reach, f.pivots, w, leaf)
        f.cb, f.cb_splits = cluster_blocks(reach, f.cb, w, leaf)


def symbolic_factorize(graph: BlockGraph, perm, relax_size: int = 96,
                       relax_fraction: float = 0.75, cluster: bool = True) -> EliminationPlan:
    """Fronts, index sets and full-rank cost predictions for a block order.

    Fundamental supernodes are formed first; a child is then amalgamated
    into its parent when the merged pivot block stays below ``relax_size``
    scalars and most of the child's CB already lies in the parent front.
    With ``cluster`` the blocks inside each front are then regrouped so
    that the tiles of the BLR factorization cover compact sets of faces.
    """
    perm = np.asarray(perm, dtype=np.int64)
    n = perm.size
    position = np.empty(n, dtype=np.int64)
    position[perm] = np.arange(n)
    adj = graph.adj
    w = np.asarray(graph.weights, dtype=np.int64)
    parent = elimination_tree(adj.indptr, adj.indices, perm, position)

    children = [[] for _ in range(n)]
    for k in range(n):
        if parent[k] >= 0:
            children[parent[k]].append(k)

    # row structure of every column (positions strictly after k)
    struct = [None] * n
    for k in range(n):
        v = perm[k]
        nb = position[adj.indices[adj.indptr[v]:adj.indptr[v + 1]]]
        parts = [nb[nb > k]]
        for c in children[k]:
            s = struct[c]
            parts.append(s[s > k])
        struct[k] = np.unique(np.concatenate(parts)) if len(parts) > 1 else np.sort(parts[0])

    # fundamental supernodes
    sn_of = -np.ones(n, dtype=np.int64)
    sn_cols = []
    for k in range(n):
        ch = children[k]
        if (len(ch) == 1 and ch[0] == k - 1 and struct[k - 1].size == struct[k].size + 1):
            sid = sn_of[k - 1]
            sn_cols[sid].append(k)
            sn_of[k] = sid
        else:
            sn_of[k] = len(sn_cols)
            sn_cols.append([k])
    ns = len(sn_cols)
    sn_struct = [struct[c[-1]] for c in sn_cols]
    sn_parent = np.array([sn_of[parent[c[-1]]] if parent[c[-1]] >= 0 else -1 for c in sn_cols])
    fs_w = np.array([w[perm[c]].sum() for c in sn_cols])
    cb_w = np.array([w[perm[s]].sum() for s in sn_struct])

    # relaxed amalgamation, children are always numbered before parents
    alive = np.ones(ns, dtype=bool)
    merged_into = np.arange(ns)
    for s in range(ns):
        t = sn_parent[s]
        if t < 0:
            continue
        t = _find(merged_into, t)
        if fs_w[s] + fs_w[t] <= relax_size and cb_w[s] >= relax_fraction * (fs_w[t] + cb_w[t]):
            sn_cols[t] = sn_cols[s] + sn_cols[t]
            fs_w[t] += fs_w[s]
            alive[s] = False
            merged_into[s] = t
    fronts = []
    for s in range(ns):
        if not alive[s]:
            continue
        cols = np.array(sorted(sn_cols[s]), dtype=np.int64)
        # amalgamated pivot sets need the union of their column structures
        cb = np.setdiff1d(np.unique(np.concatenate([struct[c] for c in cols])), cols)
        f = Front(len(fronts), perm[cols], perm[cb])
        f.nfs = int(w[f.pivots].sum())
        f.ncb = int(w[f.cb].sum())
        fronts.append(f)
    block_front = np.empty(n, dtype=np.int64)
    for f in fronts:
        block_front[f.pivots] = f.index
    for f in fronts:
        if f.cb.size:
            # parent front owns the first CB block
            first = f.cb[np.argmin(position[f.cb])]
            f.parent = int(block_front[first])
            fronts[f.parent].children.append(f.index)
    fr_entries = float(sum(f.nfs * f.nfs + 2 * f.nfs * f.ncb for f in fronts))
    fr_flops = float(sum(front_flops(f.nfs, f.nfs + f.ncb) for f in fronts))
    plan = EliminationPlan(perm, position, fronts, block_front, w, np.asarray(graph.offsets),
                           fr_entries, fr_flops)
    if cluster:
        cluster_fronts(plan, graph, CLUSTER_SIZE)
    else:
        for f in fronts:
            f.fs_splits = np.arange(0, f.nfs, CLUSTER_SIZE)
            f.cb_splits = np.arange(0, f.ncb, CLUSTER_SIZE)
    return plan


def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i
