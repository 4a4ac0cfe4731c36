"""Fill-reducing orderings of a block graph.

``amd`` is an approximate minimum degree ordering on the quotient
(element/variable) graph with weighted degrees and aggressive element
absorption.  ``nested_dissection`` bisects recursively with breadth-first
level-set separators and finishes small parts with ``amd``.
"""
from __future__ import annotations

import heapq

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .graph import BlockGraph


def natural(graph: BlockGraph) -> np.ndarray:
    return np.arange(graph.n_nodes)


def _amd_core(indptr, indices, w):
    n = len(indptr) - 1
    A = [set(indices[indptr[i]:indptr[i + 1]].tolist()) for i in range(n)]
    for i in range(n):
        A[i].discard(i)
    E = [set() for _ in range(n)]
    Le = {}
    welem = {}
    deg = [sum(w[j] for j in A[i]) for i in range(n)]
    heap = [(deg[i], i) for i in range(n)]
    heapq.heapify(heap)
    done = [False] * n
    remaining = sum(w)
    order = []
    while heap:
        d, p = heapq.heappop(heap)
        if done[p] or d != deg[p]:
            continue
        done[p] = True
        order.append(p)
        remaining -= w[p]
        Lp = set(A[p])
        absorbed = E[p]
        for e in absorbed:
            Lp |= Le.pop(e)
            welem.pop(e)
        Lp.discard(p)
        A[p] = set()
        E[p] = set()
        wLp = sum(w[i] for i in Lp)
        Le[p] = Lp
        welem[p] = wLp
        # external weights |Le \ Lp| of elements touching Lp
        ext = {}
        for i in Lp:
            for e in E[i]:
                if e in absorbed:
                    continue
                if e not in ext:
                    ext[e] = welem[e]
                ext[e] -= w[i]
        for e, we in ext.items():
            if we == 0:
                # element e is covered by the new element: absorb it
                for i in Le[e]:
                    E[i].discard(e)
                del Le[e], welem[e]
        for i in Lp:
            Ei = E[i]
            Ei -= absorbed
            Ei.add(p)
            A[i] -= Lp
            A[i].discard(p)
            dA = sum(w[j] for j in A[i])
            dE = 0
            for e in Ei:
                if e != p:
                    dE += ext.get(e, welem[e])
            wi = w[i]
            new = min(remaining - wi, deg[i] + wLp - wi, dA + wLp - wi + dE)
            if new != deg[i]:
                deg[i] = new
            heapq.heappush(heap, (deg[i], i))
    return np.array(order, dtype=np.int64)


def amd(graph: BlockGraph) -> np.ndarray:
    """Approximate minimum degree ordering (weighted by block sizes)."""
    adj = graph.adj
    return _amd_core(adj.indptr, adj.indices, graph.weights.astype(int).tolist())


def _subgraph(adj, nodes):
    return adj[nodes][:, nodes].tocsr()


def _bfs_levels(adj, start):
    order, pred = breadth_first_order(adj, start, directed=False, return_predecessors=True)
    level = np.full(adj.shape[0], -1)
    level[start] = 0
    for v in order[1:]:
        level[v] = level[pred[v]] + 1
    return order, level


def _pseudo_peripheral(adj, start):
    node, ecc = start, -1
    for _ in range(4):
        order, level = _bfs_levels(adj, node)
        far = order[np.argmax(level[order])]
        if level[far] <= ecc:
            break
        ecc = level[far]
        node = far
    return node


def nested_dissection(graph: BlockGraph, leaf_size: int = 64) -> np.ndarray:
    """Recursive level-set bisection; separators are ordered last."""
    adj = graph.adj.tocsr()
    w = graph.weights.astype(float)
    out = []

    def recurse(nodes):
        if nodes.size <= leaf_size:
            sub = _subgraph(adj, nodes)
            sub_g = BlockGraph(sub, graph.weights[nodes], np.zeros(nodes.size + 1))
            out.extend(nodes[amd(sub_g)].tolist())
            return
        sub = _subgraph(adj, nodes)
        ncomp, labels = connected_components(sub, directed=False)
        if ncomp > 1:
            for c in range(ncomp):
                recurse(nodes[labels == c])
            return
        root = _pseudo_peripheral(sub, 0)
        order, level = _bfs_levels(sub, root)
        wl = np.bincount(level, weights=w[nodes], minlength=level.max() + 1)
        cum = np.cumsum(wl)
        half = cum[-1] / 2.0
        sep_level = int(np.searchsorted(cum, half))
        sep_level = min(max(sep_level, 1), level.max() - 1) if level.max() >= 2 else -1
        if sep_level < 0:
            sub_g = BlockGraph(sub, graph.weights[nodes], np.zeros(nodes.size + 1))
            out.extend(nodes[amd(sub_g)].tolist())
            return
        lo = nodes[level < sep_level]
        hi = nodes[level > sep_level]
        sep = nodes[level == sep_level]
        recurse(lo)
        recurse(hi)
        out.extend(sep.tolist())

    recurse(np.arange(graph.n_nodes))
    return np.array(out, dtype=np.int64)


def reorder(graph: BlockGraph, method: str = "amd") -> np.ndarray:
    """Elimination order of the block nodes (a permutation of range(n))."""
    if method == "amd":
        perm = amd(graph)
    elif method == "nested_dissection":
        perm = nested_dissection(graph)
    elif method == "natural":
        perm = natural(graph)
    else:
        raise ValueError(f"unknown ordering {method!r}")
    if perm.size != graph.n_nodes or np.unique(perm).size != graph.n_nodes:
        raise RuntimeError("ordering is not a permutation")
    return perm
