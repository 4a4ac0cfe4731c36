"""Multifrontal LU with block low-rank panels and mixed-precision storage.

Every front is a dense matrix whose leading rows/columns are fully summed
(own pivots plus pivots delayed by children) and whose trailing part is
the contribution block (CB) passed to the parent.  Fronts are factored in
panels: threshold partial pivoting inside the panel, a triangular solve
for the panel's U rows, compression of the off-diagonal L and U tiles,
then one update of the trailing matrix with the compressed tiles
(compress before update).

Factor entries are tracked by global row/column ids, so delayed pivots
and row interchanges never require rewriting stored tiles.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .compress import (FULL, LOW, MID, WEIGHTS, WEIGHTS_ALT, Tile, compress_tile,
                       compression_flops, demote_precision)
from .symbolic import EliminationPlan, front_flops

log = logging.getLogger(__name__)

PIVOT_THRESHOLD = 0.01
PANEL = 64
MIN_BLR_FRONT = 256     # fronts smaller than this stay full rank


class FactorizationError(RuntimeError):
    pass


@dataclass(eq=False)
class Panel:
    rows: np.ndarray        # pivot row ids
    cols: np.ndarray        # pivot column ids
    diag: np.ndarray        # unit-lower L11 and U11 packed
    l_ids: np.ndarray       # row ids below the panel at factor time
    l_tiles: list           # (start, stop, Tile) along l_ids
    u_ids: np.ndarray       # column ids right of the panel at factor time
    u_tiles: list           # (start, stop, Tile) along u_ids


@dataclass(eq=False)
class SolveStats:
    n_op_pct: float = 100.0
    n_entries_pct: float = 100.0
    n_entries_pct_mp: float = 100.0
    n_entries_pct_mp_alt: float = 100.0
    factor_memory: int = 0
    analysis_time: float = 0.0
    factorize_time: float = 0.0
    solve_time: float = 0.0
    cond: Optional[float] = None
    bwd: Optional[float] = None
    blr_flops: float = 0.0
    fr_flops: float = 0.0
    blr_entries: float = 0.0
    fr_entries: float = 0.0
    delayed_pivots: int = 0
    lowrank_tiles: int = 0
    dense_tiles: int = 0
    precision_counts: dict = field(default_factory=lambda: {"full": 0, "mid": 0, "low": 0})

    def as_dict(self) -> dict:
        return {
            "n_op_pct": self.n_op_pct,
            "n_entries_pct": self.n_entries_pct,
            "n_entries_pct_mp": self.n_entries_pct_mp,
            "n_entries_pct_mp_alt": self.n_entries_pct_mp_alt,
            "factor_memory": self.factor_memory,
            "cond": self.cond,
            "bwd": self.bwd,
            "blr_flops": self.blr_flops,
            "fr_flops": self.fr_flops,
            "blr_entries": self.blr_entries,
            "fr_entries": self.fr_entries,
            "delayed_pivots": self.delayed_pivots,
            "lowrank_tiles": self.lowrank_tiles,
            "dense_tiles": self.dense_tiles,
            "precision_counts": dict(self.precision_counts),
            "timings": {"analysis": self.analysis_time, "factorize": self.factorize_time,
                        "solve": self.solve_time},
        }


@dataclass(eq=False)
class BlrFactors:
    """Factors of diag(row_scale) K diag(col_scale) stored panel by panel."""

    n: int
    panels: list
    row_scale: np.ndarray
    col_scale: np.ndarray
    eps_blr: Optional[float]
    mixed_precision: bool
    stats: SolveStats
    plan: EliminationPlan
    matrix: Optional[sp.csr_matrix] = None


def equilibrate(K):
    """Row then column max-scaling, both as positive vectors."""
    A = sp.csr_matrix(K)
    absA = abs(A)
    rmax = absA.max(axis=1).toarray().ravel()
    r = np.where(rmax > 0, 1.0 / np.where(rmax > 0, rmax, 1.0), 1.0)
    cmax = (sp.diags(r) @ absA).max(axis=0).toarray().ravel()
    c = np.where(cmax > 0, 1.0 / np.where(cmax > 0, cmax, 1.0), 1.0)
    return r, c


# ---------------------------------------------------------------------------
# cost model


def _update_flops(lt: Tile, ut: Tile, inner: int) -> float:
    m, n = lt.shape[0], ut.shape[1]
    if not lt.is_lowrank and not ut.is_lowrank:
        return 2.0 * m * inner * n
    if lt.is_lowrank and not ut.is_lowrank:
        k = lt.rank
        return 2.0 * k * inner * n + 2.0 * m * k * n
    if not lt.is_lowrank and ut.is_lowrank:
        k = ut.rank
        return 2.0 * m * inner * k + 2.0 * m * k * n
    k1, k2 = lt.rank, ut.rank
    c = 2.0 * k1 * inner * k2
    if k1 <= k2:
        return c + 2.0 * k1 * k2 * n + 2.0 * m * k1 * n
    return c + 2.0 * m * k1 * k2 + 2.0 * m * k2 * n


# ---------------------------------------------------------------------------
# front factorization


class _Counters:
    def __init__(self):
        self.flops = 0.0
        self.entries = 0.0
        self.mp = 0.0
        self.mp_alt = 0.0
        self.nbytes = 0
        self.delayed = 0
        self.lr = 0
        self.dense = 0
        self.tags = np.zeros(3, dtype=np.int64)

    def tile(self, t: Tile):
        self.entries += t.entries
        self.mp += t.weighted_entries(WEIGHTS)
        self.mp_alt += t.weighted_entries(WEIGHTS_ALT)
        self.nbytes += t.nbytes()
        if t.is_lowrank:
            self.lr += 1
            if t.tags is not None:
                self.tags += np.bincount(t.tags, minlength=3)
            else:
                self.tags[FULL] += t.rank
        else:
            self.dense += 1

    def dense_block(self, nentries: int):
        self.entries += nentries
        self.mp += nentries
        self.mp_alt += nentries
        self.nbytes += 16 * nentries


def tile_tolerance(tile: np.ndarray, eps: float) -> float:
    """Relative truncation tolerance for a factor tile.

    The matrix is equilibrated to unit max entries, so eps is also used as
    an absolute cap: tiles grown by pivoting beyond unit Frobenius norm are
    truncated at eps / ||tile||, which keeps the componentwise backward error
    near eps when delayed pivots inflate the factors.
    """
    nrm = float(np.linalg.norm(tile))
    return eps if nrm <= 1.0 else max(eps / nrm, np.finfo(float).tiny)


def _tiles(block: np.ndarray, axis: int, starts, eps, mixed: bool, cnt: _Counters):
    """Split along ``axis`` at ``starts`` (at most PANEL wide), compress each piece.

    Returns (stored tiles, compute tiles).  With ``mixed`` the stored copy is
    demoted while the trailing update uses the double-precision one, so the
    low-rank structure does not depend on the storage format.
    """
    out, compute = [], []
    size = block.shape[axis]
    edges = []
    for s, e in zip(starts, list(starts[1:]) + [size]):
        edges.extend((a, min(a + PANEL, e)) for a in range(s, e, PANEL))
    for s, e in edges:
        sub = block[s:e] if axis == 0 else block[:, s:e]
        if eps is None:
            t = Tile(sub.shape, dense=sub.copy())
        else:
            tol = tile_tolerance(sub, eps)
            t = compress_tile(sub, tol)
            cnt.flops += compression_flops(sub.shape[0], sub.shape[1],
                                           t.rank if t.is_lowrank else min(sub.shape))
        compute.append(t)
        if mixed and eps is not None:
            t = demote_precision(t, tol)
        cnt.tile(t)
        out.append((s, e, t))
    return out, compute


def _starts_after(splits, k):
    """Tile starts of the range [k, ...) relative to k."""
    rest = splits[splits > k] - k
    return np.concatenate([[0], rest]).astype(np.int64)


def _factor_front(F, rows, cols, nfs, is_root, eps, mixed, cnt, threshold=PIVOT_THRESHOLD,
                  splits=None):
    """Partial LU of the leading ``nfs`` columns of the dense front ``F`` in place.

    Returns (number eliminated, panels).  ``rows``/``cols`` are id arrays
    permuted together with ``F``.  ``splits`` lists the positions where a
    cluster starts; panels and tiles do not straddle them.
    """
    if splits is None:
        splits = np.arange(0, F.shape[0], PANEL)
    splits = np.asarray(splits, dtype=np.int64)
    nrow = F.shape[0]
    panels = []
    nfs_eff = nfs                      # columns beyond nfs_eff (within fs) are delayed
    k0 = 0
    while k0 < nfs_eff:
        nxt = splits[splits > k0]
        k1 = min(k0 + PANEL, nfs_eff, int(nxt[0]) if nxt.size else nfs_eff)
        j = k0
        while j < min(k1, nfs_eff):
            col = F[j:, j]
            colmax = np.abs(col).max() if col.size else 0.0
            # candidate rows: fully summed rows not yet pivoted
            cand = np.abs(F[j:nfs, j]) if not is_root else np.abs(col)
            r = int(np.argmax(cand)) + j if cand.size else j
            ok = cand.size and cand[r - j] > 0 and cand[r - j] >= threshold * colmax
            if is_root and colmax == 0.0:
                raise FactorizationError("structurally or numerically singular matrix")
            if not ok:
                # delay column j: it leaves the panel in its un-updated state and
                # the last live fully-summed column takes its place
                last = nfs_eff - 1
                _revert_panel_updates(F, k0, j, j)
                _swap_cols(F, cols, j, last)
                if last >= k1:
                    _apply_panel_updates(F, k0, j, j)
                nfs_eff -= 1
                k1 = min(k1, nfs_eff)
                cnt.delayed += 1
                continue
            if r != j:
                F[[j, r], k0:] = F[[r, j], k0:]
                rows[[j, r]] = rows[[r, j]]
            piv = F[j, j]
            F[j + 1:, j] /= piv
            if j + 1 < k1:
                F[j + 1:, j + 1:k1] -= np.outer(F[j + 1:, j], F[j, j + 1:k1])
            j += 1
        kend = j
        b = kend - k0
        if b == 0:
            break
        cnt.flops += front_flops(b, nrow - k0)
        # U12; every column right of the panel is still un-updated here
        if F.shape[1] > kend:
            F[k0:kend, kend:] = sla.solve_triangular(F[k0:kend, k0:kend], F[k0:kend, kend:],
                                                   lower=True, unit_diagonal=True,
                                                   check_finite=False)
        Lblk = F[kend:, k0:kend]
        Ublk = F[k0:kend, kend:]
        starts = _starts_after(splits, kend)
        lt, lc = _tiles(Lblk, 0, starts[starts < Lblk.shape[0]], eps, mixed, cnt)
        ut, uc = _tiles(Ublk, 1, starts[starts < Ublk.shape[1]], eps, mixed, cnt)
        cnt.dense_block(b * b)
        if F.shape[1] > kend and F.shape[0] > kend:
            if eps is None:
                F[kend:, kend:] -= Lblk @ Ublk
            else:
                Lt = np.vstack([t.to_dense() for t in lc])
                Ut = np.hstack([t.to_dense() for t in uc])
                F[kend:, kend:] -= Lt @ Ut
                # replace the dense trailing-update count by the tile cost model
                cnt.flops -= 2.0 * (nrow - kend) * b * (F.shape[1] - kend)
                for tl in lc:
                    for tu in uc:
                        cnt.flops += _update_flops(tl, tu, b)
        panels.append(Panel(rows[k0:kend].copy(), cols[k0:kend].copy(), F[k0:kend, k0:kend].copy(),
                            rows[kend:].copy(), lt, cols[kend:].copy(), ut))
        k0 = kend
    return k0, panels


def _revert_panel_updates(F, k0, j, c):
    """Undo the in-panel eliminations k0..j-1 on column c."""
    if j == k0:
        return
    L = F[k0:j, k0:j]
    u = F[k0:j, c].copy()
    F[j:, c] += F[j:, k0:j] @ u
    F[k0:j, c] = np.tril(L, -1) @ u + u


def _apply_panel_updates(F, k0, j, c):
    """Apply the in-panel eliminations k0..j-1 to column c."""
    if j == k0:
        return
    F[k0:j, c] = sla.solve_triangular(F[k0:j, k0:j], F[k0:j, c], lower=True,
                                      unit_diagonal=True, check_finite=False)
    F[j:, c] -= F[j:, k0:j] @ F[k0:j, c]


def _swap_cols(F, cols, a, b):
    if a != b:
        F[:, [a, b]] = F[:, [b, a]]
        cols[[a, b]] = cols[[b, a]]


# ---------------------------------------------------------------------------
# driver


def factorize(K, plan: EliminationPlan, eps_blr: Optional[float] = None,
              mixed_precision: bool = False, threshold: float = PIVOT_THRESHOLD,
              keep_matrix: bool = True) -> BlrFactors:
    """Numerical multifrontal factorization following ``plan``."""
    t0 = time.perf_counter()
    K = sp.csr_matrix(K)
    n = K.shape[0]
    if eps_blr is not None and not 0 < eps_blr < 1:
        raise ValueError("eps_blr must lie in (0, 1)")
    r, c = equilibrate(K)
    A = sp.coo_matrix(sp.diags(r) @ K @ sp.diags(c))
    offs = plan.offsets
    sizes = np.diff(offs)
    owner_block = np.repeat(np.arange(sizes.size), sizes)
    pos = plan.position[owner_block]
    # each entry goes to the front of the earlier of its two blocks
    first = np.minimum(pos[A.row], pos[A.col])
    front_of = plan.block_front[plan.perm[first]]
    order = np.argsort(front_of, kind="stable")
    arow, acol, aval = A.row[order], A.col[order], A.data[order]
    bounds = np.searchsorted(front_of[order], np.arange(plan.n_fronts + 1))

    def dofs(blocks):
        if blocks.size == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(offs[b], offs[b + 1]) for b in blocks])

    cnt = _Counters()
    pending = {}                # front index -> list of (row ids, col ids, CB, ndelayed)
    rowpos = -np.ones(n, dtype=np.int64)
    colpos = -np.ones(n, dtype=np.int64)
    panels = []
    for f in plan.fronts:
        own = dofs(f.pivots)
        cbd = dofs(f.cb)
        contribs = pending.pop(f.index, [])
        drow = [x[0][:x[3]] for x in contribs]
        dcol = [x[1][:x[3]] for x in contribs]
        rows = np.concatenate([own] + drow + [cbd])
        cols = np.concatenate([own] + dcol + [cbd])
        nfs = rows.size - cbd.size
        F = np.zeros((rows.size, cols.size), dtype=complex)
        rowpos[rows] = np.arange(rows.size)
        colpos[cols] = np.arange(cols.size)
        s, e = bounds[f.index], bounds[f.index + 1]
        ri, ci = rowpos[arow[s:e]], colpos[acol[s:e]]
        if np.any(ri < 0) or np.any(ci < 0):
            raise FactorizationError("matrix pattern does not match the elimination plan")
        np.add.at(F, (ri, ci), aval[s:e])
        for crow, ccol, cb, _ in contribs:
            F[np.ix_(rowpos[crow], colpos[ccol])] += cb
        rowpos[rows] = -1
        colpos[cols] = -1
        is_root = f.parent < 0
        eps_f = eps_blr if rows.size >= MIN_BLR_FRONT else None
        nown = own.size
        splits = np.concatenate([f.fs_splits, np.arange(nown, nfs, PANEL), nfs + f.cb_splits])
        nelim, fpanels = _factor_front(F, rows, cols, nfs, is_root, eps_f, mixed_precision, cnt,
                                       threshold, np.unique(splits))
        if is_root and nelim < nfs:
            raise FactorizationError("singular matrix: pivots left at a root front")
        panels.extend(fpanels)
        if not is_root:
            nd = nfs - nelim
            pending.setdefault(f.parent, []).append(
                (rows[nelim:].copy(), cols[nelim:].copy(), F[nelim:, nelim:].copy(), nd))
        del F
    stats = SolveStats()
    stats.fr_flops = plan.fr_flops
    stats.fr_entries = plan.fr_entries
    stats.blr_flops = cnt.flops
    stats.blr_entries = cnt.entries
    stats.n_op_pct = 100.0 * cnt.flops / plan.fr_flops if plan.fr_flops else 100.0
    stats.n_entries_pct = 100.0 * cnt.entries / plan.fr_entries if plan.fr_entries else 100.0
    stats.n_entries_pct_mp = 100.0 * cnt.mp / cnt.entries if cnt.entries else 100.0
    stats.n_entries_pct_mp_alt = 100.0 * cnt.mp_alt / cnt.entries if cnt.entries else 100.0
    stats.factor_memory = int(cnt.nbytes)
    stats.delayed_pivots = cnt.delayed
    stats.lowrank_tiles = cnt.lr
    stats.dense_tiles = cnt.dense
    stats.precision_counts = {"full": int(cnt.tags[FULL]), "mid": int(cnt.tags[MID]),
                              "low": int(cnt.tags[LOW])}
    stats.factorize_time = time.perf_counter() - t0
    return BlrFactors(n, panels, r, c, eps_blr, mixed_precision, stats, plan,
                      K if keep_matrix else None)


# ---------------------------------------------------------------------------
# triangular solves


def _apply_tiles(tiles, vec, trans=False):
    """Stacked product of a tiled panel with ``vec``."""
    parts = []
    for s, e, t in tiles:
        if t.is_lowrank:
            X, Y = t.factors()
            parts.append((s, e, X @ (Y.T @ vec) if not trans else Y @ (X.T @ vec)))
        else:
            parts.append((s, e, t.dense @ vec if not trans else t.dense.T @ vec))
    return parts


def solve(factors: BlrFactors, rhs, trans: str = "N"):
    """Solve K x = b (``trans='N'``), K^T x = b ('T') or K^H x = b ('C')."""
    t0 = time.perf_counter()
    b = np.asarray(rhs)
    vec = b.ndim == 1
    B = b.reshape(factors.n, -1).astype(complex)
    if B.shape[0] != factors.n:
        raise ValueError("right-hand side has the wrong length")
    if trans == "C":
        return np.conj(solve(factors, np.conj(b), "T"))
    r, c = factors.row_scale[:, None], factors.col_scale[:, None]
    if trans == "N":
        y = B * r
        for p in factors.panels:
            yp = sla.solve_triangular(p.diag, y[p.rows], lower=True, unit_diagonal=True,
                                      check_finite=False)
            y[p.rows] = yp
            for s, e, v in _apply_tiles(p.l_tiles, yp):
                y[p.l_ids[s:e]] -= v
        x = np.zeros_like(y)
        for p in reversed(factors.panels):
            acc = y[p.rows].copy()
            for s, e, t in p.u_tiles:
                xs = x[p.u_ids[s:e]]
                if t.is_lowrank:
                    X, Y = t.factors()
                    acc -= X @ (Y.T @ xs)
                else:
                    acc -= t.dense @ xs
            x[p.cols] = sla.solve_triangular(p.diag, acc, lower=False, check_finite=False)
        out = x * c
    elif trans == "T":
        d = B * c
        t_ = np.zeros_like(d)
        for p in factors.panels:
            tp = sla.solve_triangular(p.diag, d[p.cols], lower=False, trans="T",
                                      check_finite=False)
            t_[p.rows] = tp
            for s, e, v in _apply_tiles(p.u_tiles, tp, trans=True):
                d[p.u_ids[s:e]] -= v
        z = t_
        for p in reversed(factors.panels):
            acc = z[p.rows].copy()
            for s, e, t in p.l_tiles:
                zs = z[p.l_ids[s:e]]
                if t.is_lowrank:
                    X, Y = t.factors()
                    acc -= Y @ (X.T @ zs)
                else:
                    acc -= t.dense.T @ zs
            z[p.rows] = sla.solve_triangular(p.diag, acc, lower=True, trans="T",
                                             unit_diagonal=True, check_finite=False)
        out = z * r
    else:
        raise ValueError(f"unknown trans {trans!r}")
    factors.stats.solve_time += time.perf_counter() - t0
    return out[:, 0] if vec else out
