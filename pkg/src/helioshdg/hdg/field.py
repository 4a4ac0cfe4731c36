"""Volume reconstruction from the trace solution and point evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from ..mesh import Mesh
from .assembly import CondensedSystem
from .reference import lagrange_tet, n_tet, tet_nodes, tet_quadrature

CONTAIN_TOL = 1e-10
KNN = 8


class PointLocationError(ValueError):
    pass


@dataclass(eq=False)
class WaveField:
    """Trace and volume coefficients of one or more solved sources.

    ``volume[c]`` has shape (4 n_c, n_sources) ordered (u_x, u_y, u_z, w)
    with n_c Lagrange coefficients per component.
    """

    mesh: Mesh
    cell_orders: np.ndarray
    face_offsets: np.ndarray
    trace: np.ndarray
    volume: list
    _locator: Optional["CellLocator"] = field(default=None, repr=False)

    @property
    def n_sources(self) -> int:
        return self.trace.shape[1]

    def locator(self) -> "CellLocator":
        if self._locator is None:
            self._locator = CellLocator(self.mesh)
        return self._locator

    def nodal_w(self, source: int = 0):
        """Per-cell nodal w values and the physical node coordinates."""
        pts, vals = [], []
        X = self.mesh.vertices[self.mesh.cells]
        for c, coef in enumerate(self.volume):
            p = int(self.cell_orders[c])
            nodes = tet_nodes(p)
            J = (X[c, 1:] - X[c, :1]).T
            pts.append(X[c, 0] + nodes @ J.T)
            vals.append(coef[3 * n_tet(p):, source])
        return pts, vals


def reconstruct_volume(system: CondensedSystem, lam) -> WaveField:
    """U_e = A_e^-1 F_e - A_e^-1 C_e R_e lambda for every cell."""
    lam = np.asarray(lam)
    if lam.ndim == 0 or lam.shape[0] != system.n_trace:
        raise ValueError("trace vector has the wrong length")
    lam2 = lam.reshape(system.n_trace, -1)
    ns = system.S.shape[1]
    if lam2.shape[1] != ns:
        raise ValueError(f"expected {ns} solution column(s), got {lam2.shape[1]}")
    volume = [None] * system.mesh.n_cells
    for b in system.batches:
        U = b.AiF - np.einsum("bij,bjs->bis", b.AiC, lam2[b.dofs])
        for c, u in zip(b.cells, U):
            volume[int(c)] = u
    return WaveField(system.mesh, system.cell_orders, system.face_offsets, lam2, volume)


class CellLocator:
    """Point location with a centroid k-d tree and barycentric tests."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        X = mesh.vertices[mesh.cells]
        self.origin = X[:, 0]
        self.Jinv = np.linalg.inv(np.transpose(X[:, 1:] - X[:, :1], (0, 2, 1)))
        self.tree = cKDTree(mesh.centroids())
        self.radius = float(mesh.diameters().max())

    def barycentric(self, cells, x):
        xi = np.einsum("bij,bj->bi", self.Jinv[cells], x - self.origin[cells])
        return np.concatenate([1.0 - xi.sum(axis=1, keepdims=True), xi], axis=1)

    def locate(self, x) -> np.ndarray:
        """Containing cell of every point (lowest index on ties), -1 if outside.

        Points strictly inside one of their nearest-centroid candidates are
        resolved in bulk; points on shared faces or missed by the candidate
        list go through an exhaustive search of every cell within reach.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = -np.ones(x.shape[0], dtype=np.int64)
        k = min(KNN, self.mesh.n_cells)
        _, cand = self.tree.query(x, k=k)
        cand = cand.reshape(x.shape[0], k)
        lam = self.barycentric(cand.ravel(), np.repeat(x, k, axis=0)).reshape(x.shape[0], k, 4)
        mins = lam.min(axis=2)
        best = np.argmax(mins, axis=1)
        strict = mins[np.arange(x.shape[0]), best] > CONTAIN_TOL
        out[strict] = cand[strict, best[strict]]
        rest = np.flatnonzero(~strict)
        if rest.size:
            for i, cs in zip(rest, self.tree.query_ball_point(x[rest], self.radius)):
                if not cs:
                    continue
                cs = np.sort(np.asarray(cs, dtype=np.int64))
                lam_i = self.barycentric(cs, np.broadcast_to(x[i], (cs.size, 3)))
                inside = np.flatnonzero(lam_i.min(axis=1) >= -CONTAIN_TOL)
                if inside.size:
                    out[i] = cs[inside[0]]
        return out


def _reference_coords(loc: CellLocator, cells, x):
    return np.einsum("bij,bj->bi", loc.Jinv[cells], x - loc.origin[cells])


def evaluate_points(fld: WaveField, x, source: int = 0):
    """(u, w, inside) at many points; outside points get NaN values."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    loc = fld.locator()
    cells = loc.locate(x)
    inside = cells >= 0
    u = np.full((x.shape[0], 3), np.nan + 0j)
    w = np.full(x.shape[0], np.nan + 0j)
    idx = np.flatnonzero(inside)
    if idx.size:
        xi = _reference_coords(loc, cells[idx], x[idx])
        orders = fld.cell_orders[cells[idx]]
        for p in np.unique(orders):
            sel = idx[orders == p]
            phi = lagrange_tet(int(p), xi[orders == p])
            n = n_tet(int(p))
            coef = np.stack([fld.volume[c][:, source] for c in cells[sel]])   # (k, 4n)
            vals = np.einsum("ki,kci->kc", phi, coef.reshape(-1, 4, n))
            u[sel] = vals[:, :3]
            w[sel] = vals[:, 3]
    return u, w, inside


def evaluate_field(fld: WaveField, x, source: int = 0):
    """(u, w) at a single point inside the mesh."""
    u, w, inside = evaluate_points(fld, np.asarray(x, dtype=float).reshape(1, 3), source)
    if not inside[0]:
        raise PointLocationError(f"point {tuple(float(v) for v in np.ravel(x))} lies outside the mesh")
    return u[0], w[0]


def l2_error(fld: WaveField, exact, source: int = 0, extra_degree: int = 4):
    """(||w_h - w||_L2, ||w||_L2) with ``exact`` evaluated at quadrature points."""
    mesh = fld.mesh
    X = mesh.vertices[mesh.cells]
    err2 = ref2 = 0.0
    for p in np.unique(fld.cell_orders):
        p = int(p)
        cells = np.flatnonzero(fld.cell_orders == p)
        pts, wts = tet_quadrature(2 * p + extra_degree)
        phi = lagrange_tet(p, pts)
        J = np.transpose(X[cells, 1:] - X[cells, :1], (0, 2, 1))
        xq = X[cells, :1] + np.einsum("qk,bdk->bqd", pts, J)
        wq = wts[None] * np.abs(np.linalg.det(J))[:, None]
        n = n_tet(p)
        coef = np.stack([fld.volume[c][3 * n:, source] for c in cells])
        wh = coef @ phi.T
        we = np.asarray(exact(xq.reshape(-1, 3))).reshape(wh.shape)
        err2 += float((wq * np.abs(wh - we) ** 2).sum())
        ref2 += float((wq * np.abs(we) ** 2).sum())
    return np.sqrt(err2), np.sqrt(ref2)
