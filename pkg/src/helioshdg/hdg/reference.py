"""Reference simplices: quadrature rules and nodal Lagrange bases.

The reference tetrahedron has vertices (0,0,0), (1,0,0), (0,1,0), (0,0,1)
and the reference triangle (0,0), (1,0), (0,1).  Lagrange bases are built
from equispaced nodes through a Vandermonde matrix in the orthonormal
simplex (Dubiner) basis, which keeps the nodal transform well conditioned
up to order 8.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import gamma, sqrt

import numpy as np
from scipy.special import eval_jacobi, roots_jacobi

MAX_ORDER = 8

TET_VERTICES = np.array(
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
)
# local face l is opposite local vertex l
TET_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))


def n_tet(p: int) -> int:
    return (p + 1) * (p + 2) * (p + 3) // 6


def n_tri(p: int) -> int:
    return (p + 1) * (p + 2) // 2


# ---------------------------------------------------------------------------
# quadrature


def _gauss_jacobi01(n: int, alpha: int):
    """Points on [0, 1] and weights for the weight function (1 - v)**alpha."""
    x, w = roots_jacobi(n, alpha, 0)
    return (1.0 + x) / 2.0, w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def tet_quadrature(degree: int):
    """Collapsed Gauss-Jacobi rule on the reference tetrahedron.

    Exact for polynomials of total degree ``degree``; weights sum to 1/6.
    """
    n = max(1, (degree + 2) // 2)
    u, wu = _gauss_jacobi01(n, 0)
    v, wv = _gauss_jacobi01(n, 1)
    w, ww = _gauss_jacobi01(n, 2)
    U, V, W = np.meshgrid(u, v, w, indexing="ij")
    wts = (wu[:, None, None] * wv[None, :, None] * ww[None, None, :]).ravel()
    x = U * (1 - V) * (1 - W)
    y = V * (1 - W)
    z = W
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    return pts, wts


@lru_cache(maxsize=None)
def tri_quadrature(degree: int):
    """Collapsed Gauss-Jacobi rule on the reference triangle (weights sum to 1/2)."""
    n = max(1, (degree + 2) // 2)
    u, wu = _gauss_jacobi01(n, 0)
    v, wv = _gauss_jacobi01(n, 1)
    U, V = np.meshgrid(u, v, indexing="ij")
    wts = (wu[:, None] * wv[None, :]).ravel()
    pts = np.stack([(U * (1 - V)).ravel(), V.ravel()], axis=1)
    return pts, wts


# ---------------------------------------------------------------------------
# orthonormal simplex polynomials


def _jacobi_normalized(n: int, alpha: float, x, beta: float = 0.0):
    """Jacobi polynomial P_n^(alpha, beta) scaled to unit weighted L2 norm."""
    g = (
        2 ** (alpha + beta + 1)
        / (2 * n + alpha + beta + 1)
        * gamma(n + alpha + 1)
        * gamma(n + beta + 1)
        / (gamma(n + alpha + beta + 1) * gamma(n + 1))
    )
    return eval_jacobi(n, alpha, beta, x) / sqrt(g)


def _djacobi(n: int, alpha: float, x):
    # derivative of the normalized P_n^(alpha, 0)
    if n == 0:
        return np.zeros_like(x)
    return sqrt(n * (n + alpha + 1)) * _jacobi_normalized(n - 1, alpha + 1, x, beta=1.0)


def _tet_exponents(p: int):
    return [
        (i, j, k)
        for i in range(p + 1)
        for j in range(p + 1 - i)
        for k in range(p + 1 - i - j)
    ]


def _tet_collapsed(xyz):
    r, s, t = (2 * xyz[:, 0] - 1, 2 * xyz[:, 1] - 1, 2 * xyz[:, 2] - 1)
    den_a = -s - t
    a = np.where(np.abs(den_a) > 1e-14, 2 * (1 + r) / np.where(den_a == 0, 1, den_a) - 1, -1.0)
    den_b = 1 - t
    b = np.where(np.abs(den_b) > 1e-14, 2 * (1 + s) / np.where(den_b == 0, 1, den_b) - 1, -1.0)
    return a, b, t


def dubiner_tet(p: int, xyz, grad: bool = False):
    """Orthonormal basis of P_p on the reference tetrahedron.

    Returns values (npts, nbasis) and, if ``grad``, gradients with respect
    to (x, y, z) with shape (npts, nbasis, 3).
    """
    xyz = np.atleast_2d(np.asarray(xyz, dtype=float))
    a, b, c = _tet_collapsed(xyz)
    exps = _tet_exponents(p)
    V = np.empty((xyz.shape[0], len(exps)))
    G = np.empty((xyz.shape[0], len(exps), 3)) if grad else None
    ob = 0.5 * (1 - b)
    oc = 0.5 * (1 - c)
    for m, (i, j, k) in enumerate(exps):
        fa = _jacobi_normalized(i, 0, a)
        gb = _jacobi_normalized(j, 2 * i + 1, b)
        hc = _jacobi_normalized(k, 2 * (i + j) + 2, c)
        V[:, m] = 2 * sqrt(2) * fa * gb * (1 - b) ** i * hc * (1 - c) ** (i + j)
        if not grad:
            continue
        dfa = _djacobi(i, 0, a)
        dgb = _djacobi(j, 2 * i + 1, b)
        dhc = _djacobi(k, 2 * (i + j) + 2, c)
        vr = dfa * gb * hc
        if i > 0:
            vr = vr * ob ** (i - 1)
        if i + j > 0:
            vr = vr * oc ** (i + j - 1)
        vs = 0.5 * (1 + a) * vr
        tmp = dgb * ob**i
        if i > 0:
            tmp = tmp - 0.5 * i * gb * ob ** (i - 1)
        if i + j > 0:
            tmp = tmp * oc ** (i + j - 1)
        tmp = fa * tmp * hc
        vs = vs + tmp
        vt = 0.5 * (1 + a) * vr + 0.5 * (1 + b) * tmp
        tmp = dhc * oc ** (i + j)
        if i + j > 0:
            tmp = tmp - 0.5 * (i + j) * hc * oc ** (i + j - 1)
        tmp = fa * gb * tmp * ob**i
        vt = vt + tmp
        scale = 2 ** (2 * i + j + 1.5)
        # d/dx = 2 d/dr on the [0, 1] reference element
        G[:, m, 0] = 2 * scale * vr
        G[:, m, 1] = 2 * scale * vs
        G[:, m, 2] = 2 * scale * vt
    return (V, G) if grad else V


def dubiner_tri(p: int, st):
    st = np.atleast_2d(np.asarray(st, dtype=float))
    r, s = 2 * st[:, 0] - 1, 2 * st[:, 1] - 1
    den = 1 - s
    a = np.where(np.abs(den) > 1e-14, 2 * (1 + r) / np.where(den == 0, 1, den) - 1, -1.0)
    b = s
    cols = []
    for i in range(p + 1):
        for j in range(p + 1 - i):
            h1 = _jacobi_normalized(i, 0, a)
            h2 = _jacobi_normalized(j, 2 * i + 1, b)
            cols.append(sqrt(2) * h1 * h2 * (1 - b) ** i)
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# nodal sets and Lagrange bases


def tet_nodes(p: int) -> np.ndarray:
    return np.array(
        [
            (i / p, j / p, k / p)
            for k in range(p + 1)
            for j in range(p + 1 - k)
            for i in range(p + 1 - j - k)
        ]
    )


def tri_nodes(p: int) -> np.ndarray:
    return np.array([(i / p, j / p) for j in range(p + 1) for i in range(p + 1 - j)])


@lru_cache(maxsize=None)
def _tet_inv_vandermonde(p: int) -> np.ndarray:
    return np.linalg.inv(dubiner_tet(p, tet_nodes(p)))


@lru_cache(maxsize=None)
def _tri_inv_vandermonde(p: int) -> np.ndarray:
    return np.linalg.inv(dubiner_tri(p, tri_nodes(p)))


def lagrange_tet(p: int, xyz, grad: bool = False):
    """Nodal Lagrange basis of order p at reference points."""
    Vi = _tet_inv_vandermonde(p)
    if grad:
        V, G = dubiner_tet(p, xyz, grad=True)
        return V @ Vi, np.einsum("qbd,bn->qnd", G, Vi)
    return dubiner_tet(p, xyz) @ Vi


def lagrange_tri(p: int, st):
    return dubiner_tri(p, st) @ _tri_inv_vandermonde(p)


@dataclass(frozen=True)
class ReferenceElement:
    """Tabulated order-p tetrahedral element.

    ``phi`` has shape (nq, n) and ``dphi`` (nq, n, 3) at the volume
    quadrature points ``points`` with weights ``weights``.
    """

    order: int
    nodes: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray

    @property
    def ndof(self) -> int:
        return self.nodes.shape[0]


@lru_cache(maxsize=None)
def reference_element(p: int) -> ReferenceElement:
    if not 1 <= p <= MAX_ORDER:
        raise ValueError(f"polynomial order {p} outside [1, {MAX_ORDER}]")
    pts, wts = tet_quadrature(2 * p + 2)
    phi, dphi = lagrange_tet(p, pts, grad=True)
    return ReferenceElement(p, tet_nodes(p), pts, wts, phi, dphi)


@lru_cache(maxsize=None)
def face_tables(p_cell: int, p_face: int, local_face: int, perm: tuple):
    """Basis tables on one local face of the reference tetrahedron.

    ``perm`` lists, for the face's global (sorted) vertex order, the
    position of that vertex within the cell-local face vertex triple.
    Returns (weights, cell basis at points, trace basis at points) where the
    weights sum to 1/2 (reference triangle measure).
    """
    pts, wts = tri_quadrature(2 * max(p_cell, p_face) + 2)
    bary_local = np.stack([1 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]], axis=1)
    fv = TET_VERTICES[list(TET_FACES[local_face])]
    xyz = bary_local @ fv
    phi = lagrange_tet(p_cell, xyz)
    bary_global = bary_local[:, list(perm)]
    zeta = lagrange_tri(p_face, bary_global[:, 1:])
    return wts, phi, zeta
