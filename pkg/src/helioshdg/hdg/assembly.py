"""HDG local matrices, static condensation and the global trace system.

Per cell the unknowns are ordered (u_x, u_y, u_z, w), each with ``n``
Lagrange coefficients, followed on the trace side by the four faces in
local order.  Trace unknowns on a face use the sorted-global-vertex
parametrisation so both neighbours see the same basis.

Cells are processed in batches sharing one order signature (cell order and
the four face orders); inside a batch every operation is a stacked numpy
kernel.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..background import (CoefficientSet, PerturbationField, RadialBackground, SolverConfig,
                          eval_coefficients)
from ..mesh import Mesh
from .reference import (MAX_ORDER, TET_FACES, TET_VERTICES, face_tables, lagrange_tri, n_tet,
                        n_tri, reference_element, tri_nodes, tri_quadrature)

log = logging.getLogger(__name__)


class AssemblyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# orders and stabilisation


def dof_target(p):
    return 10.0 - 0.8 * (np.asarray(p, dtype=float) - 3.0)


def select_order(h, wavelength, p_min: int = 1, p_max: int = MAX_ORDER):
    """Smallest order with (p+1) * wavelength / h above the dof target.

    Works elementwise on arrays; returns ``p_max`` where nothing qualifies.
    """
    h = np.asarray(h, dtype=float)
    wl = np.asarray(wavelength, dtype=float)
    if np.any(h <= 0) or np.any(wl <= 0):
        raise ValueError("cell size and wavelength must be positive")
    ratio = wl / h
    out = np.full(np.broadcast(h, wl).shape, p_max, dtype=int)
    done = np.zeros(out.shape, dtype=bool)
    for p in range(p_min, p_max + 1):
        ok = ~done & ((p + 1) * ratio >= dof_target(p))
        out[ok] = p
        done |= ok
    return int(out) if out.ndim == 0 else out


def assign_orders(mesh: Mesh, bg: RadialBackground, cfg: SolverConfig,
                  pert: Optional[PerturbationField] = None, p_min: int = 1,
                  p_max: int = MAX_ORDER) -> np.ndarray:
    from ..mesh import local_wavelength

    return np.atleast_1d(select_order(mesh.diameters(), local_wavelength(mesh, bg, cfg, pert=pert),
                                      p_min, p_max))


def stabilization_tau(A, beta, normal, omega: float, tau_scale: float = 1e6):
    """tau = |A^-1 beta . n| - tau_scale i omega |n^T A^-1 n| (vectorised over leading axes)."""
    A = np.asarray(A, dtype=complex)
    beta = np.asarray(beta, dtype=complex)
    normal = np.asarray(normal, dtype=float)
    lead = np.broadcast_shapes(A.shape[:-2], beta.shape[:-1], normal.shape[:-1])
    A = np.broadcast_to(A, lead + (3, 3))
    rhs = np.stack([np.broadcast_to(beta, lead + (3,)),
                    np.broadcast_to(normal, lead + (3,)).astype(complex)], axis=-1)
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise AssemblyError("singular momentum operator in stabilisation") from exc
    n = np.broadcast_to(normal, lead + (3,))
    adv = np.einsum("...i,...i->...", sol[..., 0], n)
    acc = np.einsum("...i,...i->...", n, sol[..., 1])
    return np.abs(adv) - tau_scale * 1j * omega * np.abs(acc)


@lru_cache(maxsize=None)
def trace_node_permutation(p: int, perm: tuple) -> np.ndarray:
    """Local-face node index for every node in the sorted-vertex parametrisation."""
    nodes = tri_nodes(p)
    bg = np.stack([1 - nodes[:, 0] - nodes[:, 1], nodes[:, 0], nodes[:, 1]], axis=1)
    bl = np.empty_like(bg)
    bl[:, list(perm)] = bg
    key = np.rint(bl[:, 1:] * p).astype(int)
    lookup = {tuple(k): i for i, k in enumerate(np.rint(nodes * p).astype(int))}
    return np.array([lookup[tuple(k)] for k in key])


# ---------------------------------------------------------------------------
# local matrices


@dataclass
class LocalMatrices:
    """HDG blocks of one cell (or a stacked batch when arrays carry a leading axis).

    A : (4n, 4n) volume operator, C : (4n, m) trace -> volume,
    B : (m, 4n) volume -> trace, L : (m, m), F : (4n, ns) load.
    ``m`` is the sum of the four face dof counts in local face order.
    """

    A: np.ndarray
    C: np.ndarray
    B: np.ndarray
    L: np.ndarray
    F: np.ndarray
    order: int
    face_orders: tuple


Source = Callable[[np.ndarray], np.ndarray]


@dataclass
class HdgOptions:
    length_scale: Optional[float] = None    # defaults to the background's
    robin_floor: float = 1e-6               # absolute floor on |Z.n|
    robin_relative: float = 1e-3            # relative floor on |Z.n| / |Z|
    dirichlet: Optional[Callable] = None     # prescribed boundary trace instead of Robin


def _coefficients(bg, pert, cfg, x, override):
    flat = x.reshape(-1, 3)
    if override is not None:
        cs = override(flat)
    else:
        cs = eval_coefficients(bg, pert, cfg, flat)
    return cs


def _eval_sources(sources, x):
    flat = x.reshape(-1, 3)
    if not sources:
        return np.zeros(flat.shape[:1] + (0,))
    cols = [np.asarray(s(flat), dtype=complex).reshape(flat.shape[0]) for s in sources]
    return np.stack(cols, axis=1)


def _batch_local(mesh: Mesh, cells: np.ndarray, p: int, fos: tuple, bg, pert, cfg, sources,
                 opts: HdgOptions, coef_override=None, counters=None):
    """Stacked LocalMatrices for cells sharing order p and face orders ``fos``.

    Trace columns are already in the sorted-vertex parametrisation.
    """
    nb = cells.size
    ref = reference_element(p)
    n = ref.ndof
    ns = len(sources)
    L_scale = bg.length_scale if opts.length_scale is None else opts.length_scale

    X = mesh.vertices[mesh.cells[cells]]                 # (nb, 4, 3)
    J = np.transpose(X[:, 1:] - X[:, :1], (0, 2, 1))     # columns are edge vectors
    detJ = np.linalg.det(J)
    Jinv = np.linalg.inv(J)
    xq = X[:, :1] + np.einsum("qk,bdk->bqd", ref.points, J)
    wq = ref.weights[None] * np.abs(detJ)[:, None]       # (nb, nq)
    nq = ref.points.shape[0]

    cs = _coefficients(bg, pert, cfg, xq, coef_override)
    A = cs.A.reshape(nb, nq, 3, 3) * L_scale
    beta = cs.beta.reshape(nb, nq, 3) * L_scale
    varrho = cs.rho_coef.reshape(nb, nq) * L_scale
    fsrc = _eval_sources(sources, xq).reshape(nb, nq, ns) * (cs.src_scale.reshape(nb, nq, 1) * L_scale)

    # weighted mass matrices for the 9 + 3 + 1 coefficient fields
    coef = np.concatenate([A.reshape(nb, nq, 9), beta, varrho[..., None]], axis=2)
    Pw = (wq[..., None] * coef)                          # (nb, nq, 13)
    M = np.einsum("bqc,qi,qj->bcij", Pw, ref.phi, ref.phi, optimize=True)
    dphys = np.einsum("qik,bkd->bqid", ref.dphi, Jinv)   # physical gradients
    G = np.einsum("bq,bqid,qj->bdij", wq, dphys, ref.phi, optimize=True)   # int d_d phi_i phi_j
    Fv = np.einsum("bq,qi,bqs->bis", wq, ref.phi, fsrc, optimize=True)

    Ae = np.zeros((nb, 4 * n, 4 * n), dtype=complex)
    for d in range(3):
        for e in range(3):
            Ae[:, d * n:(d + 1) * n, e * n:(e + 1) * n] = M[:, 3 * d + e]
        Ae[:, d * n:(d + 1) * n, 3 * n:] = M[:, 9 + d] - G[:, d]
        Ae[:, 3 * n:, d * n:(d + 1) * n] = np.transpose(G[:, d], (0, 2, 1)) - M[:, 9 + d]
    Ae[:, 3 * n:, 3 * n:] = M[:, 12]
    Fe = np.zeros((nb, 4 * n, ns), dtype=complex)
    Fe[:, 3 * n:] = Fv

    nz = [n_tri(q) for q in fos]
    offs = np.concatenate([[0], np.cumsum(nz)])
    m = int(offs[-1])
    Ce = np.zeros((nb, 4 * n, m), dtype=complex)
    Be = np.zeros((nb, m, 4 * n), dtype=complex)
    Le = np.zeros((nb, m, m), dtype=complex)

    areas = mesh.face_areas()
    n_floor = 0
    for l in range(4):
        wts, phi_f, zeta = face_tables(p, fos[l], l, (0, 1, 2))
        fv = TET_VERTICES[list(TET_FACES[l])]
        pts_tri = _tri_points(p, fos[l])
        bary = np.stack([1 - pts_tri[:, 0] - pts_tri[:, 1], pts_tri[:, 0], pts_tri[:, 1]], axis=1)
        xi = bary @ fv                                    # reference-cell coordinates
        xf = X[:, :1] + np.einsum("qk,bdk->bqd", xi, J)  # (nb, nqf, 3)
        nqf = xi.shape[0]
        fid = mesh.cell_faces[cells, l]
        dS = wts[None] * (2.0 * areas[fid])[:, None]      # (nb, nqf)
        nrm = mesh.face_normals[cells, l]                 # (nb, 3)
        csf = _coefficients(bg, pert, cfg, xf, coef_override)
        Af = csf.A.reshape(nb, nqf, 3, 3)
        bf = csf.beta.reshape(nb, nqf, 3)
        tau = stabilization_tau(Af, bf, nrm[:, None, :], cfg.omega, cfg.tau_scale)
        wt = dS * tau
        sl = slice(offs[l], offs[l + 1])
        Ae[:, 3 * n:, 3 * n:] -= np.einsum("bq,qi,qj->bij", wt, phi_f, phi_f, optimize=True)
        Cn = np.einsum("bq,qi,qj->bij", dS, phi_f, zeta, optimize=True)
        for d in range(3):
            Ce[:, d * n:(d + 1) * n, sl] = Cn * nrm[:, d, None, None]
        Ct = np.einsum("bq,qi,qj->bij", wt, phi_f, zeta, optimize=True)
        Ce[:, 3 * n:, sl] = Ct
        for d in range(3):
            Be[:, sl, d * n:(d + 1) * n] = np.transpose(Cn, (0, 2, 1)) * nrm[:, d, None, None]
        Be[:, sl, 3 * n:] = -np.transpose(Ct, (0, 2, 1))
        Lt = wt.copy()
        bnd = mesh.boundary[fid]
        if np.any(bnd) and opts.dirichlet is None:
            zn = np.einsum("bqd,bd->bq", csf.z_bc.reshape(nb, nqf, 3), nrm)
            znorm = np.linalg.norm(csf.z_bc.reshape(nb, nqf, 3), axis=2)
            thresh = np.maximum(opts.robin_relative * znorm, opts.robin_floor)
            low = bnd[:, None] & (np.abs(zn) < thresh)
            n_floor += int(low.sum())
            zn = np.where(low, np.where(zn > 0, 1.0, -1.0) * thresh, zn)
            Lt = Lt + np.where(bnd[:, None], dS / np.where(zn == 0, 1.0, zn), 0.0)
        Le[:, sl, sl] = np.einsum("bq,qi,qj->bij", Lt, zeta, zeta, optimize=True)

    # face dofs into the sorted-vertex parametrisation
    for l in range(4):
        sl = np.arange(offs[l], offs[l + 1])
        perms = [mesh.face_permutation(c, l) for c in cells]
        idx = np.stack([sl[trace_node_permutation(fos[l], pm)] for pm in perms])   # (nb, nz)
        full = np.broadcast_to(np.arange(m), (nb, m)).copy()
        full[:, sl] = idx
        Ce = np.take_along_axis(Ce, full[:, None, :], axis=2)
        Be = np.take_along_axis(Be, full[:, :, None], axis=1)
        Le = np.take_along_axis(np.take_along_axis(Le, full[:, :, None], axis=1), full[:, None, :], axis=2)
    if counters is not None:
        counters["robin_floor_points"] = counters.get("robin_floor_points", 0) + n_floor
    return LocalMatrices(Ae, Ce, Be, Le, Fe, p, tuple(fos))


@lru_cache(maxsize=None)
def _tri_points(p_cell, p_face):
    return tri_quadrature(2 * max(p_cell, p_face) + 2)[0]


def face_orders_from_cells(mesh: Mesh, cell_orders) -> np.ndarray:
    co = np.asarray(cell_orders, dtype=int)
    fc = mesh.face_cells
    other = np.where(fc[:, 1] >= 0, co[np.maximum(fc[:, 1], 0)], 0)
    return np.maximum(co[fc[:, 0]], other)


def assemble_local(mesh: Mesh, cell: int, bg: RadialBackground, cfg: SolverConfig,
                   cell_orders, sources: Sequence[Source] = (), pert=None,
                   options: Optional[HdgOptions] = None, coef_override=None) -> LocalMatrices:
    """Local HDG blocks of a single cell (trace columns in sorted-vertex order)."""
    co = np.broadcast_to(np.asarray(cell_orders, dtype=int), (mesh.n_cells,))
    fo = face_orders_from_cells(mesh, co)
    fos = tuple(int(fo[f]) for f in mesh.cell_faces[cell])
    lm = _batch_local(mesh, np.array([cell]), int(co[cell]), fos, bg, pert, cfg, list(sources),
                      options or HdgOptions(), coef_override)
    return LocalMatrices(lm.A[0], lm.C[0], lm.B[0], lm.L[0], lm.F[0], lm.order, lm.face_orders)


def condense(local: LocalMatrices):
    """Schur complement onto the trace: (L - B A^-1 C, -B A^-1 F) plus A^-1 C, A^-1 F.

    Accepts single-cell or stacked matrices.  Rows and columns of A are
    equilibrated first: the stabilisation makes the w rows larger than the
    u rows by roughly tau_scale, and an unscaled solve loses those digits.
    """
    A = local.A
    amax = np.abs(A).max(axis=-1)
    if np.any(amax == 0):
        raise AssemblyError("singular local volume operator")
    r = 1.0 / amax
    As = A * r[..., :, None]
    cmax = np.abs(As).max(axis=-2)
    if np.any(cmax == 0):
        raise AssemblyError("singular local volume operator")
    c = 1.0 / cmax
    As = As * c[..., None, :]
    rhs = np.concatenate([local.C, local.F], axis=-1) * r[..., :, None]
    try:
        sol = np.linalg.solve(As, rhs) * c[..., :, None]
    except np.linalg.LinAlgError as exc:
        raise AssemblyError("singular local volume operator") from exc
    m = local.C.shape[-1]
    AiC, AiF = sol[..., :m], sol[..., m:]
    K = local.L - local.B @ AiC
    S = -(local.B @ AiF)
    return K, S, AiC, AiF


# ---------------------------------------------------------------------------
# global system


@dataclass
class CellBatch:
    cells: np.ndarray
    order: int
    face_orders: tuple
    dofs: np.ndarray        # (nb, m) global trace dof indices
    AiC: np.ndarray         # (nb, 4n, m)
    AiF: np.ndarray         # (nb, 4n, ns)


@dataclass
class CondensedSystem:
    """Global trace system K Lambda = S with per-cell reconstruction data."""

    K: sp.csr_matrix
    S: np.ndarray
    mesh: Mesh
    cell_orders: np.ndarray
    face_orders: np.ndarray
    face_offsets: np.ndarray
    batches: list
    dirichlet_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    dirichlet_values: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @property
    def n_trace(self) -> int:
        return int(self.face_offsets[-1])

    @property
    def n_volume(self) -> int:
        return int(sum(4 * n_tet(int(p)) for p in self.cell_orders))

    @property
    def face_sizes(self) -> np.ndarray:
        return np.diff(self.face_offsets)


def assemble_global(mesh: Mesh, bg: RadialBackground, pert: Optional[PerturbationField],
                    cfg: SolverConfig, sources: Sequence[Source], cell_orders=None,
                    options: Optional[HdgOptions] = None, cell_order_permutation=None,
                    coef_override=None, keep_local: bool = False) -> CondensedSystem:
    """Assemble and condense every cell into the face-trace system.

    ``cell_orders`` may be an int (uniform) or a per-cell array; by default
    orders follow the local wavelength rule.  ``cell_order_permutation``
    changes only the order in which cell contributions are summed.
    """
    opts = options or HdgOptions()
    if cell_orders is None:
        co = assign_orders(mesh, bg, cfg, pert)
    else:
        co = np.broadcast_to(np.asarray(cell_orders, dtype=int), (mesh.n_cells,)).copy()
    if co.min() < 1 or co.max() > MAX_ORDER:
        raise ValueError("cell orders outside [1, 8]")
    fo = face_orders_from_cells(mesh, co)
    fsz = (fo + 1) * (fo + 2) // 2
    foff = np.concatenate([[0], np.cumsum(fsz)]).astype(np.int64)
    ns = len(sources)
    ntr = int(foff[-1])

    sig = np.concatenate([co[:, None], fo[mesh.cell_faces]], axis=1)
    keys, inv = np.unique(sig, axis=0, return_inverse=True)
    inv = inv.ravel()
    sequence = np.arange(mesh.n_cells) if cell_order_permutation is None else np.asarray(cell_order_permutation)

    rows, cols, vals = [], [], []
    S = np.zeros((ntr, ns), dtype=complex)
    batches, locals_ = [], []
    counters = {}
    chunk = 2048
    for g, key in enumerate(keys):
        members = sequence[inv[sequence] == g]
        p, fos = int(key[0]), tuple(int(v) for v in key[1:])
        for start in range(0, members.size, chunk):
            cells = members[start:start + chunk]
            try:
                lm = _batch_local(mesh, cells, p, fos, bg, pert, cfg, list(sources), opts,
                                  coef_override, counters)
                Ke, Se, AiC, AiF = condense(lm)
            except AssemblyError:
                bad = _failing_cells(mesh, cells, p, fos, bg, pert, cfg, opts, coef_override)
                raise AssemblyError(f"singular local operator in cell(s) {bad[:10]}") from None
            dofs = np.concatenate([foff[f][:, None] + np.arange(n_tri(q))[None, :]
                                   for f, q in zip(mesh.cell_faces[cells].T, fos)], axis=1)
            m = dofs.shape[1]
            rows.append(np.repeat(dofs, m, axis=1).ravel())
            cols.append(np.tile(dofs, (1, m)).ravel())
            vals.append(Ke.ravel())
            if ns:
                np.add.at(S, dofs.ravel(), Se.reshape(-1, ns))
            batches.append(CellBatch(cells, p, fos, dofs, AiC, AiF))
            if keep_local:
                locals_.append((cells, lm))
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(ntr, ntr)).tocsr()
    K.sum_duplicates()
    info = {"robin_floor_points": counters.get("robin_floor_points", 0)}
    if info["robin_floor_points"]:
        warnings.warn(f"|Z.n| floored at {info['robin_floor_points']} boundary quadrature points",
                      RuntimeWarning, stacklevel=2)
    system = CondensedSystem(K, S, mesh, co, fo, foff, batches, info=info)
    if keep_local:
        system.info["local"] = locals_
    if opts.dirichlet is not None:
        _impose_dirichlet(system, opts.dirichlet)
    return system


def _impose_dirichlet(system: CondensedSystem, g: Callable) -> None:
    """Replace boundary trace rows by the L2 projection of g and lift to the rhs."""
    mesh = system.mesh
    bfaces = np.flatnonzero(mesh.boundary)
    ns = system.S.shape[1]
    dofs, vals = [], []
    for f in bfaces:
        q = int(system.face_orders[f])
        st, w = tri_quadrature(2 * q + 2)
        zeta = lagrange_tri(q, st)
        x = mesh.vertices[mesh.faces[f]]
        xq = x[0] + st[:, :1] * (x[1] - x[0]) + st[:, 1:2] * (x[2] - x[0])
        Mf = (zeta * w[:, None]).T @ zeta
        gv = np.asarray(g(xq), dtype=complex).reshape(len(w), -1)
        coef = np.linalg.solve(Mf, (zeta * w[:, None]).T @ gv)
        dofs.append(system.face_offsets[f] + np.arange(zeta.shape[1]))
        vals.append(coef)
    dofs = np.concatenate(dofs)
    vals = np.concatenate(vals)
    vals = np.broadcast_to(vals, (vals.shape[0], ns)).copy() if vals.shape[1] == 1 else vals
    K = system.K.tocsc()
    lift = K[:, dofs] @ vals
    system.S = system.S - lift
    system.S[dofs] = vals
    mask = np.zeros(K.shape[0], dtype=bool)
    mask[dofs] = True
    D = sp.diags((~mask).astype(float))
    K = (D @ K @ D + sp.diags(mask.astype(float))).tocsr()
    K.eliminate_zeros()
    system.K = K
    system.dirichlet_dofs = dofs
    system.dirichlet_values = vals


def _failing_cells(mesh, cells, p, fos, bg, pert, cfg, opts, coef_override):
    """Redo a failed batch cell by cell to name the culprits."""
    bad = []
    for c in cells:
        try:
            condense(_batch_local(mesh, np.array([c]), p, fos, bg, pert, cfg, [], opts,
                                  coef_override))
        except AssemblyError:
            bad.append(int(c))
    return bad


def trace_ratio(system: CondensedSystem) -> float:
    """dim(Lambda) / sum of cell volume dofs."""
    return system.n_trace / system.n_volume


def monolithic_system(mesh: Mesh, bg, pert, cfg, sources, cell_orders, options=None,
                      coef_override=None):
    """Uncondensed volume + trace block system as a sparse matrix.

    Unknowns are all cell volume blocks (cell by cell) followed by the
    global trace.  Intended as a dense-solve oracle on small meshes.
    """
    opts = options or HdgOptions()
    if opts.dirichlet is not None:
        raise ValueError("the monolithic oracle supports the Robin closure only")
    sys_ = assemble_global(mesh, bg, pert, cfg, sources, cell_orders, opts,
                           coef_override=coef_override, keep_local=True)
    co = sys_.cell_orders
    nvol = 4 * np.array([n_tet(int(p)) for p in co])
    voff = np.concatenate([[0], np.cumsum(nvol)])
    ntr = sys_.n_trace
    N = int(voff[-1]) + ntr
    rows, cols, vals = [], [], []
    rhs = np.zeros((N, len(sources)), dtype=complex)

    def put(r, c, blk):
        rr, cc = np.meshgrid(r, c, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(blk.ravel())

    for (cells, lm), batch in zip(sys_.info["local"], sys_.batches):
        for k, c in enumerate(cells):
            v = voff[c] + np.arange(nvol[c])
            t = voff[-1] + batch.dofs[k]
            put(v, v, lm.A[k])
            put(v, t, lm.C[k])
            put(t, v, lm.B[k])
            put(t, t, lm.L[k])
            rhs[v] += lm.F[k]
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N)).tocsr()
    return M, rhs, voff, sys_
