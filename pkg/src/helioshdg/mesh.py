"""Tetrahedral meshes: layered balls, Kuhn cubes and Gmsh 2.2 files.

Local face ``l`` of a cell is the triangle opposite its local vertex ``l``.
Faces are stored globally as sorted vertex triples; a face's orientation
sign is +1 in the lower-index cell sharing it and -1 in the other.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

LOCAL_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming tetrahedral mesh with global face numbering.

    Attributes
    ----------
    vertices : (nv, 3) float
    cells : (nc, 4) int, positively oriented
    faces : (nf, 3) int, sorted vertex ids
    cell_faces : (nc, 4) int, global face of each local face
    cell_face_sign : (nc, 4) int, +1 for the lower-index owner, -1 otherwise
    face_cells : (nf, 2) int, adjacent cells (second entry -1 on the boundary)
    boundary : (nf,) bool
    face_normals : (nc, 4, 3) float, outward unit normals per cell face
    """

    vertices: np.ndarray
    cells: np.ndarray
    faces: np.ndarray
    cell_faces: np.ndarray
    cell_face_sign: np.ndarray
    face_cells: np.ndarray
    boundary: np.ndarray
    face_normals: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def cell_coords(self, cells=None) -> np.ndarray:
        c = self.cells if cells is None else self.cells[cells]
        return self.vertices[c]

    def volumes(self) -> np.ndarray:
        return signed_volumes(self.vertices, self.cells)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    def diameters(self) -> np.ndarray:
        """Longest edge of every cell."""
        x = self.vertices[self.cells]
        d = [np.linalg.norm(x[:, i] - x[:, j], axis=1) for i, j in itertools.combinations(range(4), 2)]
        return np.max(d, axis=0)

    def face_areas(self) -> np.ndarray:
        x = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)

    def face_permutation(self, cell: int, local_face: int) -> tuple:
        """Position of each sorted face vertex inside the cell-local face triple."""
        loc = self.cells[cell, LOCAL_FACES[local_face]]
        glob = self.faces[self.cell_faces[cell, local_face]]
        return tuple(int(np.flatnonzero(loc == v)[0]) for v in glob)


def signed_volumes(vertices, cells) -> np.ndarray:
    x = vertices[cells]
    e = x[:, 1:] - x[:, :1]
    return np.linalg.det(e) / 6.0


def from_cells(vertices, cells, reorient: bool = True) -> Mesh:
    """Build face tables and normals from raw cell-vertex incidence."""
    vertices = np.ascontiguousarray(vertices, dtype=float)
    cells = np.array(cells, dtype=np.int64).reshape(-1, 4)
    if cells.size == 0:
        raise MeshError("mesh has no cells")
    if cells.min() < 0 or cells.max() >= vertices.shape[0]:
        raise MeshError("cell refers to a missing vertex")
    used = np.zeros(vertices.shape[0], dtype=bool)
    used[cells.ravel()] = True
    if not used.all():
        raise MeshError(f"{int((~used).sum())} dangling vertices")
    vol = signed_volumes(vertices, cells)
    scale = np.abs(vol).max()
    if np.any(np.abs(vol) <= 1e-12 * scale):
        raise MeshError("degenerate (zero-volume) cell")
    if reorient:
        neg = vol < 0
        cells[neg] = cells[neg][:, [1, 0, 2, 3]]
    elif np.any(vol < 0):
        raise MeshError("negatively oriented cell")

    nc = cells.shape[0]
    tri = np.sort(cells[:, LOCAL_FACES].reshape(-1, 3), axis=1)
    faces, inverse, counts = np.unique(tri, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if counts.max() > 2:
        raise MeshError("non-manifold face shared by more than two cells")
    cell_faces = inverse.reshape(nc, 4)
    nf = faces.shape[0]

    owner = np.repeat(np.arange(nc), 4)
    order = np.lexsort((owner, inverse))
    face_cells = -np.ones((nf, 2), dtype=np.int64)
    first = np.ones(order.size, dtype=bool)
    first[1:] = inverse[order[1:]] != inverse[order[:-1]]
    face_cells[inverse[order[first]], 0] = owner[order[first]]
    face_cells[inverse[order[~first]], 1] = owner[order[~first]]
    boundary = face_cells[:, 1] < 0

    sign = np.where(face_cells[cell_faces, 0] == np.arange(nc)[:, None], 1, -1)

    x = vertices[cells]
    normals = np.empty((nc, 4, 3))
    for l in range(4):
        a, b, c = (x[:, i] for i in LOCAL_FACES[l])
        n = np.cross(b - a, c - a)
        # outward: away from the opposite vertex
        flip = np.einsum("ij,ij->i", n, x[:, l] - a) > 0
        n[flip] *= -1
        normals[:, l] = n / np.linalg.norm(n, axis=1)[:, None]
    return Mesh(vertices, cells, faces, cell_faces, sign, face_cells, boundary, normals)


# ---------------------------------------------------------------------------
# generators


def build_cube(n: int, length: float = 1.0, origin=(0.0, 0.0, 0.0)) -> Mesh:
    """Uniform Kuhn subdivision of a cube into 6 n**3 tetrahedra."""
    if n < 1:
        raise MeshError("cube needs n >= 1")
    g = np.linspace(0.0, length, n + 1)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1) + np.asarray(origin, float)

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    I, J, K = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    base = np.stack([I.ravel(), J.ravel(), K.ravel()], axis=1)
    eye = np.eye(3, dtype=int)
    cells = []
    for perm in itertools.permutations(range(3)):
        p0 = base
        p1 = p0 + eye[perm[0]]
        p2 = p1 + eye[perm[1]]
        p3 = p2 + eye[perm[2]]
        cells.append(np.stack([vid(*p.T) for p in (p0, p1, p2, p3)], axis=1))
    cells = np.stack(cells, axis=1).reshape(-1, 4)
    return from_cells(verts, cells)


def icosphere(level: int):
    """Unit icosphere vertices and triangles after ``level`` midpoint subdivisions."""
    t = (1 + math.sqrt(5)) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    tris = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
            (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
            (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in tris:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        tris = new
    return np.array(verts), np.array(tris, dtype=np.int64)


@dataclass(frozen=True)
class LayerSpec:
    """Shell radii for a layered ball.

    ``interior_radii`` and ``surface_radii`` together give every shell; the
    last surface radius is the outer boundary.
    """

    interior_radii: Sequence[float]
    surface_radii: Sequence[float]
    angular_resolution: int = 2

    def __post_init__(self):
        r = self.radii
        if len(r) == 0:
            raise MeshError("layer spec has no radii")
        if r[0] <= 0 or np.any(np.diff(r) <= 0):
            raise MeshError("shell radii must be positive and strictly increasing")
        if self.angular_resolution < 0:
            raise MeshError("angular resolution must be non-negative")

    @property
    def radii(self) -> np.ndarray:
        return np.array(list(self.interior_radii) + list(self.surface_radii), dtype=float)

    @property
    def r_max(self) -> float:
        return float(self.radii[-1])


def build_layered_ball(spec: LayerSpec) -> Mesh:
    """Concentric icosphere shells, a central fan and prisms split in three."""
    sph, tris = icosphere(spec.angular_resolution)
    radii = spec.radii
    ns = sph.shape[0]
    verts = np.concatenate([np.zeros((1, 3))] + [r * sph for r in radii])

    def shell(k):
        return 1 + k * ns

    st = np.sort(tris, axis=1)
    a, b, c = st.T
    cells = [np.stack([np.zeros_like(a), a + 1, b + 1, c + 1], axis=1)]
    for k in range(len(radii) - 1):
        lo, hi = shell(k), shell(k + 1)
        cells += [
            np.stack([a + lo, b + lo, c + lo, c + hi], axis=1),
            np.stack([a + lo, b + lo, b + hi, c + hi], axis=1),
            np.stack([a + lo, a + hi, b + hi, c + hi], axis=1),
        ]
    return from_cells(verts, np.concatenate(cells))


def mesh_stats(mesh: Mesh) -> dict:
    return {
        "cells": mesh.n_cells,
        "faces": mesh.n_faces,
        "boundary_faces": int(mesh.boundary.sum()),
        "vertices": mesh.n_vertices,
        "volume": float(mesh.volumes().sum()),
    }


# ---------------------------------------------------------------------------
# Gmsh 2.2 ASCII


def export_msh(mesh: Mesh, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n")
        fh.write(f"{mesh.n_vertices}\n")
        for i, (x, y, z) in enumerate(mesh.vertices, start=1):
            fh.write(f"{i} {float(x)!r} {float(y)!r} {float(z)!r}\n")
        fh.write("$EndNodes\n$Elements\n")
        fh.write(f"{mesh.n_cells}\n")
        for i, c in enumerate(mesh.cells, start=1):
            fh.write(f"{i} 4 2 1 1 {c[0] + 1} {c[1] + 1} {c[2] + 1} {c[3] + 1}\n")
        fh.write("$EndElements\n")


def import_msh(path) -> Mesh:
    """Read a Gmsh 2.2 ASCII mesh; triangles and points are ignored."""
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    sections = {}
    i = 0
    while i < len(lines):
        ln = lines[i]
        if ln.startswith("$") and not ln.startswith("$End"):
            name = ln[1:]
            j = i + 1
            while j < len(lines) and lines[j] != f"$End{name}":
                j += 1
            if j == len(lines):
                raise MeshError(f"{path}: unterminated section ${name}")
            sections[name] = lines[i + 1:j]
            i = j
        i += 1
    for name in ("MeshFormat", "Nodes", "Elements"):
        if name not in sections:
            raise MeshError(f"{path}: missing section ${name}")
    fmt = sections["MeshFormat"][0].split()
    if not fmt or not fmt[0].startswith("2") or fmt[1] != "0":
        raise MeshError(f"{path}: only ASCII MSH 2.x is supported")
    try:
        nodes = sections["Nodes"]
        nn = int(nodes[0])
        ids, xyz = [], []
        for ln in nodes[1:1 + nn]:
            parts = ln.split()
            ids.append(int(parts[0]))
            xyz.append([float(v) for v in parts[1:4]])
        if len(ids) != nn:
            raise MeshError(f"{path}: expected {nn} nodes")
        index = {tag: k for k, tag in enumerate(ids)}
        elems = sections["Elements"]
        ne = int(elems[0])
        tets = []
        for ln in elems[1:1 + ne]:
            parts = [int(v) for v in ln.split()]
            etype, ntags = parts[1], parts[2]
            conn = parts[3 + ntags:]
            if etype == 4:
                missing = [t for t in conn[:4] if t not in index]
                if missing:
                    raise MeshError(f"{path}: element refers to unknown node {missing[0]}")
                tets.append([index[t] for t in conn[:4]])
            elif etype not in (2, 15, 1):
                raise MeshError(f"{path}: unsupported element type {etype}")
    except (ValueError, IndexError, KeyError) as exc:
        raise MeshError(f"{path}: malformed mesh ({exc})") from exc
    if not tets:
        raise MeshError(f"{path}: no tetrahedra")
    return from_cells(np.array(xyz), np.array(tets), reorient=True)


def local_wavelength(mesh: Mesh, bg, cfg, cell=None, pert=None):
    """2 pi c / omega at cell centroids, in mesh length units.

    ``cell`` may be an index, an index array or None for every cell.
    """
    from .background import perturbed_wavespeed

    idx = np.arange(mesh.n_cells) if cell is None else np.asarray(cell)
    xc = mesh.vertices[mesh.cells[idx]].mean(axis=-2)
    c = perturbed_wavespeed(bg, pert, xc)
    return 2 * np.pi * c / (cfg.omega * bg.length_scale)
