"""Sampling of wavefields on planes, arcs and spheres, difference maps and export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .background import from_spherical
from .hdg.field import WaveField, evaluate_points
from .hdg.reference import TET_VERTICES, lagrange_tet, n_tet


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# loci


@dataclass(frozen=True)
class PlaneLocus:
    """Regular grid on the plane ``x[axis] = offset`` (default: the xz-plane)."""

    extent: float = 1.0
    n: int = 101
    axis: int = 1
    offset: float = 0.0

    def points(self):
        t = np.linspace(-self.extent, self.extent, self.n)
        a, b = np.meshgrid(t, t, indexing="ij")
        free = [d for d in range(3) if d != self.axis]
        x = np.zeros(a.shape + (3,))
        x[..., free[0]] = a
        x[..., free[1]] = b
        x[..., self.axis] = self.offset
        return x.reshape(-1, 3), a.shape


@dataclass(frozen=True)
class ArcLocus:
    """Polar arc x = (r cos t, 0, r sin t), t strictly inside (-pi/2, pi/2)."""

    radius: float
    n: int = 181

    def angles(self):
        return np.linspace(-np.pi / 2, np.pi / 2, self.n + 2)[1:-1]

    def points(self):
        t = self.angles()
        x = np.stack([self.radius * np.cos(t), np.zeros_like(t), self.radius * np.sin(t)], axis=1)
        return x, t.shape


@dataclass(frozen=True)
class SphereLocus:
    """Latitude-longitude grid at fixed radius, in degrees."""

    radius: float
    n_lat: int = 181
    n_lon: int = 361

    def grid(self):
        lat = np.linspace(-90.0, 90.0, self.n_lat)
        lon = np.linspace(-180.0, 180.0, self.n_lon)
        return lat, lon

    def points(self):
        lat, lon = self.grid()
        la, lo = np.meshgrid(np.radians(lat), np.radians(lon), indexing="ij")
        x = from_spherical(np.full(la.shape, self.radius), la, lo)
        return x.reshape(-1, 3), la.shape


@dataclass(eq=False)
class SampledField:
    """w (and u) values of one source on a locus; outside samples are NaN."""

    locus: object
    coords: np.ndarray
    shape: tuple
    w: np.ndarray
    u: Optional[np.ndarray] = None
    inside: np.ndarray = field(default=None)

    @property
    def kind(self) -> str:
        return {PlaneLocus: "plane", ArcLocus: "arc", SphereLocus: "sphere"}[type(self.locus)]

    def grid_w(self) -> np.ndarray:
        return self.w.reshape(self.shape)

    def scaled(self, factor) -> "SampledField":
        u = None if self.u is None else self.u * factor
        return SampledField(self.locus, self.coords, self.shape, self.w * factor, u, self.inside)


def sample_field(fld: WaveField, locus, source: int = 0) -> SampledField:
    x, shape = locus.points()
    u, w, inside = evaluate_points(fld, x, source)
    return SampledField(locus, x, shape, w, u, inside)


# ---------------------------------------------------------------------------
# metrics


def _check_pair(ref: SampledField, test: SampledField, kind: Optional[str]):
    if kind is not None and (ref.kind != kind or test.kind != kind):
        raise MetricError(f"expected two {kind} samplings, got {ref.kind} and {test.kind}")
    if ref.coords.shape != test.coords.shape or not np.allclose(ref.coords, test.coords,
                                                                rtol=0, atol=1e-12):
        raise MetricError("samplings do not share their coordinates")


def relative_difference(ref: SampledField, test: SampledField, kind: Optional[str] = None):
    """|w_ref - w_test| / max|w_ref| over the samples inside both meshes.

    Samples outside either mesh are NaN in the result and excluded from the norm.
    """
    _check_pair(ref, test, kind)
    ok = _inside(ref) & _inside(test)
    if not ok.any():
        raise MetricError("no sample lies inside both meshes")
    norm = np.abs(ref.w[ok]).max()
    if norm == 0.0:
        raise MetricError("reference field vanishes on the sampling locus")
    e = np.full(ref.w.shape, np.nan)
    e[ok] = np.abs(ref.w[ok] - test.w[ok]) / norm
    return e.reshape(ref.shape)


def _inside(s: SampledField) -> np.ndarray:
    if s.inside is not None:
        return np.asarray(s.inside, dtype=bool)
    return np.isfinite(s.w)


def relative_difference_plane(ref: SampledField, test: SampledField) -> np.ndarray:
    return relative_difference(ref, test, "plane")


def relative_difference_arc(ref: SampledField, test: SampledField):
    """(angles, e) along the arc."""
    e = relative_difference(ref, test, "arc")
    return ref.locus.angles(), e


def relative_difference_sphere(ref: SampledField, test: SampledField):
    """(lat, lon, e) with e of shape (n_lat, n_lon)."""
    e = relative_difference(ref, test, "sphere")
    lat, lon = ref.locus.grid()
    return lat, lon, e


def max_location(lat, lon, e):
    """(lat, lon) in degrees of the largest finite entry of a sphere map."""
    i, j = np.unravel_index(np.nanargmax(e), e.shape)
    return float(lat[i]), float(lon[j])


def azimuthal_deviation(fld: WaveField, radii, n_lat: int = 37, n_lon: int = 72,
                        source: int = 0, polar_margin: float = 5.0) -> float:
    """max over (r, lat) of max_lon |w - mean_lon w| / max|w|, symmetry axis = z.

    Latitudes within ``polar_margin`` degrees of the poles are skipped since
    a ring there shrinks to a point.
    """
    lat = np.radians(np.linspace(-90.0 + polar_margin, 90.0 - polar_margin, n_lat))
    lon = np.radians(np.linspace(-180.0, 180.0, n_lon, endpoint=False))
    rr, la, lo = np.meshgrid(np.asarray(radii, dtype=float), lat, lon, indexing="ij")
    x = from_spherical(rr, la, lo).reshape(-1, 3)
    _, w, inside = evaluate_points(fld, x, source)
    if not inside.all():
        raise MetricError(f"{int((~inside).sum())} symmetry samples fall outside the mesh")
    w = w.reshape(rr.shape)
    norm = np.abs(w).max()
    if norm == 0.0:
        raise MetricError("field vanishes on the sampled shells")
    dev = np.abs(w - w.mean(axis=2, keepdims=True)).max()
    return float(dev / norm)


# ---------------------------------------------------------------------------
# export


def write_vtk(fld: WaveField, path, source: int = 0, title: str = "wavefield") -> Path:
    """VTK legacy ASCII unstructured grid with one linear tetrahedron per cell.

    Each cell carries its own four vertices so the discontinuous field is
    kept as is; point data holds Re/Im of w and of the vector u.
    """
    path = Path(path)
    mesh = fld.mesh
    X = mesh.vertices[mesh.cells].reshape(-1, 3)
    w = np.empty(X.shape[0], dtype=complex)
    u = np.empty((X.shape[0], 3), dtype=complex)
    at_vertices = {}
    for c, coef in enumerate(fld.volume):
        p = int(fld.cell_orders[c])
        if p not in at_vertices:
            at_vertices[p] = lagrange_tet(p, TET_VERTICES)       # (4, n)
        vals = coef[:, source].reshape(4, n_tet(p)) @ at_vertices[p].T   # (component, vertex)
        u[4 * c:4 * c + 4] = vals[:3].T
        w[4 * c:4 * c + 4] = vals[3]
    nc = mesh.n_cells
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 4.2\n")
        fh.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {X.shape[0]} double\n")
        np.savetxt(fh, X, fmt="%.10e")
        fh.write(f"CELLS {nc} {5 * nc}\n")
        conn = np.concatenate([np.full((nc, 1), 4), np.arange(4 * nc).reshape(nc, 4)], axis=1)
        np.savetxt(fh, conn, fmt="%d")
        fh.write(f"CELL_TYPES {nc}\n")
        np.savetxt(fh, np.full(nc, 10), fmt="%d")
        fh.write(f"POINT_DATA {X.shape[0]}\n")
        for name, arr in (("w_real", w.real), ("w_imag", w.imag)):
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            np.savetxt(fh, arr, fmt="%.10e")
        for name, arr in (("u_real", u.real), ("u_imag", u.imag)):
            fh.write(f"VECTORS {name} double\n")
            np.savetxt(fh, arr, fmt="%.10e")
    return path


def read_vtk_w(path):
    """Point coordinates and complex w back from ``write_vtk`` output."""
    lines = Path(path).read_text().splitlines()
    i = next(k for k, ln in enumerate(lines) if ln.startswith("POINTS"))
    npts = int(lines[i].split()[1])
    X = np.loadtxt(lines[i + 1:i + 1 + npts]).reshape(npts, 3)
    out = {}
    for name in ("w_real", "w_imag"):
        k = next(k for k, ln in enumerate(lines) if ln.startswith(f"SCALARS {name}"))
        out[name] = np.loadtxt(lines[k + 2:k + 2 + npts])
    return X, out["w_real"] + 1j * out["w_imag"]


def write_sampled_csv(s: SampledField, path) -> Path:
    """x, y, z, inside, w_real, w_imag per sample."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y", "z", "inside", "w_real", "w_imag"])
        ins = _inside(s)
        for x, i, w in zip(s.coords, ins, s.w):
            wr.writerow([f"{x[0]:.10e}", f"{x[1]:.10e}", f"{x[2]:.10e}", int(i),
                         f"{w.real:.10e}", f"{w.imag:.10e}"])
    return path


def write_map_csv(path, columns: dict) -> Path:
    """Equal-length 1D columns (coordinates and values) written with a header row."""
    path = Path(path)
    names = list(columns)
    arrs = [np.ravel(np.asarray(columns[k])) for k in names]
    if len({a.size for a in arrs}) != 1:
        raise ValueError("columns have different lengths")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(names)
        for row in zip(*arrs):
            wr.writerow([f"{v:.10e}" if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def sphere_map_columns(lat, lon, e) -> dict:
    la, lo = np.meshgrid(lat, lon, indexing="ij")
    return {"lat_deg": la, "lon_deg": lo, "e": e}


def arc_columns(angles, e) -> dict:
    return {"theta_rad": angles, "e": e}
