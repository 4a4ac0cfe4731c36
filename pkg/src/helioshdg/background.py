"""Radial stellar backgrounds, wave-speed perturbations and coefficient fields.

All three formulations share the generic first-order form

    A u + beta w + grad w = 0
    div u - beta . u + varrho w = src_scale * f
    w + Z_bc . u = 0            (outer boundary)

Coefficients are returned in physical units: radial derivatives are taken
with respect to ``r * length_scale``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.interpolate import PchipInterpolator, RegularGridInterpolator

log = logging.getLogger(__name__)

FORMULATIONS = ("original", "liouville", "liouville_c")


class BackgroundError(ValueError):
    pass


class CoefficientError(ValueError):
    pass


# ---------------------------------------------------------------------------
# radial background


class RadialBackground:
    """Tabulated radial profiles rho0(r), c0(r), phi0(r).

    ``log(rho0)`` and ``log(c0)`` are interpolated with monotone cubic
    Hermite splines (positivity is automatic and exponential stratification
    is reproduced exactly); phi0 is interpolated directly.  Derivatives come
    from the interpolants.
    """

    def __init__(self, r_grid, rho0, c0, phi0, length_scale: float = 1.0,
                 r_max: Optional[float] = None):
        r = np.asarray(r_grid, dtype=float)
        rho0 = np.asarray(rho0, dtype=float)
        c0 = np.asarray(c0, dtype=float)
        phi0 = np.asarray(phi0, dtype=float)
        if r.ndim != 1 or r.size < 2:
            raise BackgroundError("radial grid needs at least two samples")
        if not (rho0.shape == c0.shape == phi0.shape == r.shape):
            raise BackgroundError("profile columns have inconsistent lengths")
        if np.any(np.diff(r) <= 0):
            raise BackgroundError("radial grid must be strictly increasing")
        if np.any(rho0 <= 0):
            raise BackgroundError("rho0 must be positive")
        if np.any(c0 <= 0):
            raise BackgroundError("c0 must be positive")
        if r[0] > 0:
            raise BackgroundError("radial grid must start at r = 0")
        if length_scale <= 0:
            raise BackgroundError("length_scale must be positive")
        self.r_grid = r
        self.rho0_samples = rho0
        self.c0_samples = c0
        self.phi0_samples = phi0
        self.length_scale = float(length_scale)
        self.r_max = float(r[-1] if r_max is None else r_max)
        if self.r_max > r[-1] + 1e-12:
            raise BackgroundError(f"grid ends at {r[-1]} but r_max = {self.r_max}")
        self._log_rho = PchipInterpolator(r, np.log(rho0), extrapolate=True)
        self._log_c = PchipInterpolator(r, np.log(c0), extrapolate=True)
        self._phi = PchipInterpolator(r, phi0, extrapolate=True)
        self._dlog_rho = self._log_rho.derivative()
        self._dlog_c = self._log_c.derivative()
        self._dphi = self._phi.derivative()

    # scalar radial profiles -------------------------------------------------
    def rho0(self, r):
        return np.exp(self._log_rho(r))

    def c0(self, r):
        return np.exp(self._log_c(r))

    def phi0(self, r):
        return self._phi(r)

    def alpha_rho(self, r):
        """Radial component of -grad(rho0)/rho0 (per physical length)."""
        return -self._dlog_rho(r) / self.length_scale

    def alpha_c(self, r):
        return -self._dlog_c(r) / self.length_scale

    def gravity(self, r):
        """Radial component of grad(phi0)."""
        return self._dphi(r) / self.length_scale

    @classmethod
    def from_functions(cls, rho0, c0, phi0, r_max: float = 1.0, n: int = 2001,
                       length_scale: float = 1.0):
        r = np.linspace(0.0, r_max, n)
        return cls(r, rho0(r), c0(r), phi0(r), length_scale=length_scale, r_max=r_max)


def load_radial_profile(path, length_scale: float = 1.0,
                        r_max: Optional[float] = None) -> RadialBackground:
    """Read a CSV profile with header ``r,rho0,c0,phi0``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"background file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [c.strip() for c in (reader.fieldnames or [])]
        missing = {"r", "rho0", "c0", "phi0"} - set(cols)
        if missing:
            raise BackgroundError(f"{path}: missing columns {sorted(missing)}")
        rows = [{k.strip(): v for k, v in row.items()} for row in reader]
    data = {k: np.array([float(row[k]) for row in rows]) for k in ("r", "rho0", "c0", "phi0")}
    return RadialBackground(data["r"], data["rho0"], data["c0"], data["phi0"],
                            length_scale=length_scale, r_max=r_max)


def write_radial_profile(bg: RadialBackground, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "rho0", "c0", "phi0"])
        for row in zip(bg.r_grid, bg.rho0_samples, bg.c0_samples, bg.phi0_samples):
            w.writerow([repr(float(v)) for v in row])


def constant_background(r_max: float = 1.0) -> RadialBackground:
    return RadialBackground([0.0, r_max], [1.0, 1.0], [1.0, 1.0], [0.0, 0.0], r_max=r_max)


def toy_star(r_max: float = 1.0, density_decay: float = 20.0, c_center: float = 1.0,
             c_surface: float = 0.5, gravity: float = 1.0, n: int = 2001) -> RadialBackground:
    """Synthetic stratified star used at desk scale.

    rho0 = exp(-density_decay * r), c0 drops smoothly from ``c_center`` to
    ``c_surface`` and phi0 = gravity * r**2 / 2 (linear radial gravity).
    """
    def c0(r):
        return c_center + (c_surface - c_center) * r**2 / r_max**2

    return RadialBackground.from_functions(
        lambda r: np.exp(-density_decay * r), c0, lambda r: 0.5 * gravity * r**2,
        r_max=r_max, n=n,
    )


# ---------------------------------------------------------------------------
# geometry helpers (latitude / longitude convention)


def to_spherical(x):
    """Return (r, latitude, longitude) in radians for points of shape (..., 3)."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    lat = np.arcsin(np.clip(np.divide(x[..., 2], r, out=np.zeros_like(r), where=r > 0), -1, 1))
    lon = np.arctan2(x[..., 1], x[..., 0])
    return r, lat, lon


def from_spherical(r, lat, lon):
    r, lat, lon = np.broadcast_arrays(r, lat, lon)
    return np.stack([r * np.cos(lat) * np.cos(lon), r * np.cos(lat) * np.sin(lon),
                     r * np.sin(lat)], axis=-1)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class PerturbationField:
    """Relative wave-speed perturbation.

    kind ``active_region``: c = c0 (1 + alpha g(r) delta(lat, lon)) with
    g a unit-peak Gaussian of mean ``r_c`` and variance ``variance``.
    kind ``volumetric``: c = c0 (1 + alpha delta(r, lat, lon)), zero outside
    [r_lo, r_hi].
    """

    kind: str = "none"
    alpha: float = 1.0
    surface_map: Optional[tuple] = None      # (lat_deg, lon_deg, delta[nlat, nlon])
    r_c: float = 0.995
    variance: float = 8.5e-4
    volume_table: Optional[tuple] = None     # (r, lat_deg, lon_deg, delta[nr, nlat, nlon])
    r_lo: float = 0.70
    r_hi: float = 0.99
    _interp: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("none", "active_region", "volumetric"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.kind == "active_region":
            if self.surface_map is None:
                raise ValueError("active_region needs a surface map")
            if self.variance <= 0:
                raise ValueError("envelope variance must be positive")
            lat, lon, d = self.surface_map
            d = np.asarray(d, dtype=float)
            # delta = -1 is accepted; positivity of the speed is checked on evaluation
            if np.any(d > 0) or np.any(d < -1):
                raise ValueError("surface map values must lie in [-1, 0]")
            object.__setattr__(self, "_interp", _periodic_interpolator((lat, lon), d))
        elif self.kind == "volumetric":
            if self.volume_table is None:
                raise ValueError("volumetric perturbation needs a table")
            r, lat, lon, d = self.volume_table
            object.__setattr__(self, "_interp",
                               _periodic_interpolator((r, lat, lon), np.asarray(d, float)))

    def relative(self, x):
        """Relative perturbation of the speed at points x (..., 3)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "none" or self.alpha == 0.0:
            return np.zeros(x.shape[:-1])
        r, lat, lon = to_spherical(x)
        latd, lond = np.degrees(lat), np.degrees(lon)
        if self.kind == "active_region":
            g = np.exp(-((r - self.r_c) ** 2) / (2 * self.variance))
            return self.alpha * g * self._interp(np.stack([latd, lond], axis=-1))
        inside = (r >= self.r_lo) & (r <= self.r_hi)
        vals = self._interp(np.stack([r, latd, lond], axis=-1))
        return np.where(inside, self.alpha * vals, 0.0)

    def with_alpha(self, alpha: float) -> "PerturbationField":
        return PerturbationField(self.kind, alpha, self.surface_map, self.r_c, self.variance,
                                 self.volume_table, self.r_lo, self.r_hi)


def _periodic_interpolator(axes, values):
    """(Bi/tri)linear interpolation with the last axis a periodic longitude in degrees."""
    axes = [np.asarray(a, dtype=float) for a in axes]
    lon = axes[-1]
    # extend longitudes by one period on each side
    lon_ext = np.concatenate([lon - 360.0, lon, lon + 360.0])
    vals_ext = np.concatenate([values, values, values], axis=-1)
    keep = (lon_ext >= -540.0) & (lon_ext <= 540.0)
    lon_ext, vals_ext = lon_ext[keep], vals_ext[..., keep]
    order = np.argsort(lon_ext, kind="stable")
    lon_ext, vals_ext = lon_ext[order], vals_ext[..., order]
    uniq = np.concatenate([[True], np.diff(lon_ext) > 0])
    interp = RegularGridInterpolator(axes[:-1] + [lon_ext[uniq]], vals_ext[..., uniq],
                                     bounds_error=False, fill_value=None)

    def f(pts):
        pts = np.array(pts, dtype=float)
        pts[..., -1] = wrap_angle(np.radians(pts[..., -1])) * 180.0 / np.pi
        return interp(pts)

    return f


def load_surface_map(path):
    """CSV ``theta_deg,phi_deg,delta`` (latitude, longitude in degrees) on a regular grid -> (lat, lon, delta)."""
    arr = _read_table(path, ("theta_deg", "phi_deg", "delta"))
    lat = np.unique(arr[:, 0])
    lon = np.unique(arr[:, 1])
    grid = np.full((lat.size, lon.size), np.nan)
    grid[np.searchsorted(lat, arr[:, 0]), np.searchsorted(lon, arr[:, 1])] = arr[:, 2]
    if np.isnan(grid).any():
        raise ValueError(f"{path}: surface map is not a complete regular grid")
    return lat, lon, grid


def load_volume_table(path):
    arr = _read_table(path, ("r", "theta_deg", "phi_deg", "delta"))
    r = np.unique(arr[:, 0])
    lat = np.unique(arr[:, 1])
    lon = np.unique(arr[:, 2])
    grid = np.full((r.size, lat.size, lon.size), np.nan)
    grid[np.searchsorted(r, arr[:, 0]), np.searchsorted(lat, arr[:, 1]),
         np.searchsorted(lon, arr[:, 2])] = arr[:, 3]
    if np.isnan(grid).any():
        raise ValueError(f"{path}: volume table is not a complete regular grid")
    return r, lat, lon, grid


def _read_table(path, columns):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        names = [c.strip() for c in (reader.fieldnames or [])]
        if list(columns) != names[: len(columns)] and not set(columns) <= set(names):
            raise ValueError(f"{path}: expected columns {columns}, got {names}")
        rows = [[float(row[c]) for c in columns] for row in
                ({k.strip(): v for k, v in r.items()} for r in reader)]
    return np.array(rows, dtype=float)


def gaussian_spot_map(lat0_deg: float, lon0_deg: float, width_deg: float,
                      depth: float = 0.9, nlat: int = 91, nlon: int = 181):
    """Synthetic active-region map: one Gaussian spot of angular width ``width_deg``."""
    lat = np.linspace(-90.0, 90.0, nlat)
    lon = np.linspace(-180.0, 180.0, nlon, endpoint=False)
    LA, LO = np.meshgrid(np.radians(lat), np.radians(lon), indexing="ij")
    la0, lo0 = math.radians(lat0_deg), math.radians(lon0_deg)
    cosd = np.sin(LA) * np.sin(la0) + np.cos(LA) * np.cos(la0) * np.cos(LO - lo0)
    dist = np.degrees(np.arccos(np.clip(cosd, -1, 1)))
    return lat, lon, -depth * np.exp(-((dist / width_deg) ** 2))


def perturbed_wavespeed(bg: RadialBackground, pert: Optional[PerturbationField], x):
    """Perturbed speed c_delta at points x (..., 3)."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    c = bg.c0(r)
    if pert is None or pert.kind == "none":
        return c
    c = c * (1.0 + pert.relative(x))
    if np.any(c <= 0):
        raise ValueError("perturbed wave speed is not positive")
    return c


def source_gaussian(center, variances, x):
    """Gaussian source in (r, latitude, longitude).

    ``center`` is (r_s, lat_s, lon_s) in radians and ``variances`` the
    squared widths.  For a source on the polar axis the longitude term is
    dropped, since longitude is undefined there.
    """
    r_s, lat_s, lon_s = center
    vr, vt, vp = variances
    if min(vr, vt, vp) <= 0:
        raise ValueError("variances must be positive")
    r, lat, lon = to_spherical(x)
    arg = (r - r_s) ** 2 / vr + (lat - lat_s) ** 2 / vt
    if abs(math.cos(lat_s)) > 1e-12:
        arg = arg + wrap_angle(lon - lon_s) ** 2 / vp
    return np.exp(-arg)


DEFAULT_SOURCE_VARIANCES = (1e-2**2, 0.2**2, 0.2**2)


@dataclass(frozen=True)
class GaussianSource:
    center: tuple                   # (r, lat, lon) radians
    variances: tuple = DEFAULT_SOURCE_VARIANCES

    def __call__(self, x):
        return source_gaussian(self.center, self.variances, x)


# ---------------------------------------------------------------------------
# solver configuration and coefficients


@dataclass(frozen=True)
class SolverConfig:
    formulation: str = "liouville"
    omega: float = 2 * math.pi
    gamma_att: float = 0.0
    eps_blr: Optional[float] = None       # None = full rank
    mixed_precision: bool = False
    tau_scale: float = 1e6

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation {self.formulation!r}")
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if self.gamma_att < 0:
            raise ValueError("attenuation must be non-negative")
        if self.eps_blr is not None and not 0 < self.eps_blr < 1:
            raise ValueError("eps_blr must lie in (0, 1)")

    @classmethod
    def from_frequency(cls, freq_mhz: float, att_uhz: float = 10.0, **kw):
        """Angular frequency from mHz and attenuation from gamma/(2 pi) in microhertz."""
        return cls(omega=2 * math.pi * freq_mhz * 1e-3,
                   gamma_att=2 * math.pi * att_uhz * 1e-6, **kw)


@dataclass
class CoefficientSet:
    """Generic-form coefficients, vectorised over a trailing point axis.

    Shapes: A (n, 3, 3), beta (n, 3), rho_coef (n,), z_bc (n, 3), src_scale (n,).
    """

    A: np.ndarray
    beta: np.ndarray
    rho_coef: np.ndarray
    z_bc: np.ndarray
    src_scale: np.ndarray

    @property
    def continuity_beta(self):
        # vector multiplying u in the continuity equation
        return -self.beta


def eval_coefficients(bg: RadialBackground, pert: Optional[PerturbationField],
                      cfg: SolverConfig, x, check: bool = True) -> CoefficientSet:
    """Evaluate A, beta, varrho, Z_bc and the source scale at points x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.linalg.norm(x, axis=-1)
    if np.any(r > bg.r_max * (1 + 1e-9)):
        raise CoefficientError("point outside the computational domain")
    rhat = np.divide(x, r[:, None], out=np.zeros_like(x), where=r[:, None] > 0)
    rho = bg.rho0(r)
    c = perturbed_wavespeed(bg, pert, x)
    c2 = c * c
    grav = bg.gravity(r)[:, None] * rhat          # grad phi0
    a_rho = bg.alpha_rho(r)[:, None] * rhat
    s = -cfg.omega**2 - 2j * cfg.omega * cfg.gamma_att
    eye = np.eye(3)[None]
    g_c2 = grav / c2[:, None]
    outer = np.einsum("ni,nj->nij", grav, a_rho - g_c2)
    f = cfg.formulation
    if f == "original":
        A = rho[:, None, None] * (s * eye + outer)
        beta = g_c2
        varrho = 1.0 / (rho * c2)
        z = -rho[:, None] * grav
        src = np.ones_like(r)
    elif f == "liouville":
        A = s * eye + outer
        beta = g_c2 - 0.5 * a_rho
        varrho = 1.0 / c2
        z = -grav
        src = np.sqrt(rho)
    else:
        a_c = bg.alpha_c(r)[:, None] * rhat   # unperturbed c0
        A = (s / c2)[:, None, None] * eye + np.einsum("ni,nj->nij", g_c2, a_rho - g_c2)
        beta = g_c2 - 0.5 * a_rho - a_c
        varrho = np.ones_like(r)
        z = -g_c2
        src = c * np.sqrt(rho)
    A = np.asarray(A, dtype=complex)
    if check:
        _check_invertible(A)
    return CoefficientSet(A, np.asarray(beta, dtype=complex),
                          np.asarray(varrho, dtype=complex), z, src)


def _check_invertible(A):
    # singular values of a batch of 3x3 matrices
    sv = np.linalg.svd(A, compute_uv=False)
    bad = sv[:, -1] <= 1e-13 * sv[:, 0]
    if np.any(bad):
        raise CoefficientError(f"momentum operator A is singular at {int(bad.sum())} point(s)")
