import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from helioshdg.background import (DEFAULT_SOURCE_VARIANCES, FORMULATIONS, BackgroundError,
                                  CoefficientError, GaussianSource, PerturbationField,
                                  RadialBackground, SolverConfig, constant_background,
                                  eval_coefficients, from_spherical, gaussian_spot_map,
                                  load_radial_profile, load_surface_map, load_volume_table,
                                  perturbed_wavespeed, source_gaussian, to_spherical, toy_star,
                                  write_radial_profile)

from conftest import stratified_background


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")
    return path


points = st.tuples(*[st.floats(-0.55, 0.55)] * 3).map(np.array)


class TestLoadProfile:
    def test_two_row_constant(self, tmp_path):
        p = write_csv(tmp_path / "c.csv", ["r", "rho0", "c0", "phi0"],
                      [(0, 1, 1, 0), (1, 1, 1, 0)])
        bg = load_radial_profile(p)
        r = np.linspace(0, 1, 11)
        assert_allclose(bg.rho0(r), 1.0)
        assert_allclose(bg.c0(r), 1.0)
        assert_allclose(bg.alpha_rho(r), 0.0, atol=1e-14)
        assert_allclose(bg.gravity(r), 0.0, atol=1e-14)

    def test_stratified_profile(self, tmp_path):
        r = np.linspace(0, 1, 1001)
        rows = np.stack([r, np.exp(-20 * r), np.ones_like(r), r**2 / 2], axis=1)
        bg = load_radial_profile(write_csv(tmp_path / "s.csv", ["r", "rho0", "c0", "phi0"], rows))
        q = np.linspace(0.0, 1.0, 57)
        # log-density is linear, so its monotone cubic interpolant is exact
        assert_allclose(bg.alpha_rho(q), 20.0, rtol=1e-10)
        assert_allclose(bg.gravity(q), q, atol=2e-3)
        assert_allclose(bg.gravity(q[5:-5]), q[5:-5], rtol=1e-3)

    def test_non_monotone(self, tmp_path):
        p = write_csv(tmp_path / "n.csv", ["r", "rho0", "c0", "phi0"],
                      [(0, 1, 1, 0), (0.5, 1, 1, 0), (0.4, 1, 1, 0), (1, 1, 1, 0)])
        with pytest.raises(BackgroundError, match="increasing"):
            load_radial_profile(p)

    def test_missing_column(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", ["r", "rho0", "c0"], [(0, 1, 1), (1, 1, 1)])
        with pytest.raises(BackgroundError, match="phi0"):
            load_radial_profile(p)

    @pytest.mark.parametrize("col", [1, 2])
    def test_non_positive(self, tmp_path, col):
        rows = np.array([[0, 1, 1, 0], [1, 1, 1, 0]], dtype=float)
        rows[1, col] = 0.0
        p = write_csv(tmp_path / "z.csv", ["r", "rho0", "c0", "phi0"], rows)
        with pytest.raises(BackgroundError, match="positive"):
            load_radial_profile(p)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.csv"):
            load_radial_profile(tmp_path / "nope.csv")

    def test_write_roundtrip(self, tmp_path):
        bg = toy_star()
        write_radial_profile(bg, tmp_path / "t.csv")
        bg2 = load_radial_profile(tmp_path / "t.csv")
        r = np.linspace(0, 1, 33)
        assert_allclose(bg2.c0(r), bg.c0(r), rtol=1e-12)
        assert_allclose(bg2.alpha_rho(r), bg.alpha_rho(r), rtol=1e-10)

    def test_r_max_beyond_grid(self):
        with pytest.raises(BackgroundError):
            RadialBackground([0, 1], [1, 1], [1, 1], [0, 0], r_max=1.5)

    def test_r_max_above_one_allowed(self):
        bg = RadialBackground([0, 1.001], [1, 1], [1, 1], [0, 0])
        assert bg.r_max == pytest.approx(1.001)


def oracle_coefficients(formulation, rho, drho, c, dc, dphi, omega, gamma, rhat):
    """Direct evaluation of the three operator definitions at one point."""
    s = -omega**2 - 2j * omega * gamma
    grav = dphi * rhat
    a_rho = -drho / rho * rhat
    a_c = -dc / c * rhat
    I = np.eye(3)
    if formulation == "original":
        A = rho * (s * I + np.outer(grav, a_rho - grav / c**2))
        return A, grav / c**2, 1 / (rho * c**2), -rho * grav, 1.0
    if formulation == "liouville":
        A = s * I + np.outer(grav, a_rho - grav / c**2)
        return A, grav / c**2 - a_rho / 2, 1 / c**2, -grav, math.sqrt(rho)
    A = s / c**2 * I + np.outer(grav / c**2, a_rho - grav / c**2)
    return A, grav / c**2 - a_rho / 2 - a_c, 1.0, -grav / c**2, c * math.sqrt(rho)


class TestCoefficients:
    @pytest.mark.parametrize("form", FORMULATIONS)
    def test_constant_background_helmholtz(self, form):
        cfg = SolverConfig(formulation=form, omega=3.0)
        cs = eval_coefficients(constant_background(), None, cfg, [[0.1, 0.2, 0.3]])
        assert_allclose(cs.A[0], -9.0 * np.eye(3))
        assert_allclose(cs.beta[0], 0.0)
        assert_allclose(cs.rho_coef[0], 1.0)

    @pytest.mark.parametrize("form", ["liouville", "liouville_c"])
    def test_stratified_beta(self, form):
        bg = stratified_background()
        x = np.array([[0.3, -0.2, 0.4], [0.0, 0.0, 0.7], [-0.5, 0.1, 0.1]])
        cs = eval_coefficients(bg, None, SolverConfig(formulation=form), x)
        rhat = x / np.linalg.norm(x, axis=1)[:, None]
        assert_allclose(cs.beta, -10.0 * rhat, rtol=1e-9, atol=1e-9)
        assert_allclose(cs.rho_coef, 1.0)

    @pytest.mark.parametrize("form", FORMULATIONS)
    def test_against_direct_formulas(self, form):
        r0, k, cc, cs_, g = 1.0, 3.0, 1.0, 0.6, 2.0
        bg = toy_star(r0, density_decay=k, c_center=cc, c_surface=cs_, gravity=g, n=4001)
        cfg = SolverConfig(formulation=form, omega=2.5, gamma_att=0.1)
        x = np.array([0.2, -0.3, 0.5])
        r = np.linalg.norm(x)
        c = cc + (cs_ - cc) * r**2
        dc = 2 * (cs_ - cc) * r
        rho = math.exp(-k * r)
        ref = oracle_coefficients(form, rho, -k * rho, c, dc, g * r, cfg.omega, cfg.gamma_att,
                                  x / r)
        got = eval_coefficients(bg, None, cfg, x)
        for a, b in zip((got.A[0], got.beta[0], got.rho_coef[0], got.z_bc[0], got.src_scale[0]),
                        ref):
            assert_allclose(a, b, rtol=1e-6, atol=1e-9)

    def test_outside_domain(self):
        with pytest.raises(CoefficientError, match="outside"):
            eval_coefficients(toy_star(), None, SolverConfig(), [[1.2, 0, 0]])

    def test_singular_operator(self):
        # A = -omega**2 I + rhat rhat^T, singular along rhat for omega = 1
        bg = RadialBackground.from_functions(lambda r: np.exp(-2 * r), np.ones_like,
                                             lambda r: r, n=11)
        cfg = SolverConfig(formulation="liouville", omega=1.0)
        with pytest.raises(CoefficientError, match="singular"):
            eval_coefficients(bg, None, cfg, [[0.0, 0.0, 0.5]])

    @settings(max_examples=40, deadline=None)
    @given(points, st.sampled_from(FORMULATIONS))
    def test_continuity_vector_is_minus_beta(self, x, form):
        cs = eval_coefficients(toy_star(), None, SolverConfig(formulation=form), x)
        assert_allclose(cs.continuity_beta, -cs.beta)

    @settings(max_examples=30, deadline=None)
    @given(points, st.floats(0.1, 10.0))
    def test_constant_background_formulations_agree(self, x, omega):
        sets = [eval_coefficients(constant_background(), None,
                                  SolverConfig(formulation=f, omega=omega), x)
                for f in FORMULATIONS]
        for other in sets[1:]:
            assert_allclose(other.A, sets[0].A)
            assert_allclose(other.beta, sets[0].beta)
            assert_allclose(other.rho_coef, sets[0].rho_coef)
            assert_allclose(other.z_bc, sets[0].z_bc)

    @settings(max_examples=30, deadline=None)
    @given(points, st.sampled_from(FORMULATIONS), st.floats(1e-3, 1.0))
    def test_attenuation_on_diagonal(self, x, form, gamma):
        bg = toy_star()
        omega = 2.0
        cs = eval_coefficients(bg, None, SolverConfig(formulation=form, omega=omega,
                                                      gamma_att=gamma), x)
        r = np.linalg.norm(x)
        factor = {"original": bg.rho0(r), "liouville": 1.0,
                  "liouville_c": 1.0 / bg.c0(r) ** 2}[form]
        im = cs.A[0].imag
        assert_allclose(np.diag(im), -2 * omega * gamma * factor, rtol=1e-12)
        assert_allclose(im - np.diag(np.diag(im)), 0.0, atol=1e-14)


class TestPerturbation:
    def spot(self, alpha=0.2, depth=1.0):
        lat = np.linspace(-90, 90, 7)
        lon = np.linspace(-180, 180, 13, endpoint=False)
        return PerturbationField("active_region", alpha=alpha,
                                 surface_map=(lat, lon, -depth * np.ones((7, 13))),
                                 r_c=0.995, variance=8.5e-4)

    def test_none_is_identity(self):
        bg = toy_star()
        x = np.array([[0.1, 0.2, 0.3], [0.0, 0.0, 0.9]])
        r = np.linalg.norm(x, axis=1)
        assert np.array_equal(perturbed_wavespeed(bg, None, x), bg.c0(r))
        assert np.array_equal(perturbed_wavespeed(bg, PerturbationField(), x), bg.c0(r))

    def test_active_region_at_envelope_peak(self):
        bg = toy_star(r_max=1.001)
        x = from_spherical(0.995, 0.3, -1.2)
        c = perturbed_wavespeed(bg, self.spot(), x)
        assert c == pytest.approx(bg.c0(0.995) * (1 - 0.2), rel=1e-12)

    def test_volumetric_outside_support(self):
        r = np.array([0.5, 0.7, 0.8, 0.99])
        lat = np.array([-90.0, 0.0, 90.0])
        lon = np.array([-180.0, 0.0, 120.0])
        table = (r, lat, lon, np.full((4, 3, 3), -0.3))
        pert = PerturbationField("volumetric", volume_table=table, r_lo=0.70, r_hi=0.99)
        bg = toy_star()
        x = from_spherical(np.array([0.5, 0.69, 0.995, 0.85]), 0.2, 0.4)
        c = perturbed_wavespeed(bg, pert, x)
        c0 = bg.c0(np.array([0.5, 0.69, 0.995, 0.85]))
        assert np.array_equal(c[:3], c0[:3])
        assert c[3] == pytest.approx(c0[3] * 0.7)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.05, 0.99), st.floats(-1.5, 1.5), st.floats(-3.1, 3.1))
    def test_volumetric_zero_outside(self, r, lat, lon):
        rg = np.array([0.0, 0.5, 1.0])
        table = (rg, np.array([-90.0, 90.0]), np.array([-180.0, 0.0]),
                 np.full((3, 2, 2), -0.4))
        pert = PerturbationField("volumetric", volume_table=table, r_lo=0.3, r_hi=0.6)
        d = pert.relative(from_spherical(r, lat, lon))
        if r < 0.3 or r > 0.6:
            assert d == 0.0

    @settings(max_examples=30, deadline=None)
    @given(points)
    def test_alpha_zero_gives_background(self, x):
        bg = toy_star(r_max=1.0)
        pert = PerturbationField("active_region", alpha=0.0,
                                 surface_map=gaussian_spot_map(10, 20, 15))
        assert perturbed_wavespeed(bg, pert, x) == bg.c0(np.linalg.norm(x, axis=-1))

    def test_map_values_checked(self):
        lat, lon = np.array([-90.0, 90.0]), np.array([-180.0, 0.0])
        with pytest.raises(ValueError):
            PerturbationField("active_region", surface_map=(lat, lon, np.full((2, 2), 0.1)))
        with pytest.raises(ValueError):
            PerturbationField("active_region", surface_map=(lat, lon, np.full((2, 2), -1.5)))
        with pytest.raises(ValueError, match="variance"):
            PerturbationField("active_region", surface_map=(lat, lon, np.zeros((2, 2))),
                              variance=0.0)

    def test_non_positive_speed_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            perturbed_wavespeed(toy_star(r_max=1.001), self.spot(alpha=1.0),
                                from_spherical(0.995, 0.0, 0.0))

    def test_periodic_longitude(self):
        smap = gaussian_spot_map(0.0, 175.0, 10.0)
        pert = PerturbationField("active_region", alpha=0.5, surface_map=smap)
        a = pert.relative(from_spherical(0.995, 0.0, np.radians(179.9)))
        b = pert.relative(from_spherical(0.995, 0.0, np.radians(-180.1 + 360.0)))
        c = pert.relative(from_spherical(0.995, 0.0, np.radians(-179.9)))
        assert a == pytest.approx(b)
        assert c < 0.0 and c == pytest.approx(pert.relative(from_spherical(0.995, 0, np.radians(180.1))))

    def test_map_and_table_files(self, tmp_path):
        lat = [-45.0, 0.0, 45.0]
        lon = [-180.0, -60.0, 60.0]
        rows = [(a, b, -0.1 * i) for i, (a, b) in enumerate((a, b) for a in lat for b in lon)]
        lat_, lon_, d = load_surface_map(write_csv(tmp_path / "m.csv",
                                                   ["theta_deg", "phi_deg", "delta"], rows))
        assert_allclose(lat_, lat)
        assert_allclose(d.ravel(), [-0.1 * i for i in range(9)])
        vrows = [(r, a, b, -0.05) for r in (0.7, 0.9) for a in lat for b in lon]
        r, _, _, dv = load_volume_table(write_csv(tmp_path / "v.csv",
                                                  ["r", "theta_deg", "phi_deg", "delta"], vrows))
        assert dv.shape == (2, 3, 3)
        with pytest.raises(ValueError, match="regular grid"):
            load_surface_map(write_csv(tmp_path / "bad.csv", ["theta_deg", "phi_deg", "delta"],
                                       rows[:-1]))


class TestSource:
    def test_peak(self):
        c = (0.9, 0.3, -0.4)
        x = from_spherical(*c)
        assert source_gaussian(c, DEFAULT_SOURCE_VARIANCES, x) == pytest.approx(1.0)

    def test_default_widths(self):
        assert_allclose(np.sqrt(DEFAULT_SOURCE_VARIANCES), [1e-2, 0.2, 0.2])
        assert GaussianSource((0.9, 0.0, 0.0)).variances == DEFAULT_SOURCE_VARIANCES

    def test_formula(self):
        c, v = (0.8, 0.1, 0.2), (0.01, 0.04, 0.09)
        x = from_spherical(0.85, 0.2, 0.5)
        expect = math.exp(-0.05**2 / 0.01 - 0.1**2 / 0.04 - 0.3**2 / 0.09)
        assert source_gaussian(c, v, x) == pytest.approx(expect, rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3.0, 3.0), st.integers(-2, 2))
    def test_periodic_wrap(self, lon, k):
        c, v = (0.9, 0.2, 0.1), (1e-2, 0.04, 0.04)
        x1 = from_spherical(0.88, 0.25, lon)
        x2 = from_spherical(0.88, 0.25, lon + 2 * math.pi * k)
        assert source_gaussian(c, v, x1) == pytest.approx(source_gaussian(c, v, x2), abs=1e-12)

    def test_polar_source_is_axisymmetric(self):
        src = GaussianSource((0.8, math.pi / 2, 0.0), (0.01, 0.04, 0.04))
        x = from_spherical(0.8, 1.4, np.linspace(-3, 3, 7))
        vals = src(x)
        assert_allclose(vals, vals[0], rtol=1e-12)

    def test_bad_variance(self):
        with pytest.raises(ValueError):
            source_gaussian((0.9, 0, 0), (0.0, 1, 1), [0.9, 0, 0])


class TestSolverConfig:
    def test_from_frequency(self):
        cfg = SolverConfig.from_frequency(3.0, 10.0)
        assert cfg.omega == pytest.approx(2 * math.pi * 3e-3)
        assert cfg.gamma_att == pytest.approx(2 * math.pi * 1e-5)
        assert cfg.tau_scale == 1e6

    @pytest.mark.parametrize("kw", [dict(omega=0.0), dict(gamma_att=-1.0), dict(eps_blr=1.0),
                                    dict(eps_blr=0.0), dict(formulation="euler")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


def test_spherical_roundtrip(rng):
    x = rng.normal(size=(20, 3))
    assert_allclose(from_spherical(*to_spherical(x)), x, atol=1e-12)
