import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from helioshdg.background import RadialBackground, SolverConfig, constant_background, toy_star
from helioshdg.mesh import (LayerSpec, MeshError, build_cube, build_layered_ball, export_msh,
                            from_cells, icosphere, import_msh, local_wavelength, mesh_stats)

from conftest import single_cell_mesh, two_cell_mesh


def check_invariants(mesh):
    nc = mesh.n_cells
    interior = ~mesh.boundary
    # face sharing and the incidence count
    counts = np.bincount(mesh.cell_faces.ravel(), minlength=mesh.n_faces)
    assert np.all(counts[interior] == 2)
    assert np.all(counts[mesh.boundary] == 1)
    assert 4 * nc == 2 * interior.sum() + mesh.boundary.sum()
    # opposite orientation signs on interior faces
    sums = np.zeros(mesh.n_faces, dtype=int)
    np.add.at(sums, mesh.cell_faces.ravel(), mesh.cell_face_sign.ravel())
    assert np.all(sums[interior] == 0)
    assert np.all(sums[mesh.boundary] == 1)
    assert np.all(mesh.volumes() > 0)
    # outward normals
    X = mesh.vertices[mesh.cells]
    cen = X.mean(axis=1)
    fcen = mesh.vertices[mesh.faces].mean(axis=1)
    out = np.einsum("cld,cld->cl", mesh.face_normals, fcen[mesh.cell_faces] - cen[:, None])
    assert np.all(out > 0)
    assert_allclose(np.linalg.norm(mesh.face_normals, axis=2), 1.0)
    # shared face normals are opposite
    f = np.flatnonzero(interior)
    c0, c1 = mesh.face_cells[f, 0], mesh.face_cells[f, 1]
    l0 = np.argmax(mesh.cell_faces[c0] == f[:, None], axis=1)
    l1 = np.argmax(mesh.cell_faces[c1] == f[:, None], axis=1)
    assert_allclose(mesh.face_normals[c0, l0], -mesh.face_normals[c1, l1], atol=1e-12)
    assert np.all(c0 < c1)


class TestCube:
    def test_single_subdivision(self):
        m = build_cube(1)
        assert (m.n_cells, m.n_faces, int(m.boundary.sum())) == (6, 18, 12)

    def test_two_subdivisions(self):
        assert build_cube(2).n_cells == 48

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_counts_and_invariants(self, n):
        m = build_cube(n)
        assert m.n_cells == 6 * n**3
        assert m.boundary.sum() == 12 * n**2
        assert m.volumes().sum() == pytest.approx(1.0)
        check_invariants(m)

    def test_invalid(self):
        with pytest.raises(MeshError):
            build_cube(0)


class TestLayeredBall:
    def test_icosahedron_fan(self):
        m = build_layered_ball(LayerSpec([], [1.0], 0))
        assert m.n_cells == 20
        assert m.boundary.sum() == 20
        check_invariants(m)

    def test_two_shells(self):
        m = build_layered_ball(LayerSpec([0.5], [1.0], 0))
        assert m.n_cells == 20 + 60
        check_invariants(m)

    @pytest.mark.parametrize("level", [0, 1, 2])
    def test_icosphere_counts(self, level):
        v, t = icosphere(level)
        assert t.shape[0] == 20 * 4**level
        assert v.shape[0] == 10 * 4**level + 2
        assert_allclose(np.linalg.norm(v, axis=1), 1.0)

    def test_volume_converges(self):
        errs = []
        for level in (0, 1, 2, 3):
            m = build_layered_ball(LayerSpec([0.5], [0.9, 1.0], level))
            errs.append(abs(m.volumes().sum() / (4 / 3 * math.pi) - 1))
        assert errs[2] < 0.05
        assert all(a > b for a, b in zip(errs, errs[1:]))

    @settings(max_examples=10, deadline=None)
    @given(st.lists(st.floats(0.1, 1.0), min_size=1, max_size=4, unique=True),
           st.integers(0, 2))
    def test_invariants_random_radii(self, radii, level):
        radii = sorted(radii)
        if np.any(np.diff(radii) < 1e-3):
            return
        m = build_layered_ball(LayerSpec(radii[:-1], radii[-1:], level))
        assert m.n_cells == 20 * 4**level * (1 + 3 * (len(radii) - 1))
        check_invariants(m)
        r = np.linalg.norm(m.vertices[m.faces[m.boundary]], axis=2)
        assert_allclose(r, radii[-1])

    def test_invalid_spec(self):
        with pytest.raises(MeshError):
            LayerSpec([0.6], [0.5], 1)
        with pytest.raises(MeshError):
            LayerSpec([], [], 1)


class TestFromCells:
    def test_degenerate_cell(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        with pytest.raises(MeshError, match="degenerate"):
            from_cells(v, [[0, 1, 2, 3]])

    def test_dangling_vertex(self):
        v = np.vstack([np.eye(3), [[0, 0, 0], [5, 5, 5]]])
        with pytest.raises(MeshError, match="dangling"):
            from_cells(v, [[3, 0, 1, 2]])

    def test_reorients(self):
        m = from_cells(np.vstack([np.zeros(3), np.eye(3)]), [[0, 2, 1, 3]])
        assert m.volumes()[0] > 0
        check_invariants(m)

    def test_small_meshes(self):
        check_invariants(single_cell_mesh())
        m = two_cell_mesh()
        check_invariants(m)
        assert m.n_faces == 7


class TestMsh:
    @pytest.mark.parametrize("mesh", [build_cube(2), build_layered_ball(LayerSpec([0.5], [1.0], 1))])
    def test_roundtrip(self, tmp_path, mesh):
        export_msh(mesh, tmp_path / "m.msh")
        m2 = import_msh(tmp_path / "m.msh")
        assert np.array_equal(m2.cells, mesh.cells)
        assert np.array_equal(m2.faces, mesh.faces)
        assert np.array_equal(m2.cell_faces, mesh.cell_faces)
        assert np.array_equal(m2.boundary, mesh.boundary)
        assert_allclose(m2.vertices, mesh.vertices, rtol=0, atol=0)

    def msh(self, tmp_path, elements, nodes=None):
        nodes = nodes or ["1 0 0 0", "2 1 0 0", "3 0 1 0", "4 0 0 1"]
        text = ("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n" + f"{len(nodes)}\n"
                + "\n".join(nodes) + "\n$EndNodes\n$Elements\n" + f"{len(elements)}\n"
                + "\n".join(elements) + "\n$EndElements\n")
        p = tmp_path / "x.msh"
        p.write_text(text)
        return p

    def test_triangles_ignored(self, tmp_path):
        m = import_msh(self.msh(tmp_path, ["1 2 2 0 1 1 2 3", "2 4 2 0 1 1 2 3 4"]))
        assert m.n_cells == 1

    def test_non_tetrahedral(self, tmp_path):
        with pytest.raises(MeshError, match="element type 5"):
            import_msh(self.msh(tmp_path, ["1 5 2 0 1 1 2 3 4 1 2 3 4"]))

    def test_dangling(self, tmp_path):
        p = self.msh(tmp_path, ["1 4 2 0 1 1 2 3 4"],
                     nodes=["1 0 0 0", "2 1 0 0", "3 0 1 0", "4 0 0 1", "5 3 3 3"])
        with pytest.raises(MeshError, match="dangling"):
            import_msh(p)

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.msh"
        p.write_text("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n4\n1 0 0\n$EndNodes\n")
        with pytest.raises(MeshError):
            import_msh(p)
        p.write_text("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n4\n")
        with pytest.raises(MeshError, match="unterminated"):
            import_msh(p)
        with pytest.raises(MeshError, match="node"):
            import_msh(self.msh(tmp_path, ["1 4 2 0 1 1 2 3 9"]))


class TestWavelength:
    def test_unit(self):
        m = build_cube(1, 0.5)
        lam = local_wavelength(m, constant_background(), SolverConfig(omega=2 * math.pi))
        assert_allclose(lam, 1.0)

    def test_linear_in_speed(self):
        m = build_cube(1, 0.5)
        bg = RadialBackground([0, 1], [1, 1], [2, 2], [0, 0])
        assert_allclose(local_wavelength(m, bg, SolverConfig(omega=2 * math.pi), cell=3), 2.0)

    def test_shorter_near_surface(self):
        m = build_layered_ball(LayerSpec([0.3, 0.6], [0.9, 1.0], 1))
        lam = local_wavelength(m, toy_star(), SolverConfig(omega=10.0))
        r = np.linalg.norm(m.centroids(), axis=1)
        assert lam[r > 0.9].max() < lam[r < 0.3].min()


def test_stats_keys():
    s = mesh_stats(build_cube(1))
    assert s["cells"] == 6 and s["boundary_faces"] == 12
    assert s["volume"] == pytest.approx(1.0)
