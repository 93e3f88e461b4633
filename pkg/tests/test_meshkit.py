import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from meshbench.errors import InvalidDimensionError, InvalidGeometryError, InvalidGradingError
from meshbench.meshkit import (TriMesh, angular_split_rule, make_graded, make_structured,
                               make_trimesh_annulus_sector, radial_split_rule)


def audit_trimesh(mesh):
    """Brute-force orientation and index audit, independent of TriMesh.validate."""
    n = len(mesh.nodes)
    for i, j, k in mesh.triangles.tolist():
        assert 0 <= min(i, j, k) and max(i, j, k) < n
        (x1, y1), (x2, y2), (x3, y3) = mesh.nodes[i], mesh.nodes[j], mesh.nodes[k]
        assert (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1) > 0
    assert mesh.boundary_nodes
    assert np.all(np.isfinite(mesh.nodes))


class TestStructured:
    def test_paper_resolution(self):
        g = make_structured(128, 128)
        assert g.spacing == (1 / 128, 1 / 128)

    def test_smallest_grid(self):
        g = make_structured(2, 2)
        assert g.shape == (2, 2) and g.spacing == (0.5, 0.5)

    def test_per_axis_spacing(self):
        g = make_structured(32, 16)
        assert g.hx == 1 / 32 and g.hy == 1 / 16
        assert g.shape == (16, 32)

    @pytest.mark.parametrize("nx,ny", [(1, 4), (4, 1), (0, 0)])
    def test_too_small(self, nx, ny):
        with pytest.raises(InvalidDimensionError):
            make_structured(nx, ny)

    @given(st.integers(2, 40), st.integers(2, 40))
    def test_nodes_inside_domain(self, nx, ny):
        g = make_structured(nx, ny)
        x, y = g.node_coords()
        assert np.all(np.isfinite(x)) and np.all(np.isfinite(y))
        assert x.min() == 0.0 and y.min() == 0.0
        assert abs(x.max() - 1.0) < 1e-12 and abs(y.max() - 1.0) < 1e-12
        cx, cy = g.cell_centers()
        assert cx.shape == g.shape and np.all((cx > 0) & (cx < 1))


class TestGraded:
    def test_u_bend_size(self):
        g = make_graded(240, 60, 1.1)
        assert len(g.cross_spacings) == 60
        assert g.cross_spacings[0] == g.cross_spacings.min()
        assert g.cross_spacings[-1] == g.cross_spacings.min()

    def test_ratio_one_uniform(self):
        g = make_graded(10, 4, 1.0)
        np.testing.assert_allclose(g.cross_spacings, 0.25, rtol=0, atol=1e-15)

    def test_ratio_two_closed_form(self):
        g = make_graded(4, 4, 2.0)
        # h + 2h = 0.5 per half
        np.testing.assert_allclose(g.cross_spacings, [1 / 6, 1 / 3, 1 / 3, 1 / 6], rtol=1e-14)

    def test_errors(self):
        with pytest.raises(InvalidDimensionError):
            make_graded(10, 5, 1.1)
        with pytest.raises(InvalidGradingError):
            make_graded(10, 4, 0.9)

    @given(st.integers(2, 30), st.integers(1, 30), st.floats(1.0, 1.5))
    def test_grading_invariants(self, n_stream, half, ratio):
        g = make_graded(n_stream, 2 * half, ratio)
        h = g.cross_spacings
        assert abs(h.sum() - 1.0) < 1e-12
        np.testing.assert_array_equal(h, h[::-1])
        left = h[:half]
        np.testing.assert_allclose(left[1:] / left[:-1], ratio, rtol=1e-9)
        np.testing.assert_allclose(g.stream_spacings, 1.0 / n_stream)

    def test_spacings_frozen(self):
        g = make_graded(4, 4, 1.2)
        with pytest.raises(ValueError):
            g.cross_spacings[0] = 1.0


class TestTriMesh:
    def test_uniform_counts(self):
        m = make_trimesh_annulus_sector(2, 4)
        assert m.n_triangles == 16
        assert m.regions == [0]

    def test_angular_split(self):
        m = make_trimesh_annulus_sector(2, 4, "angular_split")
        assert m.regions == [0, 1]

    def test_orientation_audit(self):
        audit_trimesh(make_trimesh_annulus_sector(8, 32))

    @given(st.integers(2, 10), st.integers(4, 20), st.floats(0.1, 2.0), st.floats(0.1, 2.0))
    def test_generated_meshes_valid(self, nr, na, r_in, dr):
        m = make_trimesh_annulus_sector(nr, na, radial_split_rule(r_in + dr / 2), r_in, r_in + dr)
        audit_trimesh(m)
        m.validate()
        assert m.n_triangles == 2 * nr * na

    @pytest.mark.parametrize("r_in,r_out", [(0.0, 1.0), (1.0, 1.0), (1.0, 0.5), (0.5, math.inf)])
    def test_degenerate_radii(self, r_in, r_out):
        with pytest.raises(InvalidGeometryError):
            make_trimesh_annulus_sector(4, 8, r_inner=r_in, r_outer=r_out)

    def test_boundary_is_outer_ring(self):
        m = make_trimesh_annulus_sector(3, 6)
        r = np.hypot(*m.nodes.T)
        th = np.arctan2(m.nodes[:, 1], m.nodes[:, 0])
        on_edge = (np.isclose(r, 0.5) | np.isclose(r, 1.0) | np.isclose(np.abs(th), math.pi / 4))
        assert set(np.flatnonzero(on_edge).tolist()) == set(m.boundary_nodes)

    def test_text_round_trip(self, tmp_path):
        m = make_trimesh_annulus_sector(3, 5, angular_split_rule)
        m.save(tmp_path / "m.txt")
        back = TriMesh.load(tmp_path / "m.txt")
        np.testing.assert_array_equal(back.nodes, m.nodes)
        np.testing.assert_array_equal(back.triangles, m.triangles)
        np.testing.assert_array_equal(back.region_id, m.region_id)
        assert back.boundary_nodes == m.boundary_nodes

    def test_text_comments_and_errors(self):
        text = "# header\nv 0 0\nv 1 0  # trailing\nv 0 1\nt 0 1 2 3\nb 0\n"
        m = TriMesh.from_text(text)
        assert m.n_nodes == 3 and m.region_id.tolist() == [3]
        with pytest.raises(InvalidGeometryError):
            TriMesh.from_text("q 1 2\n")

    def test_validate_rejects(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(InvalidGeometryError):
            TriMesh(nodes, [[0, 2, 1]], [0], frozenset({0})).validate()
        with pytest.raises(InvalidGeometryError):
            TriMesh(nodes, [[0, 1, 3]], [0], frozenset({0})).validate()
        with pytest.raises(InvalidGeometryError):
            TriMesh(nodes, [[0, 1, 2]], [0], frozenset()).validate()
        dup = np.vstack([nodes, [[1.0, 0.0]]])
        with pytest.raises(InvalidGeometryError):
            TriMesh(dup, [[0, 1, 2]], [0], frozenset({0})).validate()
