import numpy as np
import pytest

from hmmflow import mesh


def polygon_contains(poly, point):
    # ray casting, robust enough for strictly interior points
    x, y = point
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            t = (y - y1) / (y2 - y1)
            if x < x1 + t * (x2 - x1):
                inside = not inside
    return inside


class TestBuildStructured:
    def test_single_quad_split(self):
        m = mesh.build_structured(1, 1)
        assert m.n_triangles == 2
        assert m.n_vertices == 4

    def test_area_partition(self):
        m = mesh.build_structured(2, 2)
        assert m.n_triangles == 8
        assert m.n_vertices == 9
        assert m.total_area() == pytest.approx(1.0, abs=0.0)

    def test_min_angle_scan(self):
        m = mesh.build_structured(4, 4)
        angles = mesh.min_angles(m.vertices, m.triangles)
        assert angles.min() >= 20.0

    @pytest.mark.parametrize("nx,ny", [(0, 1), (1, 0), (-2, 3)])
    def test_rejects_bad_counts(self, nx, ny):
        with pytest.raises(mesh.MeshError):
            mesh.build_structured(nx, ny)

    def test_rectangle_domain(self):
        m = mesh.build_structured(3, 2, (1.0, -1.0, 4.0, 1.0))
        assert m.total_area() == pytest.approx(6.0, rel=1e-14)


class TestDual:
    def test_two_triangle_partition(self):
        m = mesh.build_structured(1, 1)
        d = mesh.build_dual(m)
        assert d.n_cells == 4
        assert d.cell_area.sum() == pytest.approx(1.0, rel=1e-12)

    def test_interior_cell_star_shaped(self):
        m = mesh.build_structured(4, 4)
        d = mesh.build_dual(m)
        for i in m.interior_vertices:
            assert polygon_contains(d.cell_polygons[i], m.vertices[i])

    def test_normal_closure_per_interior_cell(self):
        # sum of scaled outward normals over a closed polygon boundary is zero
        m = mesh.build_structured(3, 4)
        d = mesh.build_dual(m)
        total = np.zeros((d.n_cells, 2))
        np.add.at(total, d.seg_a, d.seg_normal)
        np.add.at(total, d.seg_b, -d.seg_normal)
        assert np.abs(total[d.interior]).max() < 1e-12

    def test_partition_after_refinement(self):
        m = mesh.build_structured(2, 2)
        rng = np.random.default_rng(7)
        for _ in range(3):
            marked = rng.choice(m.n_triangles, size=max(1, m.n_triangles // 3), replace=False)
            m = mesh.refine(m, marked)
            d = mesh.build_dual(m)
            assert abs(d.cell_area.sum() - m.total_area()) <= 1e-12 * m.total_area()

    def test_poincare_constants(self):
        m = mesh.build_structured(4, 4)
        d = mesh.build_dual(m)
        assert set(np.round(d.C_P, 12)) <= {round(1 / np.pi, 12), 1.0}
        assert np.all(d.H_D > 0)

    def test_fragment_weights_partition(self):
        w = mesh.fragment_weights()
        assert w.sum(axis=1) == pytest.approx(np.full(3, 1.0 / 3.0), rel=1e-15)
        assert np.allclose(w.sum(axis=0), np.full(3, 1.0 / 3.0))

    def test_unit_normals(self):
        m = mesh.build_structured(3, 2)
        d = mesh.build_dual(m)
        assert np.abs(np.linalg.norm(d.seg_unit_normal, axis=1) - 1.0).max() < 1e-14
        # scaled normal recovers segment geometry: length times unit direction
        assert np.abs(d.seg_unit_normal * d.seg_length[:, None] - d.seg_normal).max() < 1e-14


class TestTorus:
    def test_m2_identification(self):
        t = mesh.build_torus(2)
        assert t.n_triangles == 8
        assert t.n_vertices == 4  # 9 raw vertices collapse to 4 classes

    def test_every_face_has_two_triangles(self):
        t = mesh.build_torus(4)
        assert t.face_tris.shape == (3 * 16, 2)
        assert np.all(t.face_tris >= 0)
        assert np.all(t.face_tris < t.n_triangles)

    def test_euler_face_count(self):
        t = mesh.build_torus(8)
        assert len(t.face_tris) == 3 * 64
        # each face counted once: total length of the three edge families
        h = 1.0 / 8
        expected = 64 * h + 64 * h + 64 * h * np.sqrt(2.0)
        assert t.face_len.sum() == pytest.approx(expected, rel=1e-12)

    def test_representative_idempotent(self):
        t = mesh.build_torus(4)
        raw = np.arange(25)
        once = t.representative(raw)
        assert np.array_equal(t.representative(once), once)

    def test_rejects_m1(self):
        with pytest.raises(mesh.MeshError):
            mesh.build_torus(1)

    def test_areas_partition_unit_cell(self):
        t = mesh.build_torus(5)
        assert t.areas.sum() == pytest.approx(1.0, rel=1e-12)


class TestRefine:
    def test_empty_marked_is_identity(self):
        m = mesh.build_structured(2, 2)
        m2 = mesh.refine(m, [])
        assert np.array_equal(m2.triangles, m.triangles)
        assert np.array_equal(m2.vertices, m.vertices)

    def test_refine_all(self):
        m = mesh.build_structured(2, 2)
        m2 = mesh.refine(m, np.arange(m.n_triangles))
        assert np.all(m2.generation >= 1)
        assert m2.total_area() == pytest.approx(1.0, rel=1e-14)
        assert m2.n_triangles == 2 * m.n_triangles

    def test_single_mark_conforming(self):
        m = mesh.build_structured(4, 4)
        m2 = mesh.refine(m, [5])
        # hanging node scan: every edge belongs to 1 or 2 triangles and
        # single-triangle edges lie on the domain boundary
        for e, ts in enumerate(m2.edge_tris):
            assert len(ts) in (1, 2)
            if len(ts) == 1:
                a, b = m2.edges[e]
                for v in (a, b):
                    x, y = m2.vertices[v]
                    assert min(abs(x), abs(x - 1), abs(y), abs(y - 1)) < 1e-12

    def test_marked_strictly_smaller(self):
        m = mesh.build_structured(2, 2)
        area_before = m.areas[3]
        m2 = mesh.refine(m, [3])
        assert m2.areas.max() <= area_before + 1e-15
        assert m2.n_triangles > m.n_triangles

    def test_min_angle_preserved_on_unit_square(self):
        # right isoceles triangles bisect into right isoceles triangles
        m = mesh.build_structured(2, 2)
        rng = np.random.default_rng(3)
        for _ in range(4):
            marked = rng.choice(m.n_triangles, size=2, replace=False)
            m = mesh.refine(m, marked)
        assert mesh.min_angles(m.vertices, m.triangles).min() >= 45.0 - 1e-9

    def test_rejects_out_of_range(self):
        m = mesh.build_structured(2, 2)
        with pytest.raises(mesh.MeshError):
            mesh.refine(m, [99])

    def test_generations_increase(self):
        m = mesh.build_structured(1, 1)
        m2 = mesh.refine(m, [0, 1])
        m3 = mesh.refine(m2, np.arange(m2.n_triangles))
        assert m3.generation.max() >= 2
