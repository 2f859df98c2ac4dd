import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fwdinv.mesh import (DEFAULT_CONDUCTIVITIES, DEFAULT_RADII, EmptySurfaceError, LayeredSphereSpec,
                         MeshError, PointOutsideMeshError, build_layered_sphere_mesh, core_cells,
                         depth_from_surface, extract_interface_surface, load_mesh, outer_surface,
                         point_triangle_distance, radial_anisotropy, save_mesh)

from conftest import random_ball_points


def brute_force_locate(mesh, p, tol=1e-10):
    """Scan every element, solving the 4x4 barycentric system directly."""
    for e, tet in enumerate(mesh.tets):
        m = np.vstack([mesh.vertices[tet].T, np.ones(4)])
        lam = np.linalg.solve(m, np.append(p, 1.0))
        if np.all(lam >= -tol):
            return e, lam
    return None, None


def segment_distance(p, a, b):
    t = np.clip(np.dot(p - a, b - a) / np.dot(b - a, b - a), 0.0, 1.0)
    return np.linalg.norm(p - (a + t * (b - a)))


def brute_triangle_distance(p, a, b, c):
    """Plane projection if it falls inside, otherwise the nearest edge."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    m = np.column_stack([b - a, c - a])
    st_, *_ = np.linalg.lstsq(m, q - a, rcond=None)
    if st_[0] >= 0 and st_[1] >= 0 and st_.sum() <= 1:
        return abs(np.dot(p - a, n))
    return min(segment_distance(p, a, b), segment_distance(p, b, c), segment_distance(p, c, a))


class TestBuild:
    def test_single_layer_surface_vertices_on_sphere(self, tiny_ball):
        surf = outer_surface(tiny_ball)
        r = np.linalg.norm(tiny_ball.vertices[np.unique(surf.triangles)], axis=1)
        assert np.allclose(r, 92.0, atol=1e-9)

    def test_four_layer_refinement3_volume(self):
        mesh = build_layered_sphere_mesh(LayeredSphereSpec(refinement=3))
        exact = 4 / 3 * np.pi * 92.0 ** 3
        assert abs(mesh.volumes.sum() / exact - 1) <= 0.02
        # per-compartment shell volumes
        r = np.concatenate([[0.0], DEFAULT_RADII])
        for label, vol in mesh.compartment_volumes().items():
            shell = 4 / 3 * np.pi * (r[label + 1] ** 3 - r[label] ** 3)
            assert abs(vol / shell - 1) <= 0.02

    def test_partition_of_unity(self, layered):
        assert np.abs(layered.grads.sum(axis=1)).max() <= 1e-12

    def test_refinement_scale(self):
        assert [core_cells(r) for r in range(4)] == [3, 6, 12, 24]
        spec = LayeredSphereSpec(refinement=3, cells=5)
        assert spec.n_core == 5

    def test_labels_and_interfaces_on_spheres(self, layered):
        assert set(np.unique(layered.labels)) == {0, 1, 2, 3}
        for inner, radius in zip(range(3), DEFAULT_RADII):
            s = extract_interface_surface(layered, inner, inner + 1)
            r = np.linalg.norm(s.vertices[np.unique(s.triangles)], axis=1)
            assert np.allclose(r, radius, atol=1e-9)

    def test_positive_orientation(self, layered):
        assert np.all(layered.volumes > 0)

    @pytest.mark.parametrize("kwargs", [
        dict(radii=(80.0, 70.0), conductivities=(1.0, 1.0)),
        dict(radii=(80.0,), conductivities=(1.0, 2.0)),
        dict(radii=(80.0,), conductivities=(-1.0,)),
        dict(radii=(80.0,), conductivities=(1.0,), refinement=-1),
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(MeshError):
            LayeredSphereSpec(**kwargs)

    def test_element_cap(self):
        with pytest.raises(MeshError):
            build_layered_sphere_mesh(LayeredSphereSpec(refinement=2, element_cap=1000))

    def test_center_offset(self):
        c = np.array([1.0, -2.0, 3.0])
        m = build_layered_sphere_mesh(LayeredSphereSpec((50.0,), (1.0,), refinement=0, center=c))
        r = np.linalg.norm(m.vertices[m.boundary_vertices()] - c, axis=1)
        assert np.allclose(r, 50.0, atol=1e-9)


class TestLocation:
    def test_centroids_locate_to_own_element(self, layered):
        cent = layered.centroids
        for e in range(0, layered.n_elements, 97):
            found, lam = layered.find_enclosing_element(cent[e])
            assert found == e
            assert np.allclose(lam, 0.25, atol=1e-12)

    def test_shared_vertex_tie_goes_to_lowest_index(self, tiny_ball):
        v = int(tiny_ball.tets[500, 2])
        e, lam = tiny_ball.find_enclosing_element(tiny_ball.vertices[v])
        incident = np.nonzero(np.any(tiny_ball.tets == v, axis=1))[0]
        assert e == incident.min()
        assert np.isclose(lam.max(), 1.0, atol=1e-12)

    def test_random_points_match_brute_force(self, tiny_ball, rng):
        pts = random_ball_points(rng, 1000, 85.0)
        for p in pts:
            e, lam = tiny_ball.find_enclosing_element(p)
            e_ref, lam_ref = brute_force_locate(tiny_ball, p)
            assert e == e_ref
            assert np.allclose(lam, lam_ref, atol=1e-9)

    def test_outside_raises(self, tiny_ball):
        with pytest.raises(PointOutsideMeshError):
            tiny_ball.find_enclosing_element(np.array([0.0, 0.0, 200.0]))
        assert not tiny_ball.contains(np.array([93.0, 0.0, 0.0]))


class TestSurfaces:
    def test_interface_triangle_count_matches_face_adjacency(self, layered):
        s = extract_interface_surface(layered, 0, 1)
        count = 0
        brain = np.nonzero(layered.labels == 0)[0]
        csf = set(np.nonzero(layered.labels == 1)[0].tolist())
        faces_csf = {}
        for e in csf:
            t = layered.tets[e]
            for k in range(4):
                faces_csf[tuple(sorted(np.delete(t, k)))] = e
        for e in brain:
            t = layered.tets[e]
            for k in range(4):
                if tuple(sorted(np.delete(t, k))) in faces_csf:
                    count += 1
        assert s.n_triangles == count

    def test_euler_characteristic(self, layered):
        for inner in range(3):
            assert extract_interface_surface(layered, inner, inner + 1).euler_characteristic() == 2
        assert outer_surface(layered).euler_characteristic() == 2

    def test_normals_point_outward(self, layered):
        s = extract_interface_surface(layered, 1, 2)
        mid = s.vertices[s.triangles].mean(axis=1)
        assert np.all(np.einsum("ij,ij->i", s.normals, mid) > 0)

    def test_single_compartment_has_no_interface(self, tiny_ball):
        with pytest.raises(EmptySurfaceError):
            extract_interface_surface(tiny_ball, 0, 1)

    def test_empty_interface(self, layered):
        # brain and skull never touch
        with pytest.raises(EmptySurfaceError):
            extract_interface_surface(layered, 0, 2)


class TestDepth:
    def test_point_on_surface_is_zero(self, layered):
        s = extract_interface_surface(layered, 1, 2)
        p = s.vertices[s.triangles[10]].mean(axis=0)
        assert depth_from_surface(p, s) == pytest.approx(0.0, abs=1e-9)

    def test_center_depth_of_radius_82_sphere(self):
        m = build_layered_sphere_mesh(LayeredSphereSpec((82.0,), (1.0,), refinement=2))
        d = depth_from_surface(np.zeros(3), outer_surface(m))
        # facets lie inside the sphere; the sagitta at this resolution is below 0.3 mm
        assert 81.7 <= d <= 82.0

    def test_random_points_match_brute_force(self, tiny_ball, rng):
        s = outer_surface(tiny_ball)
        tri = s.vertices[s.triangles]
        pts = np.vstack([random_ball_points(rng, 15, 92.0), rng.normal(0, 100, (5, 3))])
        depth = depth_from_surface(pts, s)
        for p, d in zip(pts, depth):
            ref = min(brute_triangle_distance(p, *t) for t in tri)
            assert d == pytest.approx(ref, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=12, max_size=12))
    def test_point_triangle_distance_property(self, xs):
        x = np.array(xs).reshape(4, 3)
        a, b, c = x[1], x[2], x[3]
        if np.linalg.norm(np.cross(b - a, c - a)) < 1e-3:
            return
        d = point_triangle_distance(x[:1], a[None], b[None], c[None])[0, 0]
        assert d == pytest.approx(brute_triangle_distance(x[0], a, b, c), abs=1e-9)
        # never farther than any vertex
        assert d <= min(np.linalg.norm(x[0] - v) for v in (a, b, c)) + 1e-12


class TestAnisotropy:
    def test_radial_tensor(self, layered):
        an = radial_anisotropy(layered, 0, 2.0)
        brain = np.nonzero(layered.labels == 0)[0]
        e = brain[len(brain) // 2]
        r = layered.centroids[e] / np.linalg.norm(layered.centroids[e])
        t = an.conductivity[e]
        w, v = np.linalg.eigh(t)
        # one radial eigenvector with the smallest eigenvalue, a tangential pair twice as large
        assert np.allclose(w[1:], 2 * w[0])
        assert abs(abs(np.dot(v[:, 0], r)) - 1) < 1e-12
        # volume preserving: determinant kept
        assert np.linalg.det(t) == pytest.approx(0.33 ** 3, rel=1e-12)

    def test_other_compartments_untouched(self, layered):
        an = radial_anisotropy(layered, 0, 2.0)
        other = layered.labels != 0
        assert np.array_equal(an.conductivity[other], layered.conductivity[other])
        assert an.vertices is layered.vertices


def test_mesh_round_trip(tmp_path, tiny_ball):
    save_mesh(tiny_ball, tmp_path / "m.txt")
    back = load_mesh(tmp_path / "m.txt")
    assert np.array_equal(back.vertices, tiny_ball.vertices)
    assert np.array_equal(back.tets, tiny_ball.tets)
    assert np.array_equal(back.labels, tiny_ball.labels)
    assert np.array_equal(back.conductivity, tiny_ball.conductivity)


def test_truncated_mesh_file(tmp_path, tiny_ball):
    save_mesh(tiny_ball, tmp_path / "m.txt")
    lines = (tmp_path / "m.txt").read_text().splitlines()
    (tmp_path / "bad.txt").write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(MeshError):
        load_mesh(tmp_path / "bad.txt")
