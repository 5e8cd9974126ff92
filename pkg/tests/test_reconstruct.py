import numpy as np
import pytest

from mfforge.background import build_box_mesh, default_relocation_params, relocate_nodes
from mfforge.levelset import LevelSetField, plane_field, sphere_field
from mfforge.quadrature import rule
from mfforge.reconstruct import (
    InvalidDataError,
    NodeRegistry,
    canonical_face_frame,
    classify_cut,
    edge_roots_batch,
    element_normals,
    reconstruct_face_line,
    reconstruct_surface,
    treated_signs,
)


def _relocated_mesh(lo, hi, div, order, fld):
    mesh = build_box_mesh(lo, hi, div, order)
    mesh, _, ok = relocate_nodes(mesh, fld, default_relocation_params(mesh.h))
    assert ok
    return mesh


def element_measure(elem):
    from mfforge.lagrange import reference_element

    ref = reference_element(elem.shape, elem.order)
    pts, wts = rule(elem.shape, 2 * elem.order + 2)
    G = ref.grad(pts)
    J = np.einsum("qnm,nd->qdm", G, elem.node_coords_phys)
    if elem.shape == "line":
        ds = np.linalg.norm(J[:, :, 0], axis=1)
    elif J.shape[1] == 3:
        ds = np.linalg.norm(np.cross(J[:, :, 0], J[:, :, 1]), axis=1)
    else:
        ds = np.abs(J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0])
    return wts @ ds


class TestClassify:
    def test_triangular(self):
        topo = classify_cut([-1, 1, 1, 1], 1e-12)
        assert topo.kind == "triangular"
        assert len(topo.cut_edges) == 3

    def test_quadrilateral(self):
        topo = classify_cut([-1, -1, 1, 1], 1e-12)
        assert topo.kind == "quadrilateral"
        assert len(topo.cut_edges) == 4

    def test_none(self):
        assert classify_cut([1, 1, 1, 1], 1e-12).kind == "none"
        assert classify_cut([-2, -1, -3, -0.5], 1e-12).kind == "none"

    def test_2d_line(self):
        topo = classify_cut([-1, 1, 1], 1e-12, dim=2)
        assert topo.kind == "line"
        assert len(topo.cut_edges) == 2

    def test_tiny_values_count_positive(self):
        assert (treated_signs([-1e-15, 1.0, -1.0], 1e-12) == [1, 1, -1]).all()
        assert classify_cut([1e-14, 1, 1, 1], 1e-12).kind == "none"


class TestEdgeRoots:
    def test_linear_midpoint(self):
        fld = plane_field((0.5, 0.0), (1.0, 0.0), dim=2, role="master")
        t, x = edge_roots_batch(fld, [[0.0, 0.0]], [[1.0, 0.0]], 1e-14)
        assert np.isclose(t[0], 0.5, atol=1e-14)

    def test_circle_horizontal_edge(self):
        fld = sphere_field(radius=1.0, dim=2)
        t, x = edge_roots_batch(fld, [[0.5, 0.0]], [[1.5, 0.0]], 1e-14)
        assert np.isclose(t[0], 0.5, atol=1e-13)

    def test_circle_vertical_edge(self):
        # 0.8^2 + y^2 = 1 -> y = 0.6
        fld = sphere_field(radius=1.0, dim=2)
        t, x = edge_roots_batch(fld, [[0.8, 0.0]], [[0.8, 1.0]], 1e-14)
        assert np.isclose(t[0], 0.6, atol=1e-13)
        assert abs(fld(x[0])) <= 1e-14

    def test_multiple_crossings_rejected(self):
        fld = LevelSetField(
            evaluate=lambda x: np.sin(4 * np.pi * x[..., 0]),
            gradient=lambda x: np.stack(
                [4 * np.pi * np.cos(4 * np.pi * x[..., 0]), 0 * x[..., 0]], axis=-1
            ),
            dim=2,
        )
        with pytest.raises(InvalidDataError):
            edge_roots_batch(fld, [[0.0, 0.0]], [[1.0, 0.0]], 1e-12)


class TestFaceLine:
    def test_planar_field_keeps_chord(self):
        fld = plane_field((0.0, 0.3, 0.0), (0.0, 1.0, 0.0), role="master")
        a = np.array([0.0, 0.3, 0.0])
        b = np.array([1.0, 0.3, 1.0])
        nodes = reconstruct_face_line(fld, a, b, 3, 1e-14, normal=None)
        t = np.linspace(0, 1, 4)[:, None]
        assert np.allclose(nodes, (1 - t) * a + t * b, atol=1e-12)

    def test_circle_quadrant_midnode(self):
        fld = sphere_field(radius=1.0, dim=2)
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1.0])
        nodes = reconstruct_face_line(fld, a, b, 2, 1e-15)
        assert np.allclose(nodes[1], [np.sqrt(2) / 2, np.sqrt(2) / 2], atol=1e-12)
        assert abs(fld(nodes[1])) <= 1e-15

    def test_p1_is_endpoints_only(self):
        fld = sphere_field(radius=1.0, dim=2)
        nodes = reconstruct_face_line(
            fld, np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1, 1e-14
        )
        assert nodes.shape == (2, 2)

    def test_inplane_projection_stays_in_plane(self):
        fld = sphere_field(radius=1.0, dim=3)
        # roots on the plane x + y + z = 1.2 scaled onto the sphere
        n = np.array([1.0, 1.0, 1.0]) / np.sqrt(3)
        a = np.array([0.96, 0.28, -0.04])
        b = np.array([-0.04, 0.28, 0.96])
        a += (1.2 / np.sqrt(3) - a @ n) * n
        b += (1.2 / np.sqrt(3) - b @ n) * n
        a /= np.linalg.norm(a) / 1.0
        # keep a on both plane and sphere via small correction loop
        for _ in range(50):
            a += (1.2 / np.sqrt(3) - a @ n) * n
            a /= np.linalg.norm(a)
        for _ in range(50):
            b += (1.2 / np.sqrt(3) - b @ n) * n
            b /= np.linalg.norm(b)
        nodes = reconstruct_face_line(fld, a, b, 4, 1e-14, normal=n)
        assert np.allclose(nodes @ n, 1.2 / np.sqrt(3), atol=1e-12)
        assert np.allclose(np.linalg.norm(nodes, axis=1), 1.0, atol=1e-12)


def test_canonical_face_frame():
    assert canonical_face_frame([3, 7, 11]).tolist() == [0, 1, 2]
    assert canonical_face_frame([7, 11, 3]).tolist() == [2, 0, 1]


class TestPlanarIsosurface:
    def test_flat_cut_through_cube(self):
        fld = plane_field((0.0, 0.0, 0.3), (0.0, 0.0, 1.0), role="master")
        mesh = build_box_mesh((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (1, 1, 1), order=3)
        elems, reg = reconstruct_surface(mesh, fld, 3)
        assert len(elems) > 0
        for e in elems:
            assert np.allclose(e.node_coords_phys[:, 2], 0.3, atol=1e-12)
            n = element_normals(e)
            assert np.all(n[:, 2] > 0.999999)
        # areas partition the unit square
        total = sum(element_measure(e) for e in elems)
        assert np.isclose(total, 1.0, atol=1e-10)

    def test_mixed_shapes_present(self):
        fld = plane_field((0.0, 0.0, 0.3), (0.0, 0.0, 1.0), role="master")
        mesh = build_box_mesh((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (2, 2, 2), order=2)
        elems, _ = reconstruct_surface(mesh, fld, 2)
        shapes = {e.shape for e in elems}
        assert shapes == {"tri", "quad"}


class TestCircle:
    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_nodes_on_circle_and_closed(self, p):
        fld = sphere_field(radius=1.0, dim=2)
        mesh = _relocated_mesh((-1.5, -1.5), (1.5, 1.5), (12, 12), p, fld)
        elems, reg = reconstruct_surface(mesh, fld, p)
        assert len(elems) > 0
        for e in elems:
            assert e.shape == "line"
            r = np.linalg.norm(e.node_coords_phys, axis=1)
            assert np.max(np.abs(r - 1.0)) <= 1e-10 * mesh.h
        # closed curve: every endpoint key appears exactly twice
        from collections import Counter

        ends = Counter()
        for e in elems:
            ends[e.node_keys[0]] += 1
            ends[e.node_keys[-1]] += 1
        assert all(v == 2 for v in ends.values())

    def test_orientation_outward(self):
        fld = sphere_field(radius=1.0, dim=2)
        mesh = _relocated_mesh((-1.5, -1.5), (1.5, 1.5), (12, 12), 2, fld)
        elems, _ = reconstruct_surface(mesh, fld, 2)
        for e in elems:
            n = element_normals(e)
            x = e.node_coords_phys
            assert np.all(np.einsum("nd,nd->n", n, x) > 0.9)

    def test_length_convergence(self):
        fld = sphere_field(radius=1.0, dim=2)
        p = 2
        errs = []
        for div in (12, 24):
            mesh = _relocated_mesh((-1.5, -1.5), (1.5, 1.5), (div, div), p, fld)
            elems, _ = reconstruct_surface(mesh, fld, p)
            length = sum(element_measure(e) for e in elems)
            errs.append(abs(length - 2 * np.pi))
        rate = np.log2(errs[0] / errs[1])
        assert rate > p + 0.5


class TestSphere:
    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_c0_shared_nodes_and_onsurface(self, p):
        fld = sphere_field(radius=1.0, dim=3)
        mesh = _relocated_mesh((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5), (8, 8, 8), p, fld)
        elems, reg = reconstruct_surface(mesh, fld, p)
        assert len(elems) > 0
        # every node satisfies |phi| <= tol_surface
        for e in elems:
            r = np.linalg.norm(e.node_coords_phys, axis=1)
            assert np.max(np.abs(r - 1.0)) <= 1e-10 * mesh.h
        # shared provenance keys imply identical (bitwise) coordinates;
        # check the mesh is closed: each boundary edge key-pair seen twice
        from collections import Counter

        from mfforge.lagrange import edge_node_indices

        seen = Counter()
        for e in elems:
            for edge in edge_node_indices(e.shape, p):
                a, b = e.node_keys[edge[0]], e.node_keys[edge[-1]]
                seen[frozenset((a, b))] += 1
        assert all(v == 2 for v in seen.values())

    def test_orientation(self):
        fld = sphere_field(radius=1.0, dim=3)
        mesh = _relocated_mesh((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5), (8, 8, 8), 2, fld)
        elems, _ = reconstruct_surface(mesh, fld, 2)
        for e in elems:
            n = element_normals(e)
            assert np.all(np.einsum("nd,nd->n", n, e.node_coords_phys) > 0.5)

    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_area_convergence(self, p):
        fld = sphere_field(radius=1.0, dim=3)
        errs = []
        for div in (8, 16):
            mesh = _relocated_mesh(
                (-1.5, -1.5, -1.5), (1.5, 1.5, 1.5), (div, div, div), p, fld
            )
            elems, _ = reconstruct_surface(mesh, fld, p)
            area = sum(element_measure(e) for e in elems)
            errs.append(abs(area - 4 * np.pi))
        rate = np.log2(errs[0] / errs[1])
        assert rate > p + 0.5, (errs, rate)

    def test_quad_nodes_on_cylinder(self):
        # hand-built cut: one tet with a 2-2 sign split of x^2+y^2-1
        def val(x):
            return np.linalg.norm(x[..., :2], axis=-1) - 1.0

        def grd(x):
            r = np.linalg.norm(x[..., :2], axis=-1, keepdims=True)
            g = np.concatenate([x[..., :2] / r, np.zeros_like(x[..., 2:])], axis=-1)
            return g

        fld = LevelSetField(val, grd, dim=3)
        mesh = build_box_mesh((0.5, -0.25, 0.0), (1.5, 0.25, 0.5), (2, 1, 1), order=2)
        elems, _ = reconstruct_surface(mesh, fld, 2)
        quads = [e for e in elems if e.shape == "quad"]
        assert quads
        for e in quads:
            r = np.linalg.norm(e.node_coords_phys[:, :2], axis=1)
            assert np.max(np.abs(r - 1.0)) <= 1e-10 * mesh.h


def test_registry_determinism():
    fld = sphere_field(radius=1.0, dim=3)
    mesh = build_box_mesh((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5), (6, 6, 6), order=3)
    e1, r1 = reconstruct_surface(mesh, fld, 3)
    e2, r2 = reconstruct_surface(mesh, fld, 3)
    assert set(r1.coords) == set(r2.coords)
    for k in r1.coords:
        assert np.array_equal(r1.get(k), r2.get(k))
