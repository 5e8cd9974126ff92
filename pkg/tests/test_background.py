import numpy as np
import pytest

from mfforge.background import (
    BackgroundMesh,
    MeshError,
    RelocationParams,
    build_box_mesh,
    default_relocation_params,
    estimate_signed_distance,
    facet_neighbors,
    facet_permutation,
    relocate_nodes,
)
from mfforge.levelset import LevelSetField, sphere_field


def test_unit_square_two_triangles():
    mesh = build_box_mesh((0.0, 0.0), (1.0, 1.0), (1, 1), order=1)
    assert mesh.vertices.shape == (4, 2)
    assert mesh.cells.shape == (2, 3)
    assert np.allclose(mesh.cell_volumes(), 0.5)
    assert np.isclose(mesh.cell_volumes().sum(), 1.0)


def test_unit_cube_six_tets():
    mesh = build_box_mesh((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (1, 1, 1), order=1)
    assert mesh.vertices.shape == (8, 3)
    assert mesh.cells.shape == (6, 4)
    vols = mesh.cell_volumes()
    assert np.all(vols > 0)
    assert np.isclose(vols.sum(), 1.0)


def test_cube_order2_lattice():
    mesh = build_box_mesh((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (1, 1, 1), order=2)
    assert mesh.lattice_node_count() == 27
    nodes = mesh.all_lattice_nodes()
    assert nodes.shape == (27, 3)
    # the order-2 lattice of the Kuhn split covers the half-integer grid
    doubled = np.rint(2 * nodes).astype(int)
    assert np.allclose(2 * nodes, doubled, atol=1e-13)
    keys = {tuple(row) for row in doubled}
    assert len(keys) == 27


def test_characteristic_h():
    m = build_box_mesh((0.0, 0.0), (1.0, 2.0), (4, 8), order=1)
    assert np.isclose(m.h, 0.25)
    m = build_box_mesh((0.0, 0.0, 0.0), (1.0, 1.0, 4.0), (4, 4, 4), order=1)
    assert np.isclose(m.h, 1.0)


def test_volume_is_partitioned():
    mesh = build_box_mesh((-1.0, 0.0, 2.0), (1.0, 3.0, 4.0), (3, 4, 2), order=1)
    assert np.isclose(mesh.cell_volumes().sum(), 2.0 * 3.0 * 2.0, atol=1e-12)
    mesh2 = build_box_mesh((-1.5, -1.5), (1.5, 1.5), (7, 7), order=1)
    assert np.isclose(mesh2.cell_volumes().sum(), 9.0, atol=1e-12)


@pytest.mark.parametrize(
    "lo,hi,div",
    [((0.0, 0.0), (1.0, 1.0), (3, 3)), ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (2, 2, 2))],
)
def test_facet_neighbors_involution(lo, hi, div):
    mesh = build_box_mesh(lo, hi, div, order=1)
    ncell, nfacet = facet_neighbors(mesh)
    nloc = mesh.dim + 1
    for c in range(mesh.num_cells):
        for f in range(nloc):
            n = ncell[c, f]
            if n < 0:
                continue
            g = nfacet[c, f]
            assert ncell[n, g] == c and nfacet[n, g] == f
            mine = sorted(np.delete(mesh.cells[c], f).tolist())
            theirs = sorted(np.delete(mesh.cells[n], g).tolist())
            assert mine == theirs


def test_interior_facets_shared_in_cube():
    # 6 tets in one hex: 6 interior facets, 12 boundary facets
    mesh = build_box_mesh((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (1, 1, 1), order=1)
    ncell, _ = facet_neighbors(mesh)
    n_interior = int((ncell >= 0).sum()) // 2
    n_boundary = int((ncell < 0).sum())
    assert n_interior == 6
    assert n_boundary == 12
    assert mesh.boundary_vertex_mask().all()


def test_hex_facets_match_across_cells():
    # shared quad faces of neighboring hexes get the same diagonal
    mesh = build_box_mesh((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), (2, 2, 2), order=1)
    ncell, _ = facet_neighbors(mesh)
    assert (ncell >= 0).sum() % 2 == 0
    # every interior tet facet is matched: count = 4*nc - boundary, all paired
    nb = len(mesh.boundary_facet_set())
    assert int((ncell < 0).sum()) == nb


def test_facet_permutation_aligns_corners():
    mesh = build_box_mesh((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (2, 1, 1), order=1)
    nbrs = facet_neighbors(mesh)
    found = False
    for c in range(mesh.num_cells):
        for f in range(4):
            res = facet_permutation(mesh, c, f, nbrs)
            if res is None:
                continue
            n_c, n_f, perm = res
            mine = np.delete(mesh.cells[c], f)
            theirs = np.delete(mesh.cells[n_c], n_f)
            assert np.array_equal(theirs[perm], mine)
            found = True
    assert found


def test_signed_distance_circle():
    fld = sphere_field(radius=1.0, dim=2)
    D, d, ok = estimate_signed_distance(fld, np.array([0.9, 0.0]), 1e-14)
    assert ok
    assert np.isclose(D, -0.1, atol=1e-12)
    assert np.allclose(d, [1.0, 0.0], atol=1e-12)
    D, d, ok = estimate_signed_distance(fld, np.array([0.0, 1.5]), 1e-14)
    assert np.isclose(D, 0.5, atol=1e-12)
    assert np.allclose(d, [0.0, 1.0], atol=1e-12)


def test_signed_distance_on_surface_uses_gradient_direction():
    fld = sphere_field(radius=1.0, dim=2)
    D, d, ok = estimate_signed_distance(fld, np.array([0.0, 1.0]), 1e-14)
    assert D == 0.0
    assert np.allclose(d, [0.0, 1.0])


def test_signed_distance_scale_invariant_root():
    """A rescaled field has the same zero set, so D must agree."""
    base = sphere_field(radius=1.0, dim=2)
    scaled = LevelSetField(
        evaluate=lambda x: 100.0 * base(x),
        gradient=lambda x: 100.0 * base.grad(x),
        dim=2,
    )
    x = np.array([[0.7, 0.4], [-1.2, 0.1], [0.0, 0.93]])
    D1, d1, _ = estimate_signed_distance(base, x, 1e-14)
    D2, d2, _ = estimate_signed_distance(scaled, x, 1e-12)
    assert np.allclose(D1, D2, atol=1e-10)
    assert np.allclose(d1, d2, atol=1e-8)


def test_relocation_params_validation():
    with pytest.raises(ValueError):
        RelocationParams(d_crit=1.0, d_min=0.25, d_step=0.3)
    with pytest.raises(ValueError):
        RelocationParams(d_crit=0.2, d_min=0.25, d_step=0.1)
    p = default_relocation_params(0.1)
    assert np.isclose(p.d_crit, 0.3) and np.isclose(p.d_min, 0.025)
    assert np.isclose(p.newton_tol, 1e-13)


def test_relocation_clears_band_on_circle():
    r = 1.0
    h = r / 16
    mesh = build_box_mesh((-1.5, -1.5), (1.5, 1.5), (48, 48), order=1)
    fld = sphere_field(radius=r, dim=2)
    params = default_relocation_params(mesh.h)
    moved, iters, converged = relocate_nodes(mesh, fld, params)
    assert converged
    assert iters >= 1
    D, _, ok = estimate_signed_distance(fld, moved.vertices, 1e-13)
    assert np.abs(D[ok]).min() > params.d_min
    # mesh stays valid and input is untouched
    assert (moved.cell_volumes() > 0).all()
    assert np.abs(np.linalg.norm(mesh.vertices, axis=1) - r).min() < params.d_min


def test_relocation_noop_when_surface_far():
    mesh = build_box_mesh((2.0, 2.0), (3.0, 3.0), (4, 4), order=1)
    fld = sphere_field(radius=1.0, dim=2)
    moved, iters, converged = relocate_nodes(
        mesh, fld, default_relocation_params(mesh.h)
    )
    assert converged and iters == 0
    assert np.array_equal(moved.vertices, mesh.vertices)


def test_relocation_respects_frozen_components():
    """Vertices frozen normal to a box face slide within it."""
    mesh = build_box_mesh((0.0, 0.0), (2.0, 2.0), (8, 8), order=1)
    fld = sphere_field(radius=1.0, dim=2)
    frozen = mesh.boundary_vertex_mask()
    moved, _, converged = relocate_nodes(
        mesh, fld, default_relocation_params(mesh.h), frozen=frozen
    )
    assert converged
    # boundary vertices keep their constrained coordinate exactly
    keep = frozen & True
    assert np.array_equal(moved.vertices[keep], mesh.vertices[keep])
    # the vertex at (1, 0) started on the circle; it must have slid along y=0
    vid = int(np.flatnonzero(np.all(mesh.vertices == [1.0, 0.0], axis=1))[0])
    assert moved.vertices[vid, 1] == 0.0
    assert abs(moved.vertices[vid, 0] - 1.0) > 0.0


def test_relocation_3d_sphere():
    mesh = build_box_mesh((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5), (12, 12, 12), order=1)
    fld = sphere_field(radius=1.0, dim=3)
    params = default_relocation_params(mesh.h)
    moved, _, converged = relocate_nodes(mesh, fld, params)
    assert converged
    D, _, ok = estimate_signed_distance(fld, moved.vertices, 1e-13)
    assert np.abs(D[ok]).min() > params.d_min
    assert (moved.cell_volumes() > 0).all()


def test_invalid_box_rejected():
    with pytest.raises(ValueError):
        build_box_mesh((0.0, 0.0), (0.0, 1.0), (2, 2), order=1)
    with pytest.raises(ValueError):
        build_box_mesh((0.0, 0.0), (1.0, 1.0), (0, 2), order=1)
    with pytest.raises(ValueError):
        build_box_mesh((0.0, 0.0), (1.0, 1.0), (2, 2), order=9)
