import numpy as np
import pytest
import scipy.sparse as sp

from mfforge.background import build_box_mesh, default_relocation_params, relocate_nodes
from mfforge.fem import (
    DegenerateElementError,
    LinearSystem,
    SolverError,
    assemble_advection,
    assemble_load,
    assemble_mass,
    assemble_neumann,
    assemble_stiffness,
    condition_estimate,
    l2_error,
    solve_direct,
    surface_gradient,
)
from mfforge.lagrange import reference_element
from mfforge.levelset import plane_field, sphere_field
from mfforge.meshgen import SurfaceMesh, unify_nodes
from mfforge.reconstruct import reconstruct_surface, element_normals
from mfforge.restrict import restrict_elements


def _circle_mesh(div, p):
    fld = sphere_field(radius=1.0, dim=2)
    bg = build_box_mesh((-1.5, -1.5), (1.5, 1.5), (div, div), p)
    bg, _, ok = relocate_nodes(bg, fld, default_relocation_params(bg.h))
    assert ok
    elems, _ = reconstruct_surface(bg, fld, p)
    return unify_nodes(elems, bg.lo, bg.hi)


def _sphere_mesh(div, p, slaves=()):
    fld = sphere_field(radius=1.0, dim=3)
    bg = build_box_mesh((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5), (div, div, div), p)
    bg, _, ok = relocate_nodes(bg, fld, default_relocation_params(bg.h))
    assert ok
    elems, reg = reconstruct_surface(bg, fld, p)
    if slaves:
        elems = restrict_elements(elems, list(slaves), registry=reg)
    return unify_nodes(elems, bg.lo, bg.hi)


def _flat_tri_mesh(p):
    """Single flat reference triangle embedded in the z=0 plane."""
    ref = reference_element("tri", p)
    nodes = np.hstack([ref.nodes, np.zeros((ref.nodes.shape[0], 1))])
    ids = np.arange(nodes.shape[0], dtype=np.int64)
    return SurfaceMesh(3, p, nodes, [("tri", ids)], [0], [])


def _flat_line_mesh(p, length=1.0):
    ref = reference_element("line", p)
    nodes = np.column_stack([length * ref.nodes[:, 0], np.zeros(ref.nodes.shape[0])])
    ids = np.arange(nodes.shape[0], dtype=np.int64)
    return SurfaceMesh(2, p, nodes, [("line", ids)], [0], [])


class TestAssembly:
    def test_line_p1_stiffness(self):
        mesh = _flat_line_mesh(1, length=2.5)
        K = assemble_stiffness(mesh).toarray()
        assert np.allclose(K, np.array([[1, -1], [-1, 1]]) / 2.5)

    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_stiffness_row_sums_vanish(self, p):
        mesh = _sphere_mesh(6, p)
        K = assemble_stiffness(mesh)
        scale = abs(K).max()
        assert np.abs(K @ np.ones(mesh.num_nodes)).max() < 1e-10 * scale

    def test_stiffness_and_mass_symmetric(self):
        mesh = _sphere_mesh(6, 2)
        for A in (assemble_stiffness(mesh), assemble_mass(mesh)):
            d = abs(A - A.T).max()
            assert d < 1e-12 * abs(A).max()

    def test_mass_total_is_sphere_area(self):
        # geometric error of the discrete surface is O(h^{p+1})
        mesh = _sphere_mesh(8, 3)
        M = assemble_mass(mesh)
        one = np.ones(mesh.num_nodes)
        assert abs(one @ (M @ one) - 4 * np.pi) < 1e-4 * 4 * np.pi

    def test_mass_total_is_circle_length(self):
        mesh = _circle_mesh(24, 3)
        M = assemble_mass(mesh)
        one = np.ones(mesh.num_nodes)
        assert abs(one @ (M @ one) - 2 * np.pi) < 1e-6

    def test_load_of_one_matches_mass_row_sums(self):
        mesh = _circle_mesh(12, 2)
        M = assemble_mass(mesh)
        F = assemble_load(mesh, lambda x: np.ones(x.shape[0]))
        assert np.allclose(F, np.asarray(M.sum(axis=1)).ravel(), atol=1e-13)

    def test_advection_skew_part_on_closed_mesh(self):
        # c = (-y, x) is tangential and divergence-free on the circle, so
        # integral of c . grad u vanishes for any u: rows of 1^T C are ~0.
        mesh = _circle_mesh(16, 2)
        C = assemble_advection(mesh, lambda x: np.column_stack([-x[:, 1], x[:, 0]]))
        # the projected velocity is divergence-free only up to the
        # geometric error of the discrete circle
        total = np.ones(mesh.num_nodes) @ C
        assert np.abs(total).max() < 1e-6

    def test_degenerate_element_rejected(self):
        ref = reference_element("tri", 1)
        nodes = np.zeros((3, 3))  # collapsed triangle
        mesh = SurfaceMesh(3, 1, nodes, [("tri", np.array([0, 1, 2]))], [0], [])
        with pytest.raises(DegenerateElementError):
            assemble_stiffness(mesh)


class TestSurfaceGradient:
    def test_constant_field_zero(self):
        mesh = _sphere_mesh(6, 2)
        g = surface_gradient(mesh, 0, np.array([[0.3, 0.3]]), np.ones(mesh.num_nodes))
        assert np.abs(g).max() < 1e-12

    def test_flat_plane_reduces_to_plain_gradient(self):
        mesh = _flat_tri_mesh(2)
        u = mesh.nodes[:, 0] + 2 * mesh.nodes[:, 1]
        g = surface_gradient(mesh, 0, np.array([[0.2, 0.3]]), u)
        assert np.allclose(g[0], [1.0, 2.0, 0.0], atol=1e-12)

    def test_circle_gradient_of_x_at_top(self):
        # on the unit circle, grad_G x = P e1; at (0,1) that is (1,0).
        mesh = _circle_mesh(24, 3)
        u = mesh.nodes[:, 0].copy()
        # find the cell and reference point closest to (0,1)
        best = (None, None, np.inf)
        for ci, (shape, ids) in enumerate(mesh.cells):
            ref = reference_element(shape, mesh.order)
            X = mesh.nodes[ids]
            t = np.linspace(0, 1, 21)[:, None]
            xx = ref.eval(t) @ X
            j = np.argmin(np.linalg.norm(xx - [0.0, 1.0], axis=1))
            dd = np.linalg.norm(xx[j] - [0.0, 1.0])
            if dd < best[2]:
                best = (ci, t[j], dd)
        g = surface_gradient(mesh, best[0], best[1][None, :], u)
        assert np.allclose(g[0], [1.0, 0.0], atol=5e-4)

    def test_tangency(self):
        mesh = _sphere_mesh(6, 2)
        u = np.sin(mesh.nodes[:, 0]) * mesh.nodes[:, 2]
        rng = np.random.default_rng(3)
        for ci in rng.integers(0, mesh.num_cells, size=10):
            shape, ids = mesh.cells[int(ci)]
            r = rng.random((5, 2))
            if shape == "tri":
                r = np.column_stack([r[:, 0] * (1 - r[:, 1]), r[:, 1]])
            g = surface_gradient(mesh, int(ci), r, u)
            ref = reference_element(shape, mesh.order)
            dN = ref.grad(r)
            J = np.einsum("qlm,ld->qdm", dN, mesh.nodes[ids])
            n = np.cross(J[:, :, 0], J[:, :, 1])
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            dot = np.abs(np.einsum("qd,qd->q", n, g))
            assert dot.max() <= 1e-10 * max(np.linalg.norm(g, axis=1).max(), 1e-30)


class TestNeumann:
    def test_zero_flux(self):
        mesh = _sphere_mesh(6, 2, slaves=[plane_field((0, 0, 0.1), (0.3, 0, 1), 3, "slave", 1)])
        F = assemble_neumann(mesh, lambda x: np.zeros(x.shape[0]))
        assert np.all(F == 0)

    def test_closed_mesh_has_no_boundary(self):
        mesh = _sphere_mesh(6, 2)
        F = assemble_neumann(mesh, lambda x: np.ones(x.shape[0]))
        assert np.all(F == 0)

    def test_unit_flux_sums_to_equator_length(self):
        # hemisphere z >= ~0 (offset so the plane is no grid plane)
        mesh = _sphere_mesh(9, 3, slaves=[plane_field((0, 0, 0.01), (0, 0, -1), 3, "slave", 1)])
        F = assemble_neumann(mesh, lambda x: np.ones(x.shape[0]))
        circ = 2 * np.pi * np.sqrt(1 - 0.01**2)
        assert abs(F.sum() - circ) < 2e-5 * circ

    def test_line_mesh_endpoint_evaluation(self):
        mesh = _flat_line_mesh(2, length=3.0)
        mesh.boundary_edges.append((0, 1, "box"))
        F = assemble_neumann(mesh, lambda x: 2.0 * np.ones(x.shape[0]))
        assert F[2] == 2.0 and F[0] == 0.0


class TestConstraintsAndSolve:
    def test_small_spd_system(self):
        sys = LinearSystem(sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 2.0]])), [1.0, 1.0])
        x, mult = solve_direct(sys)
        assert np.allclose(x, [1 / 3, 1 / 3]) and mult is None

    def test_all_dirichlet_identity(self):
        mesh = _circle_mesh(8, 1)
        K = assemble_stiffness(mesh)
        sys = LinearSystem(K, np.zeros(mesh.num_nodes))
        vals = np.sin(np.arange(mesh.num_nodes, dtype=float))
        sys.apply_dirichlet(np.arange(mesh.num_nodes), vals)
        x, _ = solve_direct(sys)
        assert np.array_equal(x, vals)

    def test_bordered_matrix_symmetric(self):
        mesh = _circle_mesh(8, 2)
        sys = LinearSystem(assemble_stiffness(mesh), np.zeros(mesh.num_nodes))
        sys.apply_zero_mean(assemble_mass(mesh))
        A = sys.matrix
        assert abs(A - A.T).max() < 1e-12 * abs(A).max()

    def test_zero_mean_excludes_dirichlet(self):
        mesh = _circle_mesh(8, 1)
        M = assemble_mass(mesh)
        sys = LinearSystem(assemble_stiffness(mesh), np.zeros(mesh.num_nodes))
        sys.apply_zero_mean(M)
        with pytest.raises(ValueError):
            sys.apply_dirichlet([0], [1.0])
        sys2 = LinearSystem(assemble_stiffness(mesh), np.zeros(mesh.num_nodes))
        sys2.apply_dirichlet([0], [1.0])
        with pytest.raises(ValueError):
            sys2.apply_zero_mean(M)

    def test_dirichlet_out_of_range(self):
        sys = LinearSystem(sp.eye(3, format="csr"), np.zeros(3))
        with pytest.raises(ValueError):
            sys.apply_dirichlet([5], [0.0])

    def test_singular_system_raises(self):
        A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with pytest.raises(SolverError):
            solve_direct(LinearSystem(A, np.array([1.0, 0.0])))


def _solve_circle_poisson(div, p):
    mesh = _circle_mesh(div, p)

    def exact(x):
        return 12.0 * np.sin(3.0 * np.arctan2(x[:, 1], x[:, 0]))

    def source(x):
        r2 = (x**2).sum(axis=1)
        return 108.0 / r2 * np.sin(3.0 * np.arctan2(x[:, 1], x[:, 0]))

    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    sys = LinearSystem(K, assemble_load(mesh, source))
    sys.apply_zero_mean(M)
    u, mult = solve_direct(sys)
    return mesh, M, u, exact


class TestCirclePoisson:
    def test_zero_mean_residual(self):
        mesh, M, u, exact = _solve_circle_poisson(16, 2)
        mean = np.ones(mesh.num_nodes) @ (M @ u)
        norm = np.sqrt(u @ (M @ u))
        assert abs(mean) <= 1e-10 * norm

    @pytest.mark.parametrize("p,lo,hi", [(1, 1.6, 2.6), (2, 2.6, 3.6), (3, 3.5, 4.6)])
    def test_convergence_rate(self, p, lo, hi):
        errs = []
        for div in (12, 24, 48):
            mesh, M, u, exact = _solve_circle_poisson(div, p)
            errs.append(l2_error(mesh, u, exact))
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert lo < rates[-1] < hi

    def test_interpolant_error_near_floor(self):
        mesh = _circle_mesh(24, 6)

        def exact(x):
            return 12.0 * np.sin(3.0 * np.arctan2(x[:, 1], x[:, 0]))

        u = exact(mesh.nodes)
        assert l2_error(mesh, u, exact) < 1e-9 * 12.0


class TestConditionEstimate:
    def test_identity(self):
        c, ok = condition_estimate(sp.eye(50, format="csr"))
        assert ok and abs(c - 1.0) < 1e-3

    def test_diagonal(self):
        c, ok = condition_estimate(sp.diags([1.0, 100.0, 7.0]).tocsr())
        assert ok and abs(c - 100.0) < 0.1

    def test_circle_condition_scaling(self):
        # bordered stiffness condition number should grow ~ h^{-2}
        conds = []
        for div in (12, 24, 48):
            mesh = _circle_mesh(div, 2)
            sys = LinearSystem(assemble_stiffness(mesh), np.zeros(mesh.num_nodes))
            sys.apply_zero_mean(assemble_mass(mesh))
            c, _ = condition_estimate(sys.matrix)
            conds.append(c)
        slope = np.polyfit(np.log([12, 24, 48]), np.log(conds), 1)[0]
        assert 1.7 < slope < 2.3
