"""Finite elements on curved surface meshes.

Everything is isoparametric: a cell of order p maps reference coordinates
r through x(r) = sum_i N_i(r) x_i.  With the Jacobian J = dx/dr and the
first fundamental form G = J^T J, tangential gradients of a nodal field
are J G^{-1} grad_r u and surface measures carry the weight sqrt(det G).
Assembly loops over shape groups and is vectorized over the cells of each
group; global matrices are scattered through COO triplets.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lagrange import edge_node_indices, reference_element
from .quadrature import rule


class DegenerateElementError(Exception):
    """An element's first fundamental form is numerically singular."""


class SolverError(Exception):
    """Direct factorization or solve failed."""


# ---------------------------------------------------------------------------
# per-group geometry


def _group_geometry(mesh, shape, ids, degree):
    """Quadrature-point geometry for all cells of one shape group.

    Returns (N, xq, B, wdet) with
      N    (nq, nloc)        shape functions,
      xq   (nc, nq, d)       physical quadrature points,
      B    (nc, nq, d, nloc) tangential basis gradients J G^{-1} dN,
      wdet (nc, nq)          quadrature weight times sqrt(det G).
    """
    ref = reference_element(shape, mesh.order)
    pts, w = rule(shape, degree)
    N = ref.eval(pts)
    dN = ref.grad(pts)  # (nq, nloc, m)
    X = mesh.nodes[ids]  # (nc, nloc, d)
    J = np.einsum("qlm,cld->cqdm", dN, X)
    G = np.einsum("cqdm,cqdn->cqmn", J, J)
    m = G.shape[-1]
    if m == 1:
        detG = G[..., 0, 0]
    else:
        detG = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
    scale = (np.einsum("cqdm,cqdm->cq", J, J) / m) ** m
    bad = detG <= 1e-14 * scale
    if bad.any():
        c = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise DegenerateElementError(f"degenerate {shape} cell (group index {c})")
    if m == 1:
        Ginv = 1.0 / detG[..., None, None]
    else:
        Ginv = np.empty_like(G)
        Ginv[..., 0, 0] = G[..., 1, 1]
        Ginv[..., 1, 1] = G[..., 0, 0]
        Ginv[..., 0, 1] = -G[..., 0, 1]
        Ginv[..., 1, 0] = -G[..., 1, 0]
        Ginv /= detG[..., None, None]
    B = np.einsum("cqdm,cqmn,qln->cqdl", J, Ginv, dN)
    wdet = w[None, :] * np.sqrt(detG)
    xq = np.einsum("ql,cld->cqd", N, X)
    return N, xq, B, wdet


def _shape_groups(mesh):
    """Yield (shape, ids array (nc, nloc), cell indices) per shape present."""
    for shape, (cidx, ids) in mesh.cell_groups().items():
        yield shape, ids, cidx


def _scatter(mesh, triplets):
    n = mesh.num_nodes
    rows = np.concatenate([t[0] for t in triplets])
    cols = np.concatenate([t[1] for t in triplets])
    vals = np.concatenate([t[2] for t in triplets])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _pair_indices(ids):
    nloc = ids.shape[1]
    rows = np.repeat(ids, nloc, axis=1).ravel()
    cols = np.tile(ids, (1, nloc)).ravel()
    return rows, cols


# ---------------------------------------------------------------------------
# assembly


def assemble_stiffness(mesh, degree=None):
    """K_ij = integral of grad_G M_i . grad_G M_j over the mesh."""
    degree = 2 * mesh.order + 2 if degree is None else degree
    triplets = []
    for shape, ids, _ in _shape_groups(mesh):
        _, _, B, wdet = _group_geometry(mesh, shape, ids, degree)
        ke = np.einsum("cqdl,cqdk,cq->clk", B, B, wdet)
        rows, cols = _pair_indices(ids)
        triplets.append((rows, cols, ke.reshape(ids.shape[0], -1).ravel()))
    return _scatter(mesh, triplets)


def assemble_mass(mesh, degree=None):
    """M_ij = integral of M_i M_j over the mesh."""
    degree = 2 * mesh.order + 2 if degree is None else degree
    triplets = []
    for shape, ids, _ in _shape_groups(mesh):
        N, _, _, wdet = _group_geometry(mesh, shape, ids, degree)
        me = np.einsum("ql,qk,cq->clk", N, N, wdet)
        rows, cols = _pair_indices(ids)
        triplets.append((rows, cols, me.reshape(ids.shape[0], -1).ravel()))
    return _scatter(mesh, triplets)


def assemble_advection(mesh, velocity, degree=None):
    """C_ij = integral of M_i (c_G . grad_G M_j) over the mesh.

    ``velocity`` maps (N, d) points to (N, d) ambient vectors; it is
    projected onto the discrete tangent plane at every quadrature point
    (c_G = J G^{-1} J^T c), so mildly non-tangential input stays usable.
    """
    degree = 2 * mesh.order + 2 if degree is None else degree
    triplets = []
    for shape, ids, _ in _shape_groups(mesh):
        N, xq, B, wdet = _group_geometry(mesh, shape, ids, degree)
        nc, nq, d = xq.shape
        c = np.asarray(velocity(xq.reshape(-1, d)), dtype=float).reshape(nc, nq, d)
        # B's columns span the tangent plane; project c through the same
        # operator that produced B so c_G . grad_G u is exactly tangential.
        cg = _tangent_project(mesh, shape, ids, degree, c)
        ce = np.einsum("ql,cqd,cqdk,cq->clk", N, cg, B, wdet)
        rows, cols = _pair_indices(ids)
        triplets.append((rows, cols, ce.reshape(ids.shape[0], -1).ravel()))
    return _scatter(mesh, triplets)


def _tangent_project(mesh, shape, ids, degree, c):
    """Project ambient vectors at quadrature points onto the tangent plane."""
    ref = reference_element(shape, mesh.order)
    pts, _ = rule(shape, degree)
    dN = ref.grad(pts)
    X = mesh.nodes[ids]
    J = np.einsum("qlm,cld->cqdm", dN, X)
    G = np.einsum("cqdm,cqdn->cqmn", J, J)
    rhs = np.einsum("cqdm,cqd->cqm", J, c)
    coef = np.linalg.solve(G, rhs[..., None])[..., 0]
    return np.einsum("cqdm,cqm->cqd", J, coef)


def assemble_load(mesh, source, degree=None):
    """F_i = integral of M_i f over the mesh; ``source`` maps (N, d) -> (N,)."""
    degree = 2 * mesh.order + 2 if degree is None else degree
    F = np.zeros(mesh.num_nodes)
    for shape, ids, _ in _shape_groups(mesh):
        N, xq, _, wdet = _group_geometry(mesh, shape, ids, degree)
        nc, nq, d = xq.shape
        f = np.asarray(source(xq.reshape(-1, d)), dtype=float).reshape(nc, nq)
        fe = np.einsum("ql,cq,cq->cl", N, f, wdet)
        np.add.at(F, ids.ravel(), fe.ravel())
    return F


def assemble_neumann(mesh, flux, markers=None, degree=None):
    """Boundary-flux vector: integrals of M_i g over tagged boundary edges.

    On surface meshes the boundary edges are curves (line integrals); on
    line meshes they are endpoints (point evaluation).  ``markers``
    restricts to a subset of boundary markers (default: all).
    """
    degree = 2 * mesh.order + 2 if degree is None else degree
    F = np.zeros(mesh.num_nodes)
    p = mesh.order
    for ci, le, marker in mesh.boundary_edges:
        if markers is not None and marker not in markers:
            continue
        shape, ids = mesh.cells[ci]
        if shape == "line":
            node = ids[0] if le == 0 else ids[-1]
            F[node] += float(np.asarray(flux(mesh.nodes[node][None, :]))[0])
            continue
        edge_ids = ids[edge_node_indices(shape, p)[le]]
        X = mesh.nodes[edge_ids]  # (p+1, d)
        lref = reference_element("line", p)
        pts, w = rule("line", degree)
        N = lref.eval(pts)
        dN = lref.grad(pts)[:, :, 0]
        tang = dN @ X  # (nq, d)
        dl = np.linalg.norm(tang, axis=1)
        x = N @ X
        g = np.asarray(flux(x), dtype=float)
        F[edge_ids] += N.T @ (w * dl * g)
    return F


def surface_gradient(mesh, cell, r, u):
    """Tangential gradient of the nodal field ``u`` on one cell.

    ``r`` is (k, m) reference points; returns (k, d) ambient vectors
    J G^{-1} grad_r u_h, which are orthogonal to the cell normal.
    """
    shape, ids = mesh.cells[cell]
    ref = reference_element(shape, mesh.order)
    r = np.atleast_2d(np.asarray(r, dtype=float))
    dN = ref.grad(r)  # (k, nloc, m)
    X = mesh.nodes[ids]
    J = np.einsum("qlm,ld->qdm", dN, X)
    G = np.einsum("qdm,qdn->qmn", J, J)
    m = G.shape[-1]
    detG = np.linalg.det(G)
    scale = (np.einsum("qdm,qdm->q", J, J) / m) ** m
    if (detG <= 1e-14 * scale).any():
        raise DegenerateElementError(f"degenerate cell {cell}")
    du = np.einsum("qlm,l->qm", dN, u[ids])
    coef = np.linalg.solve(G, du[..., None])[..., 0]
    return np.einsum("qdm,qm->qd", J, coef)


# ---------------------------------------------------------------------------
# constraints and solve


class LinearSystem:
    """Sparse system A u = b with optional constraints.

    ``apply_dirichlet`` eliminates rows/columns symmetrically;
    ``apply_zero_mean`` borders the matrix with the mass-weighted ones
    vector w (w_i = sum_j M_ij, so w . u = integral of u).  ``n`` is the
    number of physical unknowns; a bordered system has one extra row.
    """

    def __init__(self, matrix, rhs):
        self.matrix = sp.csr_matrix(matrix)
        self.rhs = np.asarray(rhs, dtype=float).copy()
        self.n = self.rhs.shape[0]
        self.bordered = False
        self._dirichlet = None

    def apply_dirichlet(self, nodes, values):
        if self.bordered:
            raise ValueError("zero-mean constraint excludes Dirichlet data")
        nodes = np.asarray(nodes, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if nodes.size and (nodes.min() < 0 or nodes.max() >= self.n):
            raise ValueError("Dirichlet node id out of range")
        g = np.zeros(self.n)
        g[nodes] = values
        # symmetric elimination: move known columns to the right-hand side
        self.rhs -= self.matrix @ g
        keep = np.ones(self.n, dtype=bool)
        keep[nodes] = False
        A = self.matrix.tolil()
        A[nodes, :] = 0.0
        A[:, nodes] = 0.0
        A[nodes, nodes] = 1.0
        self.matrix = A.tocsr()
        self.rhs[nodes] = values
        self._dirichlet = (nodes, values)

    def apply_zero_mean(self, mass):
        if self._dirichlet is not None:
            raise ValueError("zero-mean constraint excludes Dirichlet data")
        if self.bordered:
            raise ValueError("zero-mean constraint already applied")
        w = np.asarray(mass.sum(axis=1)).ravel()
        A = sp.bmat(
            [[self.matrix, w[:, None]], [w[None, :], None]], format="csr"
        )
        self.matrix = A
        self.rhs = np.concatenate([self.rhs, [0.0]])
        self.bordered = True


def solve_direct(system):
    """Solve by sparse LU; returns (u, multiplier or None)."""
    A = sp.csc_matrix(system.matrix)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from None
    x = lu.solve(system.rhs)
    if not np.isfinite(x).all():
        raise SolverError("singular system")
    # two rounds of iterative refinement push the attainable accuracy well
    # below the plain-LU floor on ill-conditioned fine meshes
    for _ in range(2):
        r = system.rhs - A @ x
        x = x + lu.solve(r)
    resid = np.linalg.norm(A @ x - system.rhs)
    bound = 1e-10 * (spla.norm(A) * np.linalg.norm(x) + np.linalg.norm(system.rhs))
    if resid > max(bound, 1e-300):
        raise SolverError(f"solve residual {resid:.3e} exceeds tolerance")
    if system.bordered:
        return x[:-1], float(x[-1])
    return x, None


# ---------------------------------------------------------------------------
# diagnostics


def l2_error(mesh, u, exact, degree=None):
    """L2 norm of u_h - exact over the mesh; ``exact`` maps (N, d) -> (N,)."""
    degree = 2 * mesh.order + 2 if degree is None else degree
    total = 0.0
    for shape, ids, _ in _shape_groups(mesh):
        N, xq, _, wdet = _group_geometry(mesh, shape, ids, degree)
        nc, nq, d = xq.shape
        uh = np.einsum("ql,cl->cq", N, u[ids])
        ue = np.asarray(exact(xq.reshape(-1, d)), dtype=float).reshape(nc, nq)
        total += float(((uh - ue) ** 2 * wdet).sum())
    return np.sqrt(total)


def condition_estimate(matrix, tol=1e-4, max_iters=10000, seed=0):
    """2-norm condition number of a symmetric matrix.

    Power iteration for the largest eigenvalue magnitude, inverse
    iteration (one LU, reused) for the smallest.  Returns (cond, exact)
    where ``exact`` is False if an iteration hit the cap.
    """
    A = sp.csc_matrix(matrix)
    n = A.shape[0]
    if n == 1:
        return 1.0, True
    rng = np.random.default_rng(seed)
    ok = True

    def dominant(mv):
        nonlocal ok
        x = rng.standard_normal(n)
        x /= np.linalg.norm(x)
        lam = 0.0
        for _ in range(max_iters):
            y = mv(x)
            ny = np.linalg.norm(y)
            if ny == 0.0:
                return 0.0
            y /= ny
            lam_new = abs(float(y @ mv(y)))
            if abs(lam_new - lam) <= tol * abs(lam_new):
                return lam_new
            lam, x = lam_new, y
        ok = False
        return lam

    lam_max = dominant(lambda v: A @ v)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from None
    inv_lam = dominant(lu.solve)
    if inv_lam == 0.0:
        raise SolverError("singular matrix in condition estimate")
    return float(lam_max * inv_lam), ok
