"""Background box meshes, connectivity, and node relocation.

Box meshes subdivide an axis-aligned box into triangles (2D) or tetrahedra
(3D, six per hex with matching facet diagonals).  Cells are straight-edged;
higher-order lattice nodes are implied by the corner positions and are
materialized only on demand, so large meshes stay cheap.

Node relocation moves corner vertices out of a band around the zero level
set of a field so the reconstructed surface elements stay shape regular.
"""

import itertools
from dataclasses import dataclass, replace

import numpy as np


class MeshError(RuntimeError):
    pass


class RelocationError(RuntimeError):
    pass


class SingularGradientError(RuntimeError):
    pass


@dataclass
class RelocationParams:
    d_crit: float
    d_min: float
    d_step: float
    max_iters: int = 200
    newton_tol: float = None
    newton_max_iters: int = 50

    def __post_init__(self):
        if not (0.0 < self.d_step < self.d_min < self.d_crit):
            raise ValueError("parameters must satisfy 0 < d_step < d_min < d_crit")


def default_relocation_params(h):
    """d_crit = 3h, d_min = 0.35h, d_step = 0.1h, newton_tol = 1e-12 h.

    The band width d_min trades the smallest cut-element size against mesh
    distortion; 0.35h keeps the spacing ratio of reconstructed line meshes
    below 4 across refinement levels.
    """
    return RelocationParams(
        d_crit=3.0 * h, d_min=0.35 * h, d_step=0.1 * h, newton_tol=1e-12 * h
    )


@dataclass
class BackgroundMesh:
    """Simplicial background mesh with straight edges.

    vertices: (nv, d) corner coordinates (the only movable nodes).
    cells: (nc, d+1) corner indices, positively oriented.
    grid: integer grid coordinates of each vertex in the generating lattice,
          used for exact boundary-plane tests after relocation.
    """

    dim: int
    order: int
    lo: np.ndarray
    hi: np.ndarray
    divisions: tuple
    vertices: np.ndarray
    cells: np.ndarray
    grid: np.ndarray
    h: float

    def copy(self):
        return replace(self, vertices=self.vertices.copy())

    @property
    def num_cells(self):
        return self.cells.shape[0]

    def cell_volumes(self):
        """Signed measures: areas (2D) or volumes (3D)."""
        v = self.vertices[self.cells]
        e = v[:, 1:, :] - v[:, :1, :]
        if self.dim == 2:
            return 0.5 * (e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0])
        det = (
            e[:, 0, 0] * (e[:, 1, 1] * e[:, 2, 2] - e[:, 1, 2] * e[:, 2, 1])
            - e[:, 0, 1] * (e[:, 1, 0] * e[:, 2, 2] - e[:, 1, 2] * e[:, 2, 0])
            + e[:, 0, 2] * (e[:, 1, 0] * e[:, 2, 1] - e[:, 1, 1] * e[:, 2, 0])
        )
        return det / 6.0

    def lattice_node_count(self):
        """Unique nodes of the order-p lattice over all cells."""
        p = self.order
        return int(np.prod([p * n + 1 for n in self.divisions]))

    def cell_lattice_barycentric(self):
        """Barycentric weights (n_lattice, d+1) of the order-p cell lattice."""
        p = self.order
        if self.dim == 2:
            idx = [(i, j) for j in range(p + 1) for i in range(p + 1 - j)]
            return np.array([[(p - i - j) / p, i / p, j / p] for i, j in idx])
        idx = [
            (i, j, k)
            for k in range(p + 1)
            for j in range(p + 1 - k)
            for i in range(p + 1 - j - k)
        ]
        return np.array(
            [[(p - i - j - k) / p, i / p, j / p, k / p] for i, j, k in idx]
        )

    def cell_lattice_nodes(self, c):
        """Physical order-p lattice nodes of cell ``c`` (straight edges)."""
        w = self.cell_lattice_barycentric()
        return w @ self.vertices[self.cells[c]]

    def all_lattice_nodes(self):
        """Unique lattice nodes over the mesh (intended for small meshes)."""
        w = self.cell_lattice_barycentric()
        gridw = w @ self.grid[self.cells.reshape(-1)].reshape(
            self.num_cells, self.dim + 1, self.dim
        ).astype(float)
        keys = np.rint(gridw * self.order).astype(np.int64)
        coords = np.einsum("ln,cnd->cld", w, self.vertices[self.cells])
        flat_keys = keys.reshape(-1, self.dim)
        flat_coords = coords.reshape(-1, self.dim)
        _, first = np.unique(
            np.ascontiguousarray(flat_keys).view([("", flat_keys.dtype)] * self.dim),
            return_index=True,
        )
        return flat_coords[np.sort(first)]

    def boundary_vertex_mask(self):
        """(nv, d) True where a vertex lies on the min/max grid plane of an axis."""
        mask = np.zeros((self.vertices.shape[0], self.dim), dtype=bool)
        for ax, n in enumerate(self.divisions):
            mask[:, ax] = (self.grid[:, ax] == 0) | (self.grid[:, ax] == n)
        return mask

    def boundary_facet_set(self):
        """Sorted-vertex keys of all boundary facets (cheap grid-plane test)."""
        mask = self.boundary_vertex_mask()
        out = set()
        nloc = self.dim + 1
        for f in range(nloc):
            facet = np.delete(np.arange(nloc), f)
            verts = self.cells[:, facet]
            lo_side = np.zeros((self.num_cells, self.dim), dtype=bool)
            hi_side = np.zeros((self.num_cells, self.dim), dtype=bool)
            for ax, n in enumerate(self.divisions):
                g = self.grid[verts, ax]
                lo_side[:, ax] = (g == 0).all(axis=1)
                hi_side[:, ax] = (g == n).all(axis=1)
            onb = (lo_side | hi_side).any(axis=1)
            for row in verts[onb]:
                out.add(tuple(sorted(row.tolist())))
        return out


_KUHN_PERMS = list(itertools.permutations(range(3)))


def _perm_sign(perm):
    sign = 1
    perm = list(perm)
    for i in range(len(perm)):
        for j in range(i + 1, len(perm)):
            if perm[i] > perm[j]:
                sign = -sign
    return sign


def build_box_mesh(lo, hi, divisions, order):
    """Simplicial box mesh of given order over [lo, hi].

    2D: each grid quad splits into 2 triangles along the (0,0)-(1,1)
    diagonal.  3D: each hex splits into the 6 Kuhn tetrahedra sharing the
    main diagonal, which makes facet triangulations match across hexes.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dim = lo.shape[0]
    if np.isscalar(divisions) or np.ndim(divisions) == 0:
        divisions = (int(divisions),) * dim
    divisions = tuple(int(n) for n in divisions)
    if not np.all(hi > lo):
        raise ValueError("require lo < hi componentwise")
    if any(n < 1 for n in divisions):
        raise ValueError("divisions must be >= 1")
    if not 1 <= order <= 6:
        raise ValueError(f"order must be in [1, 6], got {order}")

    axes = [np.linspace(lo[k], hi[k], divisions[k] + 1) for k in range(dim)]
    spacing = (hi - lo) / np.array(divisions)
    h = float(spacing.max())
    shape = tuple(n + 1 for n in divisions)
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    grid = np.column_stack([g.ravel() for g in grids]).astype(np.int64)
    mesh_axes = np.meshgrid(*axes, indexing="ij")
    vertices = np.column_stack([a.ravel() for a in mesh_axes])

    def vid(idx):
        return np.ravel_multi_index(idx, shape)

    if dim == 2:
        nx, ny = divisions
        i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        i, j = i.ravel(), j.ravel()
        v00 = vid((i, j))
        v10 = vid((i + 1, j))
        v11 = vid((i + 1, j + 1))
        v01 = vid((i, j + 1))
        cells = np.empty((2 * nx * ny, 3), dtype=np.int64)
        cells[0::2] = np.column_stack([v00, v10, v11])
        cells[1::2] = np.column_stack([v00, v11, v01])
    else:
        nx, ny, nz = divisions
        i, j, k = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        i, j, k = i.ravel(), j.ravel(), k.ravel()
        base = np.stack([i, j, k], axis=1)
        nhex = base.shape[0]
        cells = np.empty((6 * nhex, 4), dtype=np.int64)
        for t, perm in enumerate(_KUHN_PERMS):
            corners = [base.copy()]
            cur = base.copy()
            for ax in perm:
                cur = cur.copy()
                cur[:, ax] += 1
                corners.append(cur)
            ids = [vid((c[:, 0], c[:, 1], c[:, 2])) for c in corners]
            tet = np.column_stack(ids)
            if _perm_sign(perm) < 0:
                tet[:, [2, 3]] = tet[:, [3, 2]]
            cells[t::6] = tet

    mesh = BackgroundMesh(
        dim=dim,
        order=order,
        lo=lo,
        hi=hi,
        divisions=divisions,
        vertices=vertices,
        cells=cells,
        grid=grid,
        h=h,
    )
    if (mesh.cell_volumes() <= 0).any():
        raise MeshError("box mesh construction produced non-positive cells")
    return mesh


def facet_neighbors(mesh):
    """Facet adjacency: (neighbor_cell, neighbor_facet) per cell facet.

    Local facet f of a cell is the one opposite local vertex f.  Boundary
    facets are marked with -1.  Raises on non-manifold facets.
    """
    nloc = mesh.dim + 1
    nc = mesh.num_cells
    facets = np.empty((nc * nloc, mesh.dim), dtype=np.int64)
    for f in range(nloc):
        idx = np.delete(np.arange(nloc), f)
        facets[f::nloc] = np.sort(mesh.cells[:, idx], axis=1)
    owner_cell = np.repeat(np.arange(nc), nloc)
    owner_facet = np.tile(np.arange(nloc), nc)

    order = np.lexsort(facets.T[::-1])
    fs = facets[order]
    oc = owner_cell[order]
    of = owner_facet[order]
    same = np.all(fs[1:] == fs[:-1], axis=1)
    # non-manifold: three equal facets in a row
    if np.any(same[1:] & same[:-1]):
        raise MeshError("non-manifold facet shared by more than 2 cells")
    neighbor_cell = -np.ones((nc, nloc), dtype=np.int64)
    neighbor_facet = -np.ones((nc, nloc), dtype=np.int64)
    i = np.flatnonzero(same)
    a_c, a_f = oc[i], of[i]
    b_c, b_f = oc[i + 1], of[i + 1]
    neighbor_cell[a_c, a_f] = b_c
    neighbor_facet[a_c, a_f] = b_f
    neighbor_cell[b_c, b_f] = a_c
    neighbor_facet[b_c, b_f] = a_f
    return neighbor_cell, neighbor_facet


def facet_permutation(mesh, c, f, neighbors=None):
    """Permutation aligning facet corner orders of cell c and its neighbor.

    Returns (nc, nf, perm) with ``perm`` such that
    facet_corners(nc, nf)[perm] == facet_corners(c, f), or None on boundary.
    """
    if neighbors is None:
        neighbors = facet_neighbors(mesh)
    ncell, nfacet = neighbors
    n_c = ncell[c, f]
    if n_c < 0:
        return None
    n_f = nfacet[c, f]
    mine = np.delete(mesh.cells[c], f)
    theirs = np.delete(mesh.cells[n_c], n_f)
    perm = np.array([int(np.where(theirs == v)[0][0]) for v in mine])
    return int(n_c), int(n_f), perm


def estimate_signed_distance(field, x, newton_tol, newton_max_iters=50):
    """First-order closest-point estimate of the signed distance to {phi=0}.

    Iterates x <- x - phi * grad/||grad||^2 until |phi| <= newton_tol.
    Returns (D, d, converged); d is a unit vector with D*d = x - x*.  At
    D = 0 the direction falls back to the normalized gradient.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    cur = pts.copy()
    phi = field(cur)
    active = np.abs(phi) > newton_tol
    stalled = np.zeros(pts.shape[0], dtype=bool)
    for _ in range(newton_max_iters):
        if not active.any():
            break
        g = field.grad(cur[active])
        g2 = np.einsum("nd,nd->n", g, g)
        # points at a critical point of the field (e.g. the center of a
        # sphere) cannot be projected; report them as not converged
        sing = g2 < 1e-24
        if sing.any():
            ai = np.flatnonzero(active)
            stalled[ai[sing]] = True
            active[ai[sing]] = False
            g = g[~sing]
            g2 = g2[~sing]
        cur[active] -= (phi[active] / g2)[:, None] * g
        phi = field(cur)
        active = np.abs(phi) > newton_tol
        active &= ~stalled
    converged = ~(active | stalled)
    phi0 = field(pts)
    delta = pts - cur
    dist = np.linalg.norm(delta, axis=1)
    D = dist * np.where(phi0 >= 0.0, 1.0, -1.0)
    d = np.empty_like(pts)
    small = dist <= 1e-300
    nz = ~small
    d[nz] = delta[nz] / D[nz, None]
    small_ok = small & converged
    d[small & ~converged] = 0.0
    if small_ok.any():
        g = field.grad(pts[small_ok])
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        if np.any(gn < 1e-12):
            raise SingularGradientError("zero gradient at query point")
        d[small_ok] = g / gn
    if single:
        return float(D[0]), d[0], bool(converged[0])
    return D, d, converged


def relocate_nodes(mesh, field, params, frozen=None):
    """Move corner vertices out of the band around {phi = 0} of ``field``.

    Jacobi-style fix-point iteration over the candidate vertices
    (|D| < d_crit, not fully frozen): per sweep, every candidate still
    inside the d_min band moves by q*d*sign(D) with
    q = d_step * (1 - |D|/d_crit) and sign(0) = +1; sweeps repeat until
    no vertex remains within d_min of the isosurface.  Moving only the
    offenders keeps cut cells close to their lattice shape, which keeps
    the reconstructed element lengths balanced.  ``frozen`` may be a
    boolean vertex mask or a per-component (nv, d) mask; masked components
    are zeroed (vertices constrained to box faces slide within them).
    Cell inversions are repaired by halving offending moves (up to 10x).

    Returns (new_mesh, iterations_used, converged).
    """
    newton_tol = params.newton_tol if params.newton_tol is not None else 1e-12 * mesh.h
    out = mesh.copy()
    nv = out.vertices.shape[0]
    if frozen is None:
        comp_frozen = np.zeros((nv, mesh.dim), dtype=bool)
    else:
        frozen = np.asarray(frozen, dtype=bool)
        comp_frozen = (
            np.repeat(frozen[:, None], mesh.dim, axis=1) if frozen.ndim == 1 else frozen
        )
    fully_frozen = comp_frozen.all(axis=1)

    D0, _, conv0 = estimate_signed_distance(
        field, out.vertices, newton_tol, params.newton_max_iters
    )
    candidates = np.flatnonzero(
        (np.abs(D0) < params.d_crit) & ~fully_frozen & conv0
    )
    if candidates.size == 0:
        return out, 0, True

    # incidence: cells touching any candidate vertex (for inversion checks)
    cand_set = np.zeros(nv, dtype=bool)
    cand_set[candidates] = True
    touched_cells = np.flatnonzero(cand_set[out.cells].any(axis=1))

    partial = comp_frozen[candidates].any(axis=1)
    # sliding vertices must not collapse their cells onto a neighbor; keep
    # every touched cell at a fraction of its original measure
    vol_floor = 0.2 * np.abs(_volumes_of(out, touched_cells))
    sweeps = 0
    for sweeps in range(1, params.max_iters + 1):
        D, d, conv = estimate_signed_distance(
            field, out.vertices[candidates], newton_tol, params.newton_max_iters
        )
        move_mask = (np.abs(D) < params.d_min) & conv
        if not move_mask.any():
            return out, sweeps - 1, True
        idx = candidates[move_mask]
        q = params.d_step * (1.0 - np.abs(D[move_mask]) / params.d_crit)
        sgn = np.where(D[move_mask] >= 0.0, 1.0, -1.0)
        step = (q * sgn)[:, None] * d[move_mask]
        step[comp_frozen[idx]] = 0.0
        pf = partial[move_mask]
        if pf.any():
            # restore the full step magnitude within the sliding plane;
            # otherwise near-normal gradients make the slide vanish
            norm = np.linalg.norm(step[pf], axis=1)
            ok_rows = norm > 1e-14 * mesh.h
            scale = np.where(ok_rows, q[pf] / np.where(ok_rows, norm, 1.0), 0.0)
            step[pf] *= scale[:, None]

        ok, applied = _apply_with_inversion_guard(
            out, touched_cells, idx, step, vol_floor
        )
        if not ok:
            raise RelocationError("cell inversion could not be repaired")

        # constrained-in-practice nodes (step projected or blocked to ~0)
        # would spin forever; drop them from the candidate set.
        stuck = np.linalg.norm(applied, axis=1) < 1e-14 * mesh.h
        if stuck.any():
            drop = np.isin(candidates, idx[stuck])
            candidates = candidates[~drop]
            partial = partial[~drop]
            if candidates.size == 0:
                return out, sweeps, True

    D, _, conv = estimate_signed_distance(
        field, out.vertices[candidates], newton_tol, params.newton_max_iters
    )
    converged = bool(((np.abs(D) > params.d_min) | ~conv).all())
    return out, sweeps, converged


def _apply_with_inversion_guard(mesh, cells_to_check, idx, step, vol_floor=0.0):
    """Apply vertex moves, halving any move that inverts an incident cell
    or squeezes it below ``vol_floor``.

    Moves still offending after ten halvings are cancelled individually,
    so blocked vertices never hold up the rest of the sweep.  Returns
    (ok, applied) with the per-vertex displacement actually applied.
    """
    old = mesh.vertices[idx].copy()
    cur = step.copy()
    moved = np.zeros(mesh.vertices.shape[0], dtype=bool)
    moved[idx] = True
    for _ in range(10):
        mesh.vertices[idx] = old + cur
        vols = _volumes_of(mesh, cells_to_check)
        bad = vols <= vol_floor
        if not bad.any():
            return True, cur
        bad_verts = np.unique(mesh.cells[cells_to_check[bad]])
        shrink = moved[bad_verts]
        local = np.isin(idx, bad_verts[shrink])
        if not local.any():
            break
        cur[local] *= 0.5
    # cancel the remaining offenders outright; their original positions
    # satisfied the floor, so this always restores a valid mesh
    mesh.vertices[idx] = old + cur
    vols = _volumes_of(mesh, cells_to_check)
    bad = vols <= vol_floor
    if bad.any():
        bad_verts = np.unique(mesh.cells[cells_to_check[bad]])
        local = np.isin(idx, bad_verts[moved[bad_verts]])
        cur[local] = 0.0
        mesh.vertices[idx] = old + cur
    ok = bool((_volumes_of(mesh, cells_to_check) > vol_floor).all())
    if not ok:
        mesh.vertices[idx] = old
        ok = bool((_volumes_of(mesh, cells_to_check) > vol_floor).all())
        cur = np.zeros_like(cur)
    return ok, cur


def _volumes_of(mesh, cell_ids):
    v = mesh.vertices[mesh.cells[cell_ids]]
    e = v[:, 1:, :] - v[:, :1, :]
    if mesh.dim == 2:
        return 0.5 * (e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0])
    return (
        e[:, 0, 0] * (e[:, 1, 1] * e[:, 2, 2] - e[:, 1, 2] * e[:, 2, 1])
        - e[:, 0, 1] * (e[:, 1, 0] * e[:, 2, 2] - e[:, 1, 2] * e[:, 2, 0])
        + e[:, 0, 2] * (e[:, 1, 0] * e[:, 2, 1] - e[:, 1, 1] * e[:, 2, 0])
    ) / 6.0


def characteristic_h(mesh):
    return mesh.h
