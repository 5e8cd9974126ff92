"""Higher-order surface elements from cut background cells.

Each background cell cut by the master zero set yields one surface element:
a line in 2D, a triangle or quadrilateral in 3D, with nodes placed on the
zero set.  Nodes shared between cells (edge roots, face line nodes) are
computed once per background edge/face and stored under provenance keys, so
neighboring elements agree bitwise and no coordinate matching is ever
needed downstream.
"""

from dataclasses import dataclass, field as dfield

import numpy as np

from .lagrange import (
    edge_node_indices,
    eval_edge_curve,
    interior_node_indices,
    reference_element,
)

TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
TRI_EDGES = ((0, 1), (1, 2), (2, 0))


class ReconstructionError(RuntimeError):
    pass


class InvalidDataError(RuntimeError):
    """Level-set data is too coarse or ambiguous for a unique reconstruction."""


@dataclass
class CutTopology:
    kind: str  # none | line | triangular | quadrilateral
    cut_edges: tuple
    corner_signs: tuple


@dataclass
class SurfaceElement:
    """One surface element with provenance-keyed nodes in lattice order."""

    shape: str  # line | tri | quad
    order: int
    parent_cell: int
    node_keys: list
    node_coords_phys: np.ndarray = None
    node_coords_ref: np.ndarray = None
    boundary_edges: dict = dfield(default_factory=dict)  # local edge -> marker
    uid: tuple = None  # stable identity used by restriction provenance keys

    @property
    def num_nodes(self):
        return len(self.node_keys)


class NodeRegistry:
    """Provenance key -> coordinates, computed once per key."""

    def __init__(self):
        self.coords = {}

    def __contains__(self, key):
        return key in self.coords

    def __len__(self):
        return len(self.coords)

    def add(self, key, xyz):
        if key in self.coords:
            return
        self.coords[key] = np.asarray(xyz, dtype=float)

    def get(self, key):
        return self.coords[key]


def treated_signs(values, tol_surface):
    """Corner signs with |phi| <= tol_surface deterministically positive."""
    values = np.asarray(values, dtype=float)
    signs = np.where(values >= 0.0, 1, -1)
    signs = np.where(np.abs(values) <= tol_surface, 1, signs)
    return signs


def classify_cut(values, tol_surface, dim=3):
    """Cut topology of one cell from its corner level-set values."""
    signs = treated_signs(values, tol_surface)
    edges = TET_EDGES if dim == 3 else TRI_EDGES
    cut = tuple(
        k for k, (a, b) in enumerate(edges) if signs[a] != signs[b]
    )
    if not cut:
        return CutTopology("none", (), tuple(signs))
    if dim == 2:
        if len(cut) != 2:
            raise InvalidDataError(f"triangle with {len(cut)} cut edges")
        return CutTopology("line", cut, tuple(signs))
    if len(cut) == 3:
        return CutTopology("triangular", cut, tuple(signs))
    if len(cut) == 4:
        return CutTopology("quadrilateral", cut, tuple(signs))
    raise InvalidDataError(f"tetrahedron with {len(cut)} cut edges")


def _sign_nonneg(v):
    return np.where(v >= 0.0, 1.0, -1.0)


def edge_roots_batch(field, a, b, tol_root, nscan=20):
    """Roots of phi on the straight segments a[i] -> b[i].

    Scans ``nscan`` subintervals per edge; more than one sign change is an
    invalid-data error.  The bracketed root is polished by bisection plus
    Newton.  Returns (t, x) with x = a + t (b - a).
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    n, d = a.shape
    ts = np.linspace(0.0, 1.0, nscan + 1)
    pts = a[:, None, :] + ts[None, :, None] * (b - a)[:, None, :]
    vals = field(pts.reshape(-1, d)).reshape(n, nscan + 1)
    sg = _sign_nonneg(vals)
    flips = sg[:, 1:] * sg[:, :-1] < 0
    counts = flips.sum(axis=1)
    if np.any(counts > 1):
        i = int(np.argmax(counts))
        raise InvalidDataError(
            f"multiple zero crossings on edge {a[i]} -> {b[i]}; "
            "background mesh too coarse for the level-set data"
        )
    k = np.argmax(flips, axis=1)
    lo = ts[k].copy()
    hi = ts[k + 1].copy()
    # no raw crossing: corner value within surface tolerance, root sits at
    # the scan point of minimal |phi|
    flat = counts == 0
    if flat.any():
        j = np.argmin(np.abs(vals[flat]), axis=1)
        lo[flat] = ts[j]
        hi[flat] = ts[j]

    def phi_at(t):
        return field(a + t[:, None] * (b - a))

    flo = phi_at(lo)
    for _ in range(52):
        mid = 0.5 * (lo + hi)
        fm = phi_at(mid)
        left = _sign_nonneg(flo) * _sign_nonneg(fm) < 0
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
        flo = np.where(left, flo, fm)
    t = 0.5 * (lo + hi)
    e = b - a
    for _ in range(5):
        x = a + t[:, None] * e
        f = field(x)
        if np.all(np.abs(f) <= tol_root):
            break
        df = np.einsum("nd,nd->n", field.grad(x), e)
        df = np.where(np.abs(df) < 1e-300, 1.0, df)
        t = np.clip(t - f / df, 0.0, 1.0)
    return t, a + t[:, None] * e


def project_points(field, x, tol_root, normals=None, max_iters=60):
    """Newton closest-point projection of x onto {phi = 0}.

    With ``normals`` given, steps are confined to the planes orthogonal to
    them (used for face line nodes).  Stops at |phi| <= tol_root or when
    steps stagnate at machine precision; otherwise raises.
    """
    x = np.array(x, dtype=float)
    scale = max(float(np.abs(x).max()), 1.0)
    floor = 64.0 * np.finfo(float).eps * scale
    active = np.ones(x.shape[0], dtype=bool)
    for _ in range(max_iters):
        f = field(x[active])
        done = np.abs(f) <= tol_root
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not active.any():
            return x
        f = f[~done]
        g = field.grad(x[active])
        if normals is not None:
            nrm = normals[active]
            g = g - np.einsum("nd,nd->n", g, nrm)[:, None] * nrm
        g2 = np.einsum("nd,nd->n", g, g)
        if np.any(g2 < 1e-28):
            raise ReconstructionError("vanishing tangential gradient in projection")
        step = (f / g2)[:, None] * g
        x[active] -= step
        stalled = np.linalg.norm(step, axis=1) < floor
        if stalled.any():
            idx = np.flatnonzero(active)
            active[idx[stalled]] = False
    if np.any(np.abs(field(x)) > max(tol_root, floor)):
        raise ReconstructionError("surface projection did not converge")
    return x


def reconstruct_face_line(field, root_a, root_b, p, tol_root, normal=None):
    """Degree-p line element nodes on {phi=0} between two edge roots.

    Interior nodes start on the straight chord and are Newton-projected
    onto the zero set; with ``normal`` the projection stays in that plane
    (3D face), otherwise it is unconstrained (2D cells).
    """
    root_a = np.asarray(root_a, dtype=float)
    root_b = np.asarray(root_b, dtype=float)
    nodes = np.empty((p + 1, root_a.shape[0]))
    nodes[0] = root_a
    nodes[p] = root_b
    if p > 1:
        t = (np.arange(1, p) / p)[:, None]
        init = (1.0 - t) * root_a + t * root_b
        nrm = None
        if normal is not None:
            nrm = np.broadcast_to(normal, init.shape).copy()
        nodes[1:p] = project_points(field, init, tol_root, normals=nrm)
    return nodes


def canonical_face_frame(face_global_ids):
    """Permutation putting a face's corner listing into canonical order.

    The canonical frame lists the face's global corner ids ascending; both
    cells incident to a face therefore reconstruct it identically.
    """
    face_global_ids = np.asarray(face_global_ids)
    return np.argsort(face_global_ids, kind="stable")


def _transfinite_tri(corners, edges, lattice):
    """Transfinite interior init for a triangle from its 3 edge curves.

    corners: (3, d); edges[k]: (p+1, d) from corner k to corner k+1;
    lattice: (m, 2) reference coords of the points to produce.
    """
    r, s = lattice[:, 0], lattice[:, 1]
    lam = np.stack([1.0 - r - s, r, s], axis=1)
    out = -(lam @ corners)
    for k in range(3):
        a, b = k, (k + 1) % 3
        wsum = lam[:, a] + lam[:, b]
        t = lam[:, b] / wsum
        out += wsum[:, None] * eval_edge_curve(edges[k], t)
    return out


def _coons_quad(corners, edges, lattice):
    """Coons-patch interior init for a quad from its 4 CCW edge curves."""
    u, v = lattice[:, 0], lattice[:, 1]
    bottom = eval_edge_curve(edges[0], u)
    right = eval_edge_curve(edges[1], v)
    top = eval_edge_curve(edges[2], 1.0 - u)
    left = eval_edge_curve(edges[3], 1.0 - v)
    c = corners
    blend = (
        np.outer((1 - u) * (1 - v), c[0])
        + np.outer(u * (1 - v), c[1])
        + np.outer(u * v, c[2])
        + np.outer((1 - u) * v, c[3])
    )
    return (
        (1 - v)[:, None] * bottom
        + v[:, None] * top
        + (1 - u)[:, None] * left
        + u[:, None] * right
        - blend
    )


def _cell_edges(dim):
    return TET_EDGES if dim == 3 else TRI_EDGES


def reconstruct_surface(mesh, field, order, tol_root=None, tol_surface=None, snap_tol=None):
    """Surface elements for all cut cells of a background mesh.

    Returns (elements, registry).  Element node coordinates are filled in
    physical space; reference coordinates (parent-cell affine) are attached
    as well.  Normals consistently point from the negative to the positive
    side of the field.

    Vertices with |phi| <= snap_tol (default 0.05 h) are treated as lying
    on the surface: every root on their edges collapses into one shared
    node placed at the vertex's closest-point projection.  Relocation
    normally clears a band around the surface, so this only fires for
    vertices it could not move, e.g. those pinned to bounding-box planes
    the surface touches; callers that constrain relocation should widen
    snap_tol to the relocation band (d_min), otherwise blocked vertices
    just above the default spawn sliver elements.
    """
    if tol_root is None:
        tol_root = 1e-12 * mesh.h
    if tol_surface is None:
        tol_surface = 1e-10 * mesh.h
    if snap_tol is None:
        snap_tol = 0.05 * mesh.h
    snap_tol = max(snap_tol, tol_surface)
    p = order
    dim = mesh.dim
    edges_loc = _cell_edges(dim)

    phi = field(mesh.vertices)
    signs = treated_signs(phi, snap_tol)
    cell_signs = signs[mesh.cells]
    cut_cells = np.flatnonzero(
        (cell_signs > 0).any(axis=1) & (cell_signs < 0).any(axis=1)
    )
    registry = NodeRegistry()
    if cut_cells.size == 0:
        return [], registry

    # --- unique cut background edges, roots in one vectorized pass -------
    cs = mesh.cells[cut_cells]
    pair_list = []
    for a, b in edges_loc:
        va, vb = cs[:, a], cs[:, b]
        mixed = signs[va] != signs[vb]
        pr = np.stack([va[mixed], vb[mixed]], axis=1)
        pair_list.append(np.sort(pr, axis=1))
    pairs = np.unique(np.concatenate(pair_list, axis=0), axis=0)
    t_root, x_root = edge_roots_batch(
        field, mesh.vertices[pairs[:, 0]], mesh.vertices[pairs[:, 1]], tol_root
    )
    # roots on edges of a snapped corner merge into one per-vertex node at
    # the corner's closest-point projection (exactly on the surface)
    zerov = np.abs(phi) <= snap_tol
    snap_ids = np.unique(pairs[zerov[pairs].any(axis=1)])
    snap_ids = snap_ids[zerov[snap_ids]]
    if snap_ids.size:
        proj = project_points(field, mesh.vertices[snap_ids], tol_root)
        snap_coord = dict(zip(snap_ids.tolist(), proj))
    root_key_of = {}
    for i in range(pairs.shape[0]):
        u, v = int(pairs[i, 0]), int(pairs[i, 1])
        if zerov[u]:
            key = ("vroot", u)
            registry.add(key, snap_coord[u])
        elif zerov[v]:
            key = ("vroot", v)
            registry.add(key, snap_coord[v])
        else:
            key = ("eroot", u, v)
            registry.add(key, x_root[i])
        root_key_of[(u, v)] = key

    def root_key(u, v):
        return root_key_of[(u, v) if u < v else (v, u)]

    # --- face line elements, once per unique cut face (3D only) ----------
    if dim == 3 and p > 1:
        _build_face_lines(
            mesh, field, signs, cut_cells, registry, root_key, p, tol_root
        )

    # --- per-cell elements ------------------------------------------------
    elements = []
    interior_init = []
    interior_slots = []
    for c in cut_cells:
        verts = mesh.cells[c]
        sg = signs[verts]
        if dim == 2:
            elem = _build_line_element(
                mesh, field, c, verts, sg, registry, root_key, p, tol_root
            )
        else:
            elem = _build_surface_element(
                mesh, field, c, verts, sg, registry, root_key, p,
                interior_init, interior_slots,
            )
        if elem is not None:  # cut touching the cell only at a vertex/edge
            elements.append(elem)

    # project all interior nodes in one vectorized batch
    if interior_init:
        init = np.concatenate(interior_init, axis=0)
        proj = project_points(field, init, tol_root)
        for (elem, keys), rows in zip(
            interior_slots, np.split(proj, np.cumsum([len(k) for _, k in interior_slots]))[:-1]
        ):
            for key, xyz in zip(keys, rows):
                registry.add(key, xyz)

    _finalize_coordinates(mesh, elements, registry)
    return elements, registry


def _build_face_lines(mesh, field, signs, cut_cells, registry, root_key, p, tol_root):
    """Interior nodes of the cut line on every cut tet face, stored once.

    A face is cut when exactly one of its three corner signs differs.  The
    line runs between the roots of its two cut edges, ordered canonically
    by the smaller root key, so both incident tets see identical nodes.
    Faces whose two roots coincide (cut through a corner) carry no line.
    """
    faces = []
    cs = mesh.cells[cut_cells]
    for f in range(4):
        tri = np.sort(np.delete(np.arange(4), f))
        faces.append(np.sort(cs[:, tri], axis=1))
    faces = np.unique(np.concatenate(faces, axis=0), axis=0)
    sgf = signs[faces]
    cutf = np.abs(sgf.sum(axis=1)) == 1
    faces = faces[cutf]
    if faces.shape[0] == 0:
        return
    sgf = signs[faces]
    # odd corner m, the two cut edges are (m, other1), (m, other2)
    odd = np.argmax(sgf != np.sign(sgf.sum(axis=1))[:, None], axis=1)
    m = faces[np.arange(faces.shape[0]), odd]
    others = np.where(
        (faces == m[:, None]), -1, faces
    )
    others = np.sort(others, axis=1)[:, 1:]  # drop the -1, keep ascending pair

    # a line between two snapped vertices lies on a background edge and is
    # seen from several faces; build it once so all cells share it.  Among
    # the candidate faces take the one whose plane holds both root points
    # best: on box boundaries this keeps the line inside the boundary plane.
    best = {}
    for i in range(faces.shape[0]):
        ka = root_key(int(m[i]), int(others[i, 0]))
        kb = root_key(int(m[i]), int(others[i, 1]))
        if ka == kb:
            continue
        if kb < ka:
            ka, kb = kb, ka
        tri = mesh.vertices[faces[i]]
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        n /= np.linalg.norm(n)
        dev = abs((registry.get(ka) - tri[0]) @ n) + abs(
            (registry.get(kb) - tri[0]) @ n
        )
        cur = best.get((ka, kb))
        if cur is None or dev < cur[0]:
            best[(ka, kb)] = (dev, i)
    kept = [(i, ka, kb) for (ka, kb), (_, i) in sorted(best.items(), key=str)]
    if not kept:
        return
    idx = np.array([i for i, _, _ in kept])
    ra = np.array([registry.get(ka) for _, ka, _ in kept])
    rb = np.array([registry.get(kb) for _, _, kb in kept])
    v0 = mesh.vertices[faces[idx, 0]]
    n = np.cross(
        mesh.vertices[faces[idx, 1]] - v0, mesh.vertices[faces[idx, 2]] - v0
    )
    n /= np.linalg.norm(n, axis=1, keepdims=True)

    t = np.arange(1, p) / p
    init = ra[:, None, :] * (1.0 - t)[None, :, None] + rb[:, None, :] * t[None, :, None]
    nrm = np.repeat(n, p - 1, axis=0)
    proj = project_points(field, init.reshape(-1, 3), tol_root, normals=nrm)
    proj = proj.reshape(len(kept), p - 1, 3)
    for row, (_, ka, kb) in enumerate(kept):
        for k in range(p - 1):
            registry.add(("rline", ka, kb, k + 1), proj[row, k])


def _face_line_keys(key_a, key_b, p):
    """Node keys of the stored root-pair line, oriented from key_a to key_b."""
    lo = min(key_a, key_b)
    hi = max(key_a, key_b)
    inner = [("rline", lo, hi, k) for k in range(1, p)]
    if lo != key_a:
        inner.reverse()
    return [key_a, *inner, key_b]


def _build_line_element(mesh, field, c, verts, sg, registry, root_key, p, tol_root):
    """Line element of a cut 2D triangle, normal (tau_y, -tau_x) along grad."""
    cut = [(a, b) for a, b in TRI_EDGES if sg[a] != sg[b]]
    keys = [root_key(int(verts[a]), int(verts[b])) for a, b in cut]
    if keys[0] == keys[1]:  # cut passes through a corner, touching only
        return None
    c0, c1 = registry.get(keys[0]), registry.get(keys[1])
    mid = 0.5 * (c0 + c1)
    g = field.grad(mid)
    tau = c1 - c0
    if tau[0] * g[1] - tau[1] * g[0] > 0:  # n = (tau_y, -tau_x); need n.g > 0
        keys.reverse()
        c0, c1 = c1, c0
    nodes = reconstruct_face_line(field, c0, c1, p, tol_root)
    node_keys = [keys[0]] + [("lint", int(c), k) for k in range(1, p)] + [keys[1]]
    for k in range(1, p):
        registry.add(node_keys[k], nodes[k])
    return SurfaceElement("line", p, int(c), node_keys)


def _build_surface_element(
    mesh, field, c, verts, sg, registry, root_key, p, interior_init, interior_slots
):
    neg = [int(verts[i]) for i in range(4) if sg[i] < 0]
    pos = [int(verts[i]) for i in range(4) if sg[i] > 0]
    if len(neg) == 3:
        m, others = pos[0], sorted(neg)
        shape = "tri"
    elif len(pos) == 3:
        m, others = neg[0], sorted(pos)
        shape = "tri"
    else:
        shape = "quad"

    if shape == "tri":
        corner_edges = [(m, o) for o in others]
    else:
        a, b = sorted(neg)
        cc, dd = sorted(pos)
        corner_edges = [(a, cc), (a, dd), (b, dd), (b, cc)]

    ckeys = [root_key(u, v) for u, v in corner_edges]
    # collapse cyclically adjacent corners sharing a root (cut through a
    # background vertex); fewer than three distinct corners means the
    # surface only touches the cell tangentially
    keep = [k for k in range(len(ckeys)) if ckeys[k] != ckeys[k - 1]]
    if len(keep) < len(ckeys):
        if len(keep) < 3:
            return None
        ckeys = [ckeys[k] for k in keep]
        shape = "tri"
    cpts = np.array([registry.get(k) for k in ckeys])
    g = field.grad(cpts.mean(axis=0))
    if len(ckeys) == 3:
        n = np.cross(cpts[1] - cpts[0], cpts[2] - cpts[0])
    else:
        n = np.cross(cpts[2] - cpts[0], cpts[3] - cpts[1])
    if n @ g < 0:
        ckeys = [ckeys[0]] + ckeys[:0:-1]
        cpts = cpts[[0] + list(range(len(ckeys) - 1, 0, -1))]

    ref = reference_element(shape, p)
    node_keys = [None] * ref.num_nodes
    nc = len(ckeys)
    for k, idx in enumerate(ref.corners):
        node_keys[idx] = ckeys[k]
    edge_curves = []
    if p > 1:
        eidx = edge_node_indices(shape, p)
        for k in range(nc):
            ka, kb = ckeys[k], ckeys[(k + 1) % nc]
            ekeys = _face_line_keys(ka, kb, p)
            for j, key in enumerate(ekeys):
                node_keys[eidx[k][j]] = key
            edge_curves.append(np.array([registry.get(k2) for k2 in ekeys]))
        iidx = interior_node_indices(shape, p)
        if iidx.size:
            lattice = ref.nodes[iidx]
            if shape == "tri":
                init = _transfinite_tri(cpts, edge_curves, lattice)
            else:
                init = _coons_quad(cpts, edge_curves, lattice)
            ikeys = [("cint", int(c), k) for k in range(iidx.size)]
            for j, k2 in zip(iidx, ikeys):
                node_keys[j] = k2
            elem = SurfaceElement(shape, p, int(c), node_keys)
            interior_init.append(init)
            interior_slots.append((elem, ikeys))
            return elem
    return SurfaceElement(shape, p, int(c), node_keys)


def _finalize_coordinates(mesh, elements, registry):
    """Attach physical and parent-reference coordinates to every element."""
    for elem in elements:
        phys = np.array([registry.get(k) for k in elem.node_keys])
        elem.node_coords_phys = phys
        verts = mesh.vertices[mesh.cells[elem.parent_cell]]
        E = (verts[1:] - verts[0]).T
        elem.node_coords_ref = np.linalg.solve(
            E, (phys - verts[0]).T
        ).T


def element_normals(elem, ref_pts=None):
    """Unit normals of a surface element at reference points (3D) or the
    in-plane edge normal (tau_y, -tau_x) for 2D line elements."""
    ref = reference_element(elem.shape, elem.order)
    if ref_pts is None:
        ref_pts = ref.nodes
    G = ref.grad(ref_pts)  # (q, n, mdim)
    J = np.einsum("qnm,nd->qdm", G, elem.node_coords_phys)
    if elem.shape == "line":
        tau = J[:, :, 0]
        n = np.stack([tau[:, 1], -tau[:, 0]], axis=1)
    else:
        n = np.cross(J[:, :, 0], J[:, :, 1])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(norm < 1e-300):
        raise ReconstructionError("degenerate surface element")
    return n / norm
