"""Restriction of surface elements by slave level sets.

Each slave field psi removes the psi > 0 part of the surface.  Elements
whose corner values straddle zero are decomposed inside their own 2D
reference element using the degree-p interpolant of the nodal psi values;
only sub-elements on the negative side are kept.  Edges created on the
psi = 0 interface are tagged with the slave id.

Edge splits are computed once per shared edge entity (identified by its
node provenance keys, in a canonical direction), so neighboring parents
produce bitwise-identical sub-edge nodes and the restricted mesh stays
conforming.
"""

import numpy as np

from .lagrange import (
    edge_node_indices,
    eval_edge_curve,
    interior_node_indices,
    reference_element,
)
from .reconstruct import (
    InvalidDataError,
    NodeRegistry,
    SurfaceElement,
    _coons_quad,
    _transfinite_tri,
    treated_signs,
)


def interpolate_slave_at_element(psi, element):
    """psi evaluated at the element's physical node positions."""
    return psi(element.node_coords_phys)


def _interp_root_1d(values, tol=1e-14):
    """Single root of the 1D Lagrange interpolant of equispaced ``values``.

    Scans 20 subintervals (more than one sign change is invalid data), then
    bisection plus Newton polish.  Returns t in (0, 1).
    """
    values = np.asarray(values, dtype=float)
    p = values.shape[0] - 1
    ref = reference_element("line", p)

    def f(t):
        return (ref.eval(np.array([[t]])) @ values).item()

    def df(t):
        return (ref.grad(np.array([[t]]))[0, :, 0] @ values).item()

    ts = np.linspace(0.0, 1.0, 21)
    vals = ref.eval(ts.reshape(-1, 1)) @ values
    sg = np.where(vals >= 0.0, 1.0, -1.0)
    flips = np.flatnonzero(sg[1:] * sg[:-1] < 0)
    if flips.size > 1:
        raise InvalidDataError("multiple slave-interface crossings on one edge")
    if flips.size == 0:
        return float(ts[int(np.argmin(np.abs(vals)))])
    lo, hi = ts[flips[0]], ts[flips[0] + 1]
    flo = f(lo)
    for _ in range(52):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (flo >= 0) != (fm >= 0):
            hi = mid
        else:
            lo, flo = mid, fm
    t = 0.5 * (lo + hi)
    for _ in range(4):
        ft = f(t)
        if abs(ft) <= tol * max(1.0, np.abs(values).max()):
            break
        d = df(t)
        if d == 0.0:
            break
        t = min(max(t - ft / d, 0.0), 1.0)
    return float(t)


class _EdgeSplitCache:
    """Per-slave cache of edge-entity splits, canonical direction.

    An entity is the tuple of node keys along an edge; the canonical
    direction runs from the smaller endpoint key (by repr).  Splitting
    registers the root node and the two sub-edge node sets in the global
    registry, once, so all parents sharing the edge agree bitwise.
    """

    def __init__(self, slave_id, order, registry):
        self.slave_id = slave_id
        self.p = order
        self.registry = registry
        self.entries = {}

    def split(self, edge_keys, edge_coords, edge_psi):
        flipped = repr(edge_keys[0]) > repr(edge_keys[-1])
        if flipped:
            keys = tuple(edge_keys[::-1])
            coords = edge_coords[::-1]
            psi = edge_psi[::-1]
        else:
            keys = tuple(edge_keys)
            coords = edge_coords
            psi = edge_psi
        entry = self.entries.get(keys)
        if entry is None:
            p = self.p
            t = _interp_root_1d(psi)
            root_key = ("sroot", self.slave_id, keys)
            self.registry.add(root_key, eval_edge_curve(coords, [t])[0])
            sides = []
            for side, (a, b) in enumerate([(0.0, t), (t, 1.0)]):
                tk = a + (b - a) * np.arange(p + 1) / p
                pts = eval_edge_curve(coords, tk)
                side_keys = [keys[0] if side == 0 else root_key]
                for k in range(1, p):
                    key = ("sedge", self.slave_id, keys, side, k)
                    self.registry.add(key, pts[k])
                    side_keys.append(key)
                side_keys.append(root_key if side == 0 else keys[-1])
                sides.append(side_keys)
            entry = {"t": t, "root_key": root_key, "sides": sides}
            self.entries[keys] = entry
        return entry, flipped


def decompose_in_reference(parent_shape, corner_signs):
    """Reference-element decomposition pattern for a cut element.

    Returns a list of piece descriptors: (shape, sign, corners, edges) with
    corners as symbols ('c', k) for parent corners or ('r', i) for the root
    on cut edge i (i indexes the returned ``cut_edges`` list), and per-edge
    source descriptors:

      ('full', k, fwd)         whole parent edge k
      ('portion', i, side, fwd) side 0/1 of cut parent edge i
      ('interface', fwd)        the psi = 0 curve
      ('diag', a, b)            straight line between two piece corners

    fwd is False when the piece traverses the feature against its stored
    direction.  Raises on the ambiguous double-diagonal quad pattern.
    """
    s = list(corner_signs)
    n = len(s)
    cut = [k for k in range(n) if s[k] != s[(k + 1) % n]]
    if parent_shape == "tri":
        if len(cut) != 2:
            raise InvalidDataError("invalid triangle sign pattern")
        m = [k for k in range(3) if s[k] != s[(k + 1) % 3] and s[k] != s[(k + 2) % 3]]
        m = m[0]
        e_a, e_b = m, (m + 2) % 3  # edges m->m+1 and m+2->m
        cut_edges = [e_a, e_b]
        tri = (
            "tri",
            s[m],
            [("c", m), ("r", 0), ("r", 1)],
            [("portion", 0, 0, True), ("interface", True), ("portion", 1, 1, True)],
        )
        quad = (
            "quad",
            -s[m],
            [("r", 0), ("c", (m + 1) % 3), ("c", (m + 2) % 3), ("r", 1)],
            [
                ("portion", 0, 1, True),
                ("full", (m + 1) % 3, True),
                ("portion", 1, 0, True),
                ("interface", False),
            ],
        )
        return cut_edges, [tri, quad]

    if parent_shape == "quad":
        if len(cut) == 4:
            raise InvalidDataError(
                "quad with alternating corner signs; refine the background mesh"
            )
        if len(cut) != 2:
            raise InvalidDataError("invalid quad sign pattern")
        k1, k2 = cut
        if (k2 - k1) % 4 == 2:
            # opposite edges cut: two sub-quads
            cut_edges = [k1, k2]
            pieces = []
            for (ra, rb), base in [((0, 1), k1), ((1, 0), k2)]:
                c1, c2 = (base + 1) % 4, (base + 2) % 4
                pieces.append(
                    (
                        "quad",
                        s[c1],
                        [("r", ra), ("c", c1), ("c", c2), ("r", rb)],
                        [
                            ("portion", ra, 1, True),
                            ("full", c1, True),
                            ("portion", rb, 0, True),
                            ("interface", ra == 1),
                        ],
                    )
                )
            return cut_edges, pieces
        # single odd corner: four triangles
        m = [k for k in range(4) if s[k] != s[(k + 1) % 4] and s[k] != s[(k + 3) % 4]]
        m = m[0]
        e_a, e_b = m, (m + 3) % 4
        cut_edges = [e_a, e_b]
        c1, c2, c3 = (m + 1) % 4, (m + 2) % 4, (m + 3) % 4
        pieces = [
            (
                "tri",
                s[m],
                [("c", m), ("r", 0), ("r", 1)],
                [("portion", 0, 0, True), ("interface", True), ("portion", 1, 1, True)],
            ),
            (
                "tri",
                -s[m],
                [("r", 0), ("c", c1), ("c", c2)],
                [
                    ("portion", 0, 1, True),
                    ("full", c1, True),
                    ("diag", ("c", c2), ("r", 0)),
                ],
            ),
            (
                "tri",
                -s[m],
                [("r", 0), ("c", c2), ("r", 1)],
                [
                    ("diag", ("r", 0), ("c", c2)),
                    ("diag", ("c", c2), ("r", 1)),
                    ("interface", False),
                ],
            ),
            (
                "tri",
                -s[m],
                [("r", 1), ("c", c2), ("c", c3)],
                [
                    ("diag", ("r", 1), ("c", c2)),
                    ("full", c2, True),
                    ("portion", 1, 0, True),
                ],
            ),
        ]
        return cut_edges, pieces
    raise ValueError(parent_shape)


def _interface_interior_ref(ref_parent, psi_values, a, b, p, tol):
    """Interior nodes of the psi=0 interface in parent reference coords."""
    if p == 1:
        return np.empty((0, 2))
    t = (np.arange(1, p) / p)[:, None]
    x = (1.0 - t) * a + t * b
    scale = max(1.0, float(np.abs(psi_values).max()))
    for _ in range(60):
        f = ref_parent.eval(x) @ psi_values
        if np.all(np.abs(f) <= tol * scale):
            return x
        g = np.einsum("qnm,n->qm", ref_parent.grad(x), psi_values)
        g2 = np.einsum("qm,qm->q", g, g)
        if np.any(g2 < 1e-28):
            raise InvalidDataError("vanishing slave gradient on interface")
        x = x - (f / g2)[:, None] * g
    raise InvalidDataError("slave interface reconstruction did not converge")


def _restrict_line(elem, psi_vals, cache, slave_id, registry, tol_surface, out):
    p = elem.order
    ends = np.array([psi_vals[0], psi_vals[-1]])
    if not ((ends > tol_surface).any() and (ends < -tol_surface).any()):
        # no genuine cut: keep iff some corner is strictly inside
        if (ends < -tol_surface).any():
            out.append(elem)
        return
    sg = treated_signs(ends, tol_surface)
    entry, flipped = cache.split(elem.node_keys, elem.node_coords_phys, psi_vals)
    # side 0 of the canonical direction holds the canonical first endpoint
    for side in (0, 1):
        keys = entry["sides"][side]
        end_sign = treated_signs([psi_vals[0 if (side == 0) != flipped else -1]],
                                 tol_surface)[0]
        if end_sign > 0:
            continue
        if flipped:
            keys = keys[::-1]
        coords = np.array([registry.get(k) for k in keys])
        tags = dict()
        # the root endpoint carries the slave tag; parent endpoint tags persist
        root_local = keys.index(entry["root_key"])
        tags[0 if root_local == 0 else 1] = slave_id
        for loc, marker in elem.boundary_edges.items():
            pk = elem.node_keys[0] if loc == 0 else elem.node_keys[-1]
            if pk == keys[0]:
                tags[0] = marker
            elif pk == keys[-1]:
                tags[1] = marker
        out.append(
            SurfaceElement(
                "line", p, elem.parent_cell, list(keys), coords,
                boundary_edges=tags, uid=(elem.uid, slave_id, side),
            )
        )


def _restrict_surface(elem, psi_vals, cache, slave_id, registry, tol_surface, out):
    p = elem.order
    ref = reference_element(elem.shape, p)
    corner_ids = ref.corners
    cv = psi_vals[corner_ids]
    if not ((cv > tol_surface).any() and (cv < -tol_surface).any()):
        # grazing or one-sided: keep iff strictly inside somewhere; an
        # interface running through corners must not be re-cut (slivers)
        if (cv < -tol_surface).any():
            out.append(elem)
        return
    sg = treated_signs(cv, tol_surface)
    cut_edges, pieces = decompose_in_reference(elem.shape, list(sg))
    eidx = edge_node_indices(elem.shape, p)
    nc = len(corner_ids)

    # split the cut parent edges through the shared entity cache
    splits = []
    for i, k in enumerate(cut_edges):
        ekeys = [elem.node_keys[j] for j in eidx[k]]
        ecoords = elem.node_coords_phys[eidx[k]]
        epsi = psi_vals[eidx[k]]
        entry, flipped = cache.split(ekeys, ecoords, epsi)
        t_parent = 1.0 - entry["t"] if flipped else entry["t"]
        splits.append((entry, flipped, t_parent, k))

    # reference positions of corners and roots
    ref_corners = ref.nodes[corner_ids]
    root_ref = []
    root_keys = []
    for entry, flipped, t_parent, k in splits:
        a = ref_corners[k]
        b = ref_corners[(k + 1) % nc]
        root_ref.append((1.0 - t_parent) * a + t_parent * b)
        root_keys.append(entry["root_key"])

    def corner_ref(sym):
        return ref_corners[sym[1]] if sym[0] == "c" else root_ref[sym[1]]

    def corner_key(sym):
        if sym[0] == "c":
            return elem.node_keys[corner_ids[sym[1]]]
        return root_keys[sym[1]]

    # interface nodes (shared between the two pieces bordering it)
    a_ref, b_ref = root_ref[0], root_ref[1]
    iface_ref = _interface_interior_ref(ref, psi_vals, a_ref, b_ref, p, 1e-13)
    iface_all_ref = np.vstack([a_ref, iface_ref, b_ref])
    iface_keys = [root_keys[0]]
    iface_phys = ref.eval(iface_all_ref) @ elem.node_coords_phys
    for k in range(1, p):
        key = ("siface", elem.uid, slave_id, k)
        registry.add(key, iface_phys[k])
        iface_keys.append(key)
    iface_keys.append(root_keys[1])

    diag_store = {}

    def diag_nodes(sa, sb):
        pair = tuple(sorted((sa, sb), key=repr))
        if pair not in diag_store:
            a, b = corner_ref(pair[0]), corner_ref(pair[1])
            t = (np.arange(p + 1) / p)[:, None]
            refs = (1.0 - t) * a + t * b
            phys = ref.eval(refs) @ elem.node_coords_phys
            keys = [corner_key(pair[0])]
            for k in range(1, p):
                key = ("sdiag", elem.uid, slave_id, pair, k)
                registry.add(key, phys[k])
                keys.append(key)
            keys.append(corner_key(pair[1]))
            diag_store[pair] = (keys, refs)
        keys, refs = diag_store[pair]
        if (sa, sb) == pair:
            return keys, refs
        return keys[::-1], refs[::-1]

    for piece_idx, (shape, sign, corners, edge_srcs) in enumerate(pieces):
        if sign >= 0:
            continue
        sref = reference_element(shape, p)
        n_nodes = sref.num_nodes
        node_keys = [None] * n_nodes
        node_refs = np.full((n_nodes, 2), np.nan)
        for j, sym in zip(sref.corners, corners):
            node_keys[j] = corner_key(sym)
            node_refs[j] = corner_ref(sym)
        tags = {}
        seidx = edge_node_indices(shape, p)
        edge_curves_ref = []
        for le, src in enumerate(edge_srcs):
            kind = src[0]
            if kind == "full":
                _, k, fwd = src
                keys = [elem.node_keys[j] for j in eidx[k]]
                refs = ref.nodes[eidx[k]]
                if not fwd:
                    keys, refs = keys[::-1], refs[::-1]
                if k in elem.boundary_edges:
                    tags[le] = elem.boundary_edges[k]
            elif kind == "portion":
                _, i, side, fwd = src
                entry, flipped, t_parent, k = splits[i]
                cside = 1 - side if flipped else side
                keys = list(entry["sides"][cside])
                if flipped:
                    keys = keys[::-1]
                a = ref_corners[k] if side == 0 else root_ref[i]
                b = root_ref[i] if side == 0 else ref_corners[(k + 1) % nc]
                t = (np.arange(p + 1) / p)[:, None]
                refs = (1.0 - t) * a + t * b
                if not fwd:
                    keys, refs = keys[::-1], refs[::-1]
                if k in elem.boundary_edges:
                    tags[le] = elem.boundary_edges[k]
            elif kind == "interface":
                fwd = src[1]
                keys = list(iface_keys)
                refs = iface_all_ref
                if not fwd:
                    keys, refs = keys[::-1], refs[::-1]
                tags[le] = slave_id
            else:  # diag
                _, sa, sb = src
                keys, refs = diag_nodes(sa, sb)
            for j, key, rr in zip(seidx[le], keys, refs):
                node_keys[j] = key
                node_refs[j] = rr
            edge_curves_ref.append(np.asarray(refs, dtype=float))
        iidx = interior_node_indices(shape, p)
        if iidx.size:
            lattice = sref.nodes[iidx]
            cref = np.array([corner_ref(sym) for sym in corners])
            if shape == "tri":
                inner_ref = _transfinite_tri(cref, edge_curves_ref, lattice)
            else:
                inner_ref = _coons_quad(cref, edge_curves_ref, lattice)
            inner_phys = ref.eval(inner_ref) @ elem.node_coords_phys
            for jj, (j, xy) in enumerate(zip(iidx, inner_phys)):
                key = ("sint", elem.uid, slave_id, piece_idx, jj)
                registry.add(key, xy)
                node_keys[j] = key
                node_refs[j] = inner_ref[jj]
        coords = np.array([registry.get(k) for k in node_keys])
        out.append(
            SurfaceElement(
                shape, p, elem.parent_cell, node_keys, coords,
                boundary_edges=tags, uid=(elem.uid, slave_id, piece_idx),
            )
        )


def restrict_elements(elements, slaves, registry=None, tol_surface=1e-12):
    """Fold slave restrictions over an element list, in slave order.

    Returns the kept (possibly decomposed) elements.  ``registry`` is the
    node registry from reconstruction; a fresh one seeded from the element
    coordinates is created when omitted.
    """
    if registry is None:
        registry = NodeRegistry()
        for e in elements:
            for key, xyz in zip(e.node_keys, e.node_coords_phys):
                registry.add(key, xyz)
    for i, e in enumerate(elements):
        if e.uid is None:
            e.uid = ("e", e.parent_cell)
    current = list(elements)
    for psi in slaves:
        cache = _EdgeSplitCache(psi.id, current[0].order if current else 1, registry)
        out = []
        for elem in current:
            vals = interpolate_slave_at_element(psi, elem)
            if elem.shape == "line":
                _restrict_line(
                    elem, vals, cache, psi.id, registry, tol_surface, out
                )
            else:
                _restrict_surface(
                    elem, vals, cache, psi.id, registry, tol_surface, out
                )
        current = out
    return current
