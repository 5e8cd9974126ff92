"""Conforming mixed surface meshes extracted from restricted elements.

Node unification relies purely on the provenance keys attached by the
reconstruction/restriction stages: identical keys mean identical (bitwise)
coordinates, so no geometric matching is performed.  Global node ids are
assigned lexicographically by key, which makes the numbering independent of
element processing order.
"""

from dataclasses import dataclass, field as dfield

import numpy as np

from .lagrange import edge_node_indices, reference_element
from .quadrature import rule

BOX_MARKER = "box"


class MeshFormatError(RuntimeError):
    pass


@dataclass
class SurfaceMesh:
    ambient_dim: int
    order: int
    nodes: np.ndarray  # (n, ambient_dim)
    cells: list  # [(shape, np.ndarray of node ids in lattice order)]
    cell_parent: list  # background cell id per cell (-1 if unknown)
    boundary_edges: list  # (cell id, local edge id, marker)
    node_tags: dict = dfield(default_factory=dict)  # node id -> set of markers

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    @property
    def num_cells(self):
        return len(self.cells)

    def cell_groups(self):
        """shape -> (cell indices, (m, n_nodes) id matrix), for vector ops."""
        groups = {}
        for i, (shape, ids) in enumerate(self.cells):
            groups.setdefault(shape, []).append(i)
        out = {}
        for shape, idx in groups.items():
            conn = np.array([self.cells[i][1] for i in idx], dtype=np.int64)
            out[shape] = (np.array(idx, dtype=np.int64), conn)
        return out

    def tagged_nodes(self, marker):
        """Sorted node ids carrying the given boundary marker."""
        return np.array(
            sorted(n for n, tags in self.node_tags.items() if marker in tags),
            dtype=np.int64,
        )

    def boundary_markers(self):
        return sorted({m for _, _, m in self.boundary_edges}, key=repr)


def _edge_features(shape, p):
    """Local 'edges' used for conformity/tagging: endpoints for lines."""
    if shape == "line":
        return (np.array([0]), np.array([p]))
    return edge_node_indices(shape, p)


def unify_nodes(elements, box_lo=None, box_hi=None, check=True):
    """Assemble a SurfaceMesh from elements with provenance-keyed nodes.

    Nodes are identified by key, ids assigned lexicographically (by repr).
    Element edges whose nodes all lie exactly on one bounding-box plane get
    the box-boundary marker (pass ``box_lo``/``box_hi`` of the background
    mesh); slave markers come from the elements' boundary tags.
    """
    coords = {}
    for e in elements:
        for key, xyz in zip(e.node_keys, e.node_coords_phys):
            prev = coords.get(key)
            if prev is None:
                coords[key] = xyz
            elif check and not np.allclose(prev, xyz, atol=1e-12, rtol=0.0):
                raise RuntimeError(f"provenance collision at key {key!r}")
    keys = sorted(coords, key=repr)
    ids = {k: i for i, k in enumerate(keys)}
    if keys:
        nodes = np.array([coords[k] for k in keys])
        dim = nodes.shape[1]
    else:
        nodes = np.zeros((0, 2))
        dim = 2
    order = elements[0].order if elements else 1

    cells = []
    parents = []
    boundary = []
    for ci, e in enumerate(elements):
        ids_e = np.array([ids[k] for k in e.node_keys], dtype=np.int64)
        cells.append((e.shape, ids_e))
        parents.append(e.parent_cell)
        for le, marker in e.boundary_edges.items():
            boundary.append((ci, le, marker))

    mesh = SurfaceMesh(dim, order, nodes, cells, parents, boundary)
    if box_lo is not None:
        _tag_box_boundary(mesh, np.asarray(box_lo, float), np.asarray(box_hi, float))
    _build_node_tags(mesh)
    return mesh


def _tag_box_boundary(mesh, lo, hi):
    """Tag element edges lying exactly in a bounding-box plane.

    Exactness is guaranteed upstream: relocation freezes the normal
    component of face vertices and in-plane projections preserve it.
    """
    on_plane = np.zeros((mesh.num_nodes, 2 * mesh.ambient_dim), dtype=bool)
    for ax in range(mesh.ambient_dim):
        on_plane[:, 2 * ax] = mesh.nodes[:, ax] == lo[ax]
        on_plane[:, 2 * ax + 1] = mesh.nodes[:, ax] == hi[ax]
    existing = {(c, e) for c, e, _ in mesh.boundary_edges}
    for ci, (shape, ids) in enumerate(mesh.cells):
        for le, feat in enumerate(_edge_features(shape, mesh.order)):
            if (ci, le) in existing:
                continue
            if on_plane[ids[feat]].all(axis=0).any():
                mesh.boundary_edges.append((ci, le, BOX_MARKER))


def _build_node_tags(mesh):
    mesh.node_tags = {}
    for ci, le, marker in mesh.boundary_edges:
        shape, ids = mesh.cells[ci]
        for n in ids[_edge_features(shape, mesh.order)[le]]:
            mesh.node_tags.setdefault(int(n), set()).add(marker)


def check_conformity(mesh):
    """Every interior edge is shared by exactly 2 cells with matching node
    ids (up to reversal); returns the number of boundary (once-seen) edges.
    """
    from collections import defaultdict

    seen = defaultdict(list)
    for ci, (shape, ids) in enumerate(mesh.cells):
        if shape == "line":
            continue
        for feat in edge_node_indices(shape, mesh.order):
            seq = tuple(ids[feat])
            key = tuple(sorted((seq[0], seq[-1])))
            seen[key].append(seq)
    n_boundary = 0
    for key, seqs in seen.items():
        if len(seqs) == 1:
            n_boundary += 1
        elif len(seqs) == 2:
            a, b = seqs
            if a != b and a != b[::-1]:
                raise RuntimeError(f"non-conforming shared edge {key}")
        else:
            raise RuntimeError(f"edge {key} shared by {len(seqs)} cells")
    return n_boundary


def cell_measures(mesh):
    """Length (lines) or area per cell, by 2p+2 quadrature."""
    out = np.empty(mesh.num_cells)
    for shape, (idx, conn) in mesh.cell_groups().items():
        ref = reference_element(shape, mesh.order)
        pts, wts = rule(shape, 2 * mesh.order + 2)
        G = ref.grad(pts)
        J = np.einsum("qnm,cnd->cqdm", G, mesh.nodes[conn])
        if shape == "line":
            ds = np.linalg.norm(J[:, :, :, 0], axis=2)
        elif mesh.ambient_dim == 3:
            ds = np.linalg.norm(np.cross(J[:, :, :, 0], J[:, :, :, 1]), axis=2)
        else:
            ds = np.abs(
                J[:, :, 0, 0] * J[:, :, 1, 1] - J[:, :, 0, 1] * J[:, :, 1, 0]
            )
        out[idx] = ds @ wts
    return out


@dataclass
class QualityReport:
    A_max: float
    A_min: float
    ratio: float
    h_max: float
    h_min: float
    max_angle: dict  # shape -> degrees

    def __str__(self):
        angles = ", ".join(f"{s}: {a:.1f} deg" for s, a in self.max_angle.items())
        return (
            f"A_max = {self.A_max:.4e}  A_min = {self.A_min:.4e}  "
            f"ratio = {self.ratio:.1f}\n"
            f"h_max = {self.h_max:.4e}  h_min = {self.h_min:.4e}  "
            f"max angles: {angles or 'n/a'}"
        )


def quality_report(mesh):
    """Element size and corner-angle statistics of a surface mesh."""
    areas = cell_measures(mesh)
    h_elem = np.empty(mesh.num_cells)
    max_angle = {}
    for shape, (idx, conn) in mesh.cell_groups().items():
        ref = reference_element(shape, mesh.order)
        X = mesh.nodes[conn]
        corners = ref.nodes[ref.corners]
        h_elem[idx] = _max_chord(ref, X)
        if shape == "line":
            continue
        G = ref.grad(corners)  # (ncorner, n, 2)
        J = np.einsum("qnm,cnd->cqdm", G, X)
        nc = len(ref.corners)
        worst = 0.0
        for k in range(nc):
            t_out = _edge_tangent(shape, k, J[:, k])
            t_in = -_edge_tangent(shape, (k - 1) % nc, J[:, k])
            cosang = np.einsum("cd,cd->c", t_out, t_in)
            ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
            worst = max(worst, float(ang.max()))
        max_angle[shape] = worst
    return QualityReport(
        A_max=float(areas.max()),
        A_min=float(areas.min()),
        ratio=float(areas.max() / areas.min()),
        h_max=float(h_elem.max()),
        h_min=float(h_elem.min()),
        max_angle=max_angle,
    )


def _edge_tangent(shape, k, J):
    """Unit tangent of local edge k at a corner, from the Jacobian there."""
    # reference edge directions, CCW
    if shape == "tri":
        dirs = [(1.0, 0.0), (-1.0, 1.0), (0.0, -1.0)]
    else:
        dirs = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]
    d = np.array(dirs[k])
    t = J @ d
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def _max_chord(ref, X):
    c = X[:, ref.corners]
    n = c.shape[1]
    best = np.zeros(c.shape[0])
    for i in range(n):
        for j in range(i + 1, n):
            best = np.maximum(best, np.linalg.norm(c[:, i] - c[:, j], axis=1))
    return best


# ---------------------------------------------------------------------------
# native format: exact round trip via hex floats


def export_native(mesh, path):
    with open(path, "w") as f:
        f.write("MFMESH v1\n")
        f.write(f"dim {mesh.ambient_dim}\n")
        f.write(f"order {mesh.order}\n")
        f.write(f"nodes {mesh.num_nodes}\n")
        for row in mesh.nodes:
            f.write(" ".join(float(v).hex() for v in row) + "\n")
        f.write(f"cells {mesh.num_cells}\n")
        for shape, ids in mesh.cells:
            f.write(shape + " " + " ".join(str(int(i)) for i in ids) + "\n")
        f.write(f"parents {mesh.num_cells}\n")
        if mesh.num_cells:
            f.write(" ".join(str(int(p)) for p in mesh.cell_parent) + "\n")
        f.write(f"boundary {len(mesh.boundary_edges)}\n")
        for ci, le, marker in mesh.boundary_edges:
            f.write(f"{ci} {le} {marker}\n")


def import_native(path):
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]

    pos = 0

    def take(prefix):
        nonlocal pos
        if pos >= len(lines) or not lines[pos].startswith(prefix):
            raise MeshFormatError(f"line {pos + 1}: expected '{prefix} ...'")
        parts = lines[pos].split()
        pos += 1
        return parts

    if take("MFMESH")[1] != "v1":
        raise MeshFormatError("line 1: unsupported version")
    dim = int(take("dim")[1])
    order = int(take("order")[1])
    n = int(take("nodes")[1])
    nodes = np.empty((n, dim))
    for i in range(n):
        try:
            nodes[i] = [float.fromhex(tok) for tok in lines[pos].split()]
        except ValueError as exc:
            raise MeshFormatError(f"line {pos + 1}: {exc}") from None
        pos += 1
    m = int(take("cells")[1])
    cells = []
    for _ in range(m):
        parts = lines[pos].split()
        pos += 1
        if parts[0] not in ("line", "tri", "quad"):
            raise MeshFormatError(f"line {pos}: unknown shape {parts[0]!r}")
        cells.append((parts[0], np.array([int(t) for t in parts[1:]], np.int64)))
    parents = [-1] * m
    if pos < len(lines) and lines[pos].startswith("parents"):
        pos += 1
        if m:
            parents = [int(t) for t in lines[pos].split()]
            pos += 1
    b = int(take("boundary")[1])
    boundary = []
    for _ in range(b):
        ci, le, marker = lines[pos].split(maxsplit=2)
        pos += 1
        try:
            marker = int(marker)
        except ValueError:
            pass
        boundary.append((int(ci), int(le), marker))
    mesh = SurfaceMesh(dim, order, nodes, cells, parents, boundary)
    _build_node_tags(mesh)
    return mesh


# ---------------------------------------------------------------------------
# visualization: legacy VTK with linear lattice subdivision


def _subcells(shape, p):
    """Linear sub-cells over the order-p lattice (local node indices)."""
    if shape == "line":
        return [(k, k + 1) for k in range(p)], 3
    if shape == "quad":
        def q(i, j):
            return j * (p + 1) + i
        return [
            (q(i, j), q(i + 1, j), q(i + 1, j + 1), q(i, j + 1))
            for j in range(p)
            for i in range(p)
        ], 9
    lattice = [(i, j) for j in range(p + 1) for i in range(p + 1 - j)]
    at = {ij: k for k, ij in enumerate(lattice)}
    tris = []
    for j in range(p):
        for i in range(p - j):
            tris.append((at[(i, j)], at[(i + 1, j)], at[(i, j + 1)]))
            if i + j < p - 1:
                tris.append((at[(i + 1, j)], at[(i + 1, j + 1)], at[(i, j + 1)]))
    return tris, 5


def export_visualization(mesh, path, point_data=None):
    """Legacy VTK unstructured grid with order-p cells split linearly.

    ``point_data``: optional dict name -> (num_nodes,) array.
    """
    p = mesh.order
    sub = []
    types = []
    for shape, ids in mesh.cells:
        local, vtk_type = _subcells(shape, p)
        for loc in local:
            sub.append([int(ids[i]) for i in loc])
            types.append(vtk_type)
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\nsurface mesh\nASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.num_nodes} double\n")
        for row in mesh.nodes:
            vals = list(row) + [0.0] * (3 - mesh.ambient_dim)
            f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")
        total = sum(len(s) + 1 for s in sub)
        f.write(f"CELLS {len(sub)} {total}\n")
        for s in sub:
            f.write(str(len(s)) + " " + " ".join(map(str, s)) + "\n")
        f.write(f"CELL_TYPES {len(sub)}\n")
        for t in types:
            f.write(f"{t}\n")
        if point_data:
            f.write(f"POINT_DATA {mesh.num_nodes}\n")
            for name, vals in point_data.items():
                f.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
                for v in np.asarray(vals):
                    f.write(f"{v:.17g}\n")
