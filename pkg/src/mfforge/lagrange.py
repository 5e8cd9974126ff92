"""Reference Lagrange elements (line, triangle, quadrilateral) up to order 6.

Nodes sit on the equispaced lattice of the reference element:

* line: ``r in [0, 1]``, nodes ``k/p``, index ``k``.
* triangle: vertices (0,0), (1,0), (0,1); node ``(i/p, j/p)`` for
  ``j = 0..p``, ``i = 0..p-j``, indexed row by row (j outer, i inner).
* quad: ``[0,1]^2``, node ``(i/p, j/p)`` with index ``j*(p+1) + i``.

Shape functions satisfy the Kronecker property on that lattice.  Triangle
bases are built from Silvester (equispaced simplex) polynomials, line and
quad bases from 1D Lagrange polynomials; both are exact for p <= 6.
"""

from functools import lru_cache

import numpy as np

MAX_ORDER = 6


def _lagrange_polys_1d(p):
    """1D Lagrange polynomials for nodes k/p on [0,1] (list of np.poly1d)."""
    nodes = np.arange(p + 1) / p
    polys = []
    for i in range(p + 1):
        others = np.delete(nodes, i)
        poly = np.poly1d(others, r=True)
        polys.append(poly / poly(nodes[i]))
    return polys


def _silvester_polys(p):
    """Silvester polynomials S_k(t) = prod_{m<k} (p t - m)/(k - m), k=0..p."""
    polys = [np.poly1d([1.0])]
    for k in range(1, p + 1):
        poly = np.poly1d([1.0])
        for m in range(k):
            poly *= np.poly1d([p, -m]) / (k - m)
        polys.append(poly)
    return polys


class ReferenceLine:
    shape = "line"
    manifold_dim = 1

    def __init__(self, p):
        self.p = p
        self.num_nodes = p + 1
        self.nodes = (np.arange(p + 1) / p).reshape(-1, 1)
        self._polys = _lagrange_polys_1d(p)
        self._dpolys = [poly.deriv() for poly in self._polys]
        self.corners = np.array([0, p])

    def eval(self, pts):
        pts = np.atleast_2d(pts)
        r = pts[:, 0]
        return np.stack([poly(r) for poly in self._polys], axis=1)

    def grad(self, pts):
        pts = np.atleast_2d(pts)
        r = pts[:, 0]
        return np.stack([poly(r) for poly in self._dpolys], axis=1)[:, :, None]


class ReferenceTriangle:
    shape = "tri"
    manifold_dim = 2

    def __init__(self, p):
        self.p = p
        self.num_nodes = (p + 1) * (p + 2) // 2
        idx = [(i, j) for j in range(p + 1) for i in range(p + 1 - j)]
        self._lattice = idx
        self.nodes = np.array([(i / p, j / p) for i, j in idx])
        self._S = _silvester_polys(p)
        self._dS = [poly.deriv() for poly in self._S]
        self.corners = np.array(
            [idx.index((0, 0)), idx.index((p, 0)), idx.index((0, p))]
        )

    def _bary(self, pts):
        r, s = pts[:, 0], pts[:, 1]
        return 1.0 - r - s, r, s

    def eval(self, pts):
        pts = np.atleast_2d(pts)
        l1, l2, l3 = self._bary(pts)
        p = self.p
        out = np.empty((pts.shape[0], self.num_nodes))
        for n, (i, j) in enumerate(self._lattice):
            k = p - i - j
            out[:, n] = self._S[k](l1) * self._S[i](l2) * self._S[j](l3)
        return out

    def grad(self, pts):
        pts = np.atleast_2d(pts)
        l1, l2, l3 = self._bary(pts)
        p = self.p
        out = np.empty((pts.shape[0], self.num_nodes, 2))
        # dl1/dr = -1, dl1/ds = -1, dl2/dr = 1, dl3/ds = 1
        for n, (i, j) in enumerate(self._lattice):
            k = p - i - j
            a, b, c = self._S[k](l1), self._S[i](l2), self._S[j](l3)
            da, db, dc = self._dS[k](l1), self._dS[i](l2), self._dS[j](l3)
            out[:, n, 0] = -da * b * c + a * db * c
            out[:, n, 1] = -da * b * c + a * b * dc
        return out


class ReferenceQuad:
    shape = "quad"
    manifold_dim = 2

    def __init__(self, p):
        self.p = p
        self.num_nodes = (p + 1) ** 2
        nodes = [(i / p, j / p) for j in range(p + 1) for i in range(p + 1)]
        self.nodes = np.array(nodes)
        self._polys = _lagrange_polys_1d(p)
        self._dpolys = [poly.deriv() for poly in self._polys]
        self.corners = np.array(
            [0, p, (p + 1) ** 2 - 1, p * (p + 1)]
        )

    def eval(self, pts):
        pts = np.atleast_2d(pts)
        u, v = pts[:, 0], pts[:, 1]
        lu = np.stack([poly(u) for poly in self._polys], axis=1)
        lv = np.stack([poly(v) for poly in self._polys], axis=1)
        return np.einsum("qj,qi->qji", lv, lu).reshape(pts.shape[0], -1)

    def grad(self, pts):
        pts = np.atleast_2d(pts)
        u, v = pts[:, 0], pts[:, 1]
        lu = np.stack([poly(u) for poly in self._polys], axis=1)
        lv = np.stack([poly(v) for poly in self._polys], axis=1)
        du = np.stack([poly(u) for poly in self._dpolys], axis=1)
        dv = np.stack([poly(v) for poly in self._dpolys], axis=1)
        gu = np.einsum("qj,qi->qji", lv, du).reshape(pts.shape[0], -1)
        gv = np.einsum("qj,qi->qji", dv, lu).reshape(pts.shape[0], -1)
        return np.stack([gu, gv], axis=2)


@lru_cache(maxsize=None)
def reference_element(shape, p):
    if not 1 <= p <= MAX_ORDER:
        raise ValueError(f"order must be in [1, {MAX_ORDER}], got {p}")
    if shape == "line":
        return ReferenceLine(p)
    if shape == "tri":
        return ReferenceTriangle(p)
    if shape == "quad":
        return ReferenceQuad(p)
    raise ValueError(f"unknown element shape {shape!r}")


@lru_cache(maxsize=None)
def edge_node_indices(shape, p):
    """Per local edge, the lattice indices along it (corners included).

    Edges run counterclockwise around the reference element:
    tri:  (0,0)->(1,0), (1,0)->(0,1), (0,1)->(0,0)
    quad: (0,0)->(1,0), (1,0)->(1,1), (1,1)->(0,1), (0,1)->(0,0)
    """
    if shape == "tri":
        lattice = [(i, j) for j in range(p + 1) for i in range(p + 1 - j)]
        pos = {ij: n for n, ij in enumerate(lattice)}
        e0 = [pos[(i, 0)] for i in range(p + 1)]
        e1 = [pos[(p - j, j)] for j in range(p + 1)]
        e2 = [pos[(0, p - j)] for j in range(p + 1)]
        return (np.array(e0), np.array(e1), np.array(e2))
    if shape == "quad":
        def pos(i, j):
            return j * (p + 1) + i
        e0 = [pos(i, 0) for i in range(p + 1)]
        e1 = [pos(p, j) for j in range(p + 1)]
        e2 = [pos(p - i, p) for i in range(p + 1)]
        e3 = [pos(0, p - j) for j in range(p + 1)]
        return (np.array(e0), np.array(e1), np.array(e2), np.array(e3))
    if shape == "line":
        return (np.arange(p + 1),)
    raise ValueError(shape)


@lru_cache(maxsize=None)
def interior_node_indices(shape, p):
    """Lattice indices not lying on any edge."""
    ref = reference_element(shape, p)
    on_edge = np.zeros(ref.num_nodes, dtype=bool)
    for edge in edge_node_indices(shape, p):
        on_edge[edge] = True
    return np.flatnonzero(~on_edge)


def eval_edge_curve(edge_coords, t):
    """Evaluate the degree-p curve through ``edge_coords`` at parameters t.

    edge_coords: (p+1, d) nodes at equispaced parameters on [0, 1].
    t: (m,) parameters.  Returns (m, d).
    """
    p = edge_coords.shape[0] - 1
    ref = reference_element("line", p)
    basis = ref.eval(np.asarray(t, dtype=float).reshape(-1, 1))
    return basis @ edge_coords
