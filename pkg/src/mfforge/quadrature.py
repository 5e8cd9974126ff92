"""Quadrature rules on the reference line, triangle and quadrilateral.

Lines and quads use tensor Gauss-Legendre; the triangle rule is a
Duffy-collapsed tensor rule.  ``rule(shape, degree)`` integrates reference
polynomials of the requested total degree exactly.
"""

from functools import lru_cache

import numpy as np


def gauss_01(n):
    """n-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def rule(shape, degree):
    """Quadrature points (nq, mdim) and weights (nq,) exact to ``degree``."""
    if shape == "line":
        n = degree // 2 + 1
        x, w = gauss_01(n)
        return x.reshape(-1, 1), w
    if shape == "quad":
        n = degree // 2 + 1
        x, w = gauss_01(n)
        u, v = np.meshgrid(x, x, indexing="ij")
        pts = np.column_stack([u.ravel(), v.ravel()])
        wts = np.outer(w, w).ravel()
        return pts, wts
    if shape == "tri":
        # Duffy map (u,v) -> (u(1-v), v): x^i y^j pulls back to degree
        # <= degree in u and degree+1 in v (including the 1-v weight).
        nu = degree // 2 + 1
        nv = (degree + 1) // 2 + 1
        xu, wu = gauss_01(nu)
        xv, wv = gauss_01(nv)
        u, v = np.meshgrid(xu, xv, indexing="ij")
        wgt = np.outer(wu, wv)
        r = u * (1.0 - v)
        s = v
        pts = np.column_stack([r.ravel(), s.ravel()])
        wts = (wgt * (1.0 - v)).ravel()
        return pts, wts
    raise ValueError(f"unknown shape {shape!r}")


def reference_measure(shape):
    return {"line": 1.0, "tri": 0.5, "quad": 1.0}[shape]
