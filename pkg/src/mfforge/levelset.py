"""Analytic level-set fields and the master/slave manifold definition.

A master field defines the manifold shape through its zero set; slave
fields bound it: the manifold consists of the points where the master
vanishes and every slave is non-positive.  Fields are immutable and accept
single points ``(d,)`` or batches ``(n, d)``.
"""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise DimensionError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class LevelSetField:
    """Scalar field with analytic gradient.

    ``evaluate`` maps ``(..., d) -> (...)`` and ``gradient`` maps
    ``(..., d) -> (..., d)``; both must broadcast over leading axes.
    """

    evaluate: Callable
    gradient: Callable
    dim: int
    role: str = "master"
    id: int = 0

    def __call__(self, x):
        return self.evaluate(_as_points(x, self.dim))

    def grad(self, x):
        return self.gradient(_as_points(x, self.dim))


@dataclass(frozen=True)
class ManifoldDefinition:
    master: LevelSetField
    slaves: Sequence[LevelSetField] = field(default_factory=tuple)
    ambient_dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "slaves", tuple(self.slaves))
        if self.master.role != "master":
            raise ValueError("master field must have role 'master'")
        ids = [s.id for s in self.slaves]
        if len(set(ids)) != len(ids):
            raise ValueError("slave ids must be unique")
        for f in (self.master, *self.slaves):
            if f.dim != self.ambient_dim:
                raise DimensionError("field dimension does not match ambient_dim")


def eval_master(definition, x):
    """phi(x) of the master field."""
    return definition.master(_as_points(x, definition.ambient_dim))


def eval_slaves(definition, x):
    """[psi_1(x), psi_2(x), ...] in slave order (empty if no slaves)."""
    x = _as_points(x, definition.ambient_dim)
    return [s(x) for s in definition.slaves]


def inside_manifold(definition, x, tol=0.0):
    """True where every slave satisfies psi(x) <= tol."""
    if tol < 0:
        raise ValueError("tol must be >= 0")
    x = _as_points(x, definition.ambient_dim)
    ok = np.ones(x.shape[:-1], dtype=bool)
    for s in definition.slaves:
        ok &= s(x) <= tol
    if ok.shape == ():
        return bool(ok)
    return ok


def check_gradient(fld, points, rel_tol=1e-5, step=None):
    """Compare analytic gradient against central differences.

    Returns the worst relative error over the sample; raises if it exceeds
    ``rel_tol``.  ``step`` defaults to 1e-6 times the sample diameter.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if step is None:
        diam = np.linalg.norm(points.max(axis=0) - points.min(axis=0))
        step = 1e-6 * max(diam, 1.0)
    g_ana = fld.grad(points)
    g_fd = np.empty_like(g_ana)
    for k in range(points.shape[1]):
        hi = points.copy()
        lo = points.copy()
        hi[:, k] += step
        lo[:, k] -= step
        g_fd[:, k] = (fld(hi) - fld(lo)) / (2.0 * step)
    scale = np.maximum(np.linalg.norm(g_ana, axis=1), 1e-30)
    err = np.linalg.norm(g_ana - g_fd, axis=1) / scale
    worst = float(err.max())
    if worst > rel_tol:
        i = int(err.argmax())
        raise AssertionError(
            f"gradient inconsistency {worst:.3e} at point {points[i]}"
        )
    return worst


def field_from_callables(value, grad, dim, role="master", fid=0):
    """Wrap plain callables into a LevelSetField (vectorized over points)."""
    return LevelSetField(evaluate=value, gradient=grad, dim=dim, role=role, id=fid)


def sphere_field(radius=1.0, dim=3):
    """phi(x) = ||x|| - radius (circle in 2D, sphere in 3D)."""

    def value(x):
        return np.linalg.norm(x, axis=-1) - radius

    def grad(x):
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        return x / np.where(r == 0.0, 1.0, r)

    return LevelSetField(value, grad, dim=dim, role="master")


def plane_field(point, normal, dim=3, role="slave", fid=0):
    """psi(x) = <x - point, normal>."""
    point = np.asarray(point, dtype=float)
    normal = np.asarray(normal, dtype=float)

    def value(x):
        return (x - point) @ normal

    def grad(x):
        return np.broadcast_to(normal, x.shape).copy()

    return LevelSetField(value, grad, dim=dim, role=role, id=fid)
