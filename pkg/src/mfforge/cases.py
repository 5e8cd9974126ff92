"""Registry of built-in benchmark cases.

Each case bundles the implicit geometry (master + slave level-set
fields), the bounding box of the background mesh, a manufactured exact
solution with its source term where available, boundary-condition kind,
and optional transport parameters.  Sources without a printable closed
form are derived symbolically from the local Laplace-Beltrami expression

    -1/sqrt(det G) * d/dxi_i ( G^{ij} sqrt(det G) du/dxi_j ) = f

applied to a parametrization of the manifold; ``apply_lb_local`` provides
an independent finite-difference evaluation of the same expression for
cross-checks.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy as sym

from .levelset import ManifoldDefinition, field_from_callables, plane_field, sphere_field


class UnknownCaseError(LookupError):
    """Requested case name is not registered."""


@dataclass(frozen=True)
class TransportSpec:
    """Parameters of an instationary advection-diffusion run."""

    velocity: object  # (N, d) points -> (N, d) vectors
    diffusivity: float
    initial: object  # (N, d) points -> (N,)
    t_end: float = 1.0
    n_steps: int = 4096
    exact: object = None  # (points, t) -> values, or None
    inflow_marker: object = None  # boundary marker carrying Dirichlet data
    inflow_value: float = 0.0
    checkpoints: tuple = ()


@dataclass(frozen=True)
class CaseSpec:
    """Complete description of one benchmark problem."""

    name: str
    manifold: ManifoldDefinition
    box_lo: tuple
    box_hi: tuple
    h_sweep: tuple  # desk-scale default
    h_sweep_full: tuple
    exact: object = None  # (N, d) -> (N,) or None
    source: object = None
    bc: str = "none"  # "zero-mean" | "dirichlet" | "none"
    dirichlet: object = None  # (N, d) -> (N,), used when bc == "dirichlet"
    transport: TransportSpec = None
    pin_box_nodes: bool = False  # freeze box-boundary vertices; snap near-surface vertices
    relocate_slaves: bool = False  # clear bands around slave zero-sets too

    def divisions(self, h):
        """Per-axis division counts for a background spacing of ``h``."""
        lo = np.asarray(self.box_lo, dtype=float)
        hi = np.asarray(self.box_hi, dtype=float)
        div = (hi - lo) / h
        rounded = np.rint(div).astype(int)
        if not np.allclose(div, rounded, atol=1e-9):
            raise ValueError(f"h={h} does not divide the box extents {hi - lo}")
        return tuple(int(d) for d in rounded)


# ---------------------------------------------------------------------------
# finite-difference Laplace-Beltrami in local coordinates (oracle)


def _fd_gradient(fun, xi, step):
    """4th-order central differences of fun (N,m)->(N,...) w.r.t. xi."""
    xi = np.asarray(xi, dtype=float)
    m = xi.shape[1]
    out = []
    for j in range(m):
        e = np.zeros(m)
        e[j] = step
        f1 = np.asarray(fun(xi + e))
        f_1 = np.asarray(fun(xi - e))
        f2 = np.asarray(fun(xi + 2 * e))
        f_2 = np.asarray(fun(xi - 2 * e))
        out.append((8 * (f1 - f_1) - (f2 - f_2)) / (12 * step))
    return np.stack(out, axis=-1)


def apply_lb_local(param, u, nparams, step=1e-4):
    """Numeric -Laplace-Beltrami of ``u`` along a parametrized manifold.

    ``param`` maps (N, nparams) parameters to (N, d) ambient points and
    ``u`` maps parameters to values.  Returns f(xi) = -Delta_Gamma u at
    the given parameters via nested high-order central differences.
    """

    def metric(xi):
        J = _fd_gradient(param, xi, step)  # (N, d, m)
        G = np.einsum("ndi,ndj->nij", J, J)
        detG = np.linalg.det(G)
        if (detG <= 0).any():
            raise ValueError("near-singular metric in local Laplace-Beltrami")
        return G, detG

    def flux(xi):
        G, detG = metric(xi)
        du = _fd_gradient(u, xi, step)  # (N, m)
        coef = np.linalg.solve(G, du[..., None])[..., 0]
        return coef * np.sqrt(detG)[:, None]  # (N, m)

    def evaluate(xi):
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        _, detG = metric(xi)
        div = 0.0
        mdim = xi.shape[1]
        for j in range(mdim):
            dflux = _fd_gradient(lambda z, j=j: flux(z)[:, j], xi, step)
            div = div + dflux[:, j]
        return -div / np.sqrt(detG)

    return evaluate


# ---------------------------------------------------------------------------
# symbolic sources


def _lb_symbolic(coords, xmap, u_expr):
    """Closed-form -Laplace-Beltrami of u_expr on the parametrized manifold."""
    m = len(coords)
    J = sym.Matrix([[sym.diff(xc, q) for q in coords] for xc in xmap])
    G = (J.T * J).applyfunc(sym.simplify)
    detG = G.det()
    Ginv = G.inv()
    sq = sym.sqrt(detG)
    div = sym.S.Zero
    for i in range(m):
        term = sym.S.Zero
        for j in range(m):
            term += Ginv[i, j] * sq * sym.diff(u_expr, coords[j])
        div += sym.diff(term, coords[i])
    return -div / sq


# ---------------------------------------------------------------------------
# individual cases


def _angle(x):
    return np.arctan2(x[..., 1], x[..., 0])


def _circle_case():
    manifold = ManifoldDefinition(master=sphere_field(1.0, 2), ambient_dim=2)

    def exact(x):
        return 12.0 * np.sin(3.0 * _angle(x))

    def source(x):
        return 108.0 / (x**2).sum(axis=-1) * np.sin(3.0 * _angle(x))

    sweep = tuple(1.0 / d for d in (4, 8, 16, 32, 64, 128, 256))
    return CaseSpec(
        name="circle",
        manifold=manifold,
        box_lo=(-1.5, -1.5),
        box_hi=(1.5, 1.5),
        h_sweep=sweep,
        h_sweep_full=sweep + (1.0 / 512,),
        exact=exact,
        source=source,
        bc="zero-mean",
    )


def _flower_case():
    # R(theta) = 0.5 + 0.1 sin(8 theta); u = 12 sin(3 theta)
    def radius(theta):
        return 0.5 + 0.1 * np.sin(8.0 * theta)

    def value(x):
        return np.linalg.norm(x, axis=-1) - radius(_angle(x))

    def gradient(x):
        # the gradient is singular at the origin, far inside the curve;
        # clamp so stray evaluations there stay finite
        r = np.maximum(np.linalg.norm(x, axis=-1), 1e-12)
        th = _angle(x)
        dR = 0.8 * np.cos(8.0 * th)
        # d theta/dx = (-y, x)/r^2
        g = np.empty_like(x)
        g[..., 0] = x[..., 0] / r + dR * x[..., 1] / r**2
        g[..., 1] = x[..., 1] / r - dR * x[..., 0] / r**2
        return g

    manifold = ManifoldDefinition(master=field_from_callables(value, gradient, 2), ambient_dim=2)

    th = sym.Symbol("theta")
    R = sym.Rational(1, 2) + sym.Rational(1, 10) * sym.sin(8 * th)
    xmap = [R * sym.cos(th), R * sym.sin(th)]
    f_expr = sym.simplify(_lb_symbolic([th], xmap, 12 * sym.sin(3 * th)))
    f_theta = sym.lambdify(th, f_expr, "numpy")

    def exact(x):
        return 12.0 * np.sin(3.0 * _angle(x))

    def source(x):
        return f_theta(_angle(x))

    sweep = tuple(0.5 / d for d in (32, 64, 128, 256))
    full = tuple(0.5 / d for d in (32, 64, 128, 256, 512, 1024, 2048))
    return CaseSpec(
        name="flower",
        manifold=manifold,
        box_lo=(-0.75, -0.75),
        box_hi=(0.75, 0.75),
        h_sweep=sweep,
        h_sweep_full=full,
        exact=exact,
        source=source,
        bc="zero-mean",
    )


def _sline_curve():
    t = sym.Symbol("t")
    f = t**3 / 2 + sym.sin(sym.pi * (1 - t)) * sym.sin(sym.pi * (1 - t) / 2) ** 5 - sym.Rational(1, 4)
    return t, f


def _sline_fields():
    t, f = _sline_curve()
    fn = sym.lambdify(t, f, "numpy")
    dfn = sym.lambdify(t, sym.diff(f, t), "numpy")

    def value(x):
        return fn(x[..., 0]) - x[..., 1]

    def gradient(x):
        g = np.empty_like(x)
        g[..., 0] = dfn(x[..., 0])
        g[..., 1] = -1.0
        return g

    master = field_from_callables(value, gradient, 2)
    # lower bound y >= -1/4 and upper bound y <= 1/4, both kept as psi <= 0
    lower = plane_field((0.0, -0.25), (0.0, -1.0), 2, role="slave", fid=1)
    upper = plane_field((0.0, 0.25), (0.0, 1.0), 2, role="slave", fid=2)
    return ManifoldDefinition(master=master, slaves=(lower, upper), ambient_dim=2), fn, dfn


def _sline_case():
    manifold, fn, dfn = _sline_fields()
    t, f = _sline_curve()
    f_expr = _lb_symbolic([t], [t, f], sym.exp(2 * t))
    f_t = sym.lambdify(t, f_expr, "numpy")

    def exact(x):
        return np.exp(2.0 * x[..., 0])

    def source(x):
        return f_t(x[..., 0])

    sweep = tuple(1.0 / d for d in (8, 16, 32, 64))
    return CaseSpec(
        name="sline",
        manifold=manifold,
        box_lo=(-0.5, -0.75),
        box_hi=(1.5, 0.75),
        h_sweep=sweep,
        h_sweep_full=sweep + (1.0 / 128,),
        exact=exact,
        source=source,
        bc="dirichlet",
        dirichlet=exact,
        relocate_slaves=True,
    )


def _quarter_cylinder_case():
    L = 4.0
    alpha = 3.0
    beta = 1.0 / (1.5 - np.sqrt(2.0))

    def value(x):
        return np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2) - 1.0

    def gradient(x):
        # the axis r = 0 runs along a box edge; clamp to keep stray
        # evaluations there finite
        r = np.maximum(np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2), 1e-12)
        g = np.zeros_like(x)
        g[..., 0] = x[..., 0] / r
        g[..., 1] = x[..., 1] / r
        return g

    manifold = ManifoldDefinition(master=field_from_callables(value, gradient, 3))

    def exact(x):
        phi = np.arctan2(x[..., 1], x[..., 0])
        return beta * (1 - np.cos(phi)) * (1 - np.sin(phi)) * np.sin(alpha * np.pi * x[..., 2] / L)

    def source(x):
        phi = np.arctan2(x[..., 1], x[..., 0])
        g1 = (1 - np.cos(phi)) * (1 - np.sin(phi))
        g2 = np.cos(phi) + np.sin(phi) - 4 * np.sin(phi) * np.cos(phi)
        gz = np.sin(alpha * np.pi * x[..., 2] / L)
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        return beta * gz * ((alpha * np.pi / L) ** 2 * g1 - g2 / r2)

    sweep = tuple(1.0 / d for d in (4, 8, 16, 32))
    return CaseSpec(
        name="quarter-cylinder",
        manifold=manifold,
        box_lo=(0.0, 0.0, 0.0),
        box_hi=(1.0, 1.0, L),
        h_sweep=sweep,
        h_sweep_full=sweep + (1.0 / 64, 1.0 / 128),
        exact=exact,
        source=source,
        bc="dirichlet",
        dirichlet=lambda x: np.zeros(x.shape[0]),
        pin_box_nodes=True,
    )


def _sphere_angles(x):
    r = np.linalg.norm(x, axis=-1)
    theta = np.arccos(np.clip(x[..., 2] / r, -1.0, 1.0))
    phi = np.arctan2(x[..., 1], x[..., 0])
    return r, theta, phi


def _sphere_case():
    manifold = ManifoldDefinition(master=sphere_field(1.0, 3))

    def exact(x):
        _, theta, phi = _sphere_angles(x)
        return np.sin(3 * theta) * (np.cos(phi) - np.sin(phi))

    def source(x):
        # -(2 sqrt2 / sin t) cos(pi/4 + p)(24 cos^4 t - 29 cos^2 t + 5)
        # rewritten with 24c^4-29c^2+5 = (c^2-1)(24c^2-5) = -sin^2 t (24c^2-5),
        # which removes the pole singularity entirely.
        r, theta, phi = _sphere_angles(x)
        ct = np.cos(theta)
        return (
            2 * np.sqrt(2.0)
            * np.sin(theta)
            * np.cos(np.pi / 4 + phi)
            * (24 * ct**2 - 5)
            / r**2
        )

    sweep = tuple(1.0 / d for d in (4, 8, 16, 32))
    return CaseSpec(
        name="sphere",
        manifold=manifold,
        box_lo=(-1.5, -1.5, -1.5),
        box_hi=(1.5, 1.5, 1.5),
        h_sweep=sweep,
        h_sweep_full=sweep + (1.0 / 64,),
        exact=exact,
        source=source,
        bc="zero-mean",
    )


def _hp_surface():
    xs, ys = sym.symbols("x y")
    F = (xs**2 - ys**2) / 2 + sym.Rational(3, 20) * sym.sin(2 * sym.pi * xs) * sym.sin(2 * sym.pi * ys)
    return xs, ys, F


def _hp_fields():
    xs, ys, F = _hp_surface()
    Fn = sym.lambdify((xs, ys), F, "numpy")
    Fx = sym.lambdify((xs, ys), sym.diff(F, xs), "numpy")
    Fy = sym.lambdify((xs, ys), sym.diff(F, ys), "numpy")

    def value(x):
        return Fn(x[..., 0], x[..., 1]) - x[..., 2]

    def gradient(x):
        g = np.empty_like(x)
        g[..., 0] = Fx(x[..., 0], x[..., 1])
        g[..., 1] = Fy(x[..., 0], x[..., 1])
        g[..., 2] = -1.0
        return g

    master = field_from_callables(value, gradient, 3)
    slaves = (
        plane_field((0.5, 0.0, 0.0), (1.0, 0.0, 0.0), 3, role="slave", fid=1),
        plane_field((0.0, 0.5, 0.0), (0.0, 1.0, 0.0), 3, role="slave", fid=2),
        plane_field((-0.5, 0.0, 0.0), (-1.0, 0.0, 0.0), 3, role="slave", fid=3),
        plane_field((0.0, -0.5, 0.0), (0.0, -1.0, 0.0), 3, role="slave", fid=4),
    )
    return ManifoldDefinition(master=master, slaves=slaves), Fn, Fx, Fy


def _hp_case():
    manifold, Fn, Fx, Fy = _hp_fields()
    xs, ys, F = _hp_surface()
    u_expr = sym.sin(sym.pi * (xs - sym.Rational(1, 2))) * sym.sin(sym.pi * (ys - sym.Rational(1, 2)))
    f_expr = _lb_symbolic([xs, ys], [xs, ys, F], u_expr)
    f_xy = sym.lambdify((xs, ys), f_expr, "numpy")

    def exact(x):
        return np.sin(np.pi * (x[..., 0] - 0.5)) * np.sin(np.pi * (x[..., 1] - 0.5))

    def source(x):
        return f_xy(x[..., 0], x[..., 1])

    sweep = (0.15, 0.075, 0.0375)
    return CaseSpec(
        name="hyperbolic-paraboloid",
        manifold=manifold,
        box_lo=(-0.75, -0.75, -0.45),
        box_hi=(0.75, 0.75, 0.45),
        h_sweep=sweep,
        h_sweep_full=sweep + (0.01875,),
        exact=exact,
        source=source,
        bc="dirichlet",
        dirichlet=exact,
        relocate_slaves=True,
    )


def _wrap_angle(a):
    return np.mod(a + np.pi, 2 * np.pi) - np.pi


def _advect_circle_case():
    base = _circle_case()
    speed = 5.0

    def velocity(x):
        r = np.linalg.norm(x, axis=1, keepdims=True)
        return speed * np.column_stack([-x[..., 1], x[..., 0]]) / r

    def initial(x):
        return np.exp(-4.0 * _angle(x) ** 2)

    def exact(x, t):
        return np.exp(-4.0 * _wrap_angle(_angle(x) - speed * t) ** 2)

    transport = TransportSpec(
        velocity=velocity,
        diffusivity=0.0,
        initial=initial,
        exact=exact,
        checkpoints=(0.0, 0.2, 1.0),
    )
    return CaseSpec(
        name="advect-circle",
        manifold=base.manifold,
        box_lo=base.box_lo,
        box_hi=base.box_hi,
        h_sweep=tuple(1.0 / d for d in (4, 8, 16, 32)),
        h_sweep_full=base.h_sweep_full,
        transport=transport,
    )


def _advect_sphere_case():
    base = _sphere_case()
    c = -7.0 / 8.0

    def velocity(x):
        return c * np.column_stack([x[..., 2], np.zeros(x.shape[0]), -x[..., 0]])

    def initial(x):
        _, theta, _ = _sphere_angles(x)
        return np.exp(-4.0 * theta**2)

    def exact(x, t):
        # velocity field rotates points in the xz-plane; pull x back by
        # the inverse rotation and evaluate the initial profile
        a = c * t
        x0 = np.column_stack(
            [
                np.cos(a) * x[..., 0] - np.sin(a) * x[..., 2],
                x[..., 1],
                np.sin(a) * x[..., 0] + np.cos(a) * x[..., 2],
            ]
        )
        return initial(x0)

    transport = TransportSpec(
        velocity=velocity,
        diffusivity=0.0,
        initial=initial,
        exact=exact,
        checkpoints=(0.0, 0.5, 1.0),
    )
    return CaseSpec(
        name="advect-sphere",
        manifold=base.manifold,
        box_lo=base.box_lo,
        box_hi=base.box_hi,
        h_sweep=tuple(1.0 / d for d in (4, 8, 16)),
        h_sweep_full=base.h_sweep_full,
        transport=transport,
    )


def _transport_sline_case():
    base = _sline_case()
    manifold, fn, dfn = _sline_fields()

    def velocity(x):
        d = dfn(x[..., 0])
        s = np.sqrt(1.0 + d**2)
        return np.column_stack([1.0 / s, d / s])

    transport = TransportSpec(
        velocity=velocity,
        diffusivity=0.15,
        initial=lambda x: np.zeros(x.shape[0]),
        inflow_marker=1,  # the y = -1/4 bound, where the velocity enters
        inflow_value=1.0,
        checkpoints=(0.0, 0.19, 1.0),
    )
    return CaseSpec(
        name="transport-sline",
        manifold=manifold,
        box_lo=base.box_lo,
        box_hi=base.box_hi,
        h_sweep=base.h_sweep,
        h_sweep_full=base.h_sweep_full,
        transport=transport,
        relocate_slaves=True,
    )


def _transport_hp_case():
    manifold, Fn, Fx, Fy = _hp_fields()
    base_sweep = (0.15, 0.075, 0.0375)

    def velocity(x):
        # tangential unit direction of +y on the graph z = F(x, y), scaled
        fy = Fy(x[..., 0], x[..., 1])
        s = np.sqrt(1.0 + fy**2)
        return 1.25 * np.column_stack([np.zeros(x.shape[0]), 1.0 / s, fy / s])

    transport = TransportSpec(
        velocity=velocity,
        diffusivity=0.01,
        initial=lambda x: 0.5 * np.exp(-10.0 * (x[..., 0] ** 2 + x[..., 1] ** 2)),
        checkpoints=(0.0, 0.49, 1.0),
    )
    return CaseSpec(
        name="transport-hp",
        manifold=manifold,
        box_lo=(-0.75, -0.75, -0.45),
        box_hi=(0.75, 0.75, 0.45),
        h_sweep=base_sweep,
        h_sweep_full=base_sweep + (0.01875,),
        transport=transport,
        relocate_slaves=True,
    )


_BUILDERS = {
    "circle": _circle_case,
    "flower": _flower_case,
    "sline": _sline_case,
    "quarter-cylinder": _quarter_cylinder_case,
    "sphere": _sphere_case,
    "hyperbolic-paraboloid": _hp_case,
    "advect-circle": _advect_circle_case,
    "advect-sphere": _advect_sphere_case,
    "transport-sline": _transport_sline_case,
    "transport-hp": _transport_hp_case,
}


def case_names():
    return sorted(_BUILDERS)


@lru_cache(maxsize=None)
def get_case(name):
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise UnknownCaseError(
            f"unknown case {name!r}; available: {', '.join(case_names())}"
        ) from None
    return builder()
