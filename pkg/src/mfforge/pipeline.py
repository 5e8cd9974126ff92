"""High-level drivers tying geometry, meshing, and solvers together.

``build_surface_mesh`` runs the full meshing chain for a registered case
(background box mesh, node relocation, element reconstruction, slave
restriction, node unification); ``solve_poisson`` and ``solve_transport``
run the stationary and instationary solvers on such a mesh; and
``run_convergence`` sweeps mesh sizes and polynomial orders, collecting
errors, rates, and quality numbers into plain-dict records suitable for
CSV output.
"""

import time
from dataclasses import dataclass

import numpy as np

from .background import build_box_mesh, default_relocation_params, relocate_nodes
from .cases import CaseSpec, get_case
from .fem import (
    LinearSystem,
    assemble_advection,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    condition_estimate,
    l2_error,
    solve_direct,
)
from .meshgen import quality_report, unify_nodes
from .reconstruct import reconstruct_surface
from .restrict import restrict_elements
from .timeint import TransientProblem, integrate


def _resolve_case(case):
    return get_case(case) if isinstance(case, str) else case


@dataclass
class MeshResult:
    case: CaseSpec
    h: float
    order: int
    mesh: object
    background: object
    sweeps: int
    relocated: bool
    quality: object
    seconds: float


@dataclass
class PoissonResult:
    mesh_result: MeshResult
    u: np.ndarray
    error_l2: float
    exact_norm: float
    condition: float = None
    seconds: float = 0.0

    @property
    def error_rel(self):
        return self.error_l2 / self.exact_norm if self.exact_norm else self.error_l2


@dataclass
class TransportResult:
    mesh_result: MeshResult
    u_final: np.ndarray
    snapshots: dict
    times: tuple
    error_l2: float = None
    mass_initial: float = None
    mass_final: float = None
    seconds: float = 0.0


def build_surface_mesh(case, h, order, relocate=True, background=None):
    """Mesh one case at background spacing ``h`` and element order ``order``.

    ``background`` may carry an already relocated BackgroundMesh of the
    same spacing (its vertices are reused, skipping the relocation cost
    when sweeping orders).
    """
    case = _resolve_case(case)
    t0 = time.perf_counter()
    bg = build_box_mesh(case.box_lo, case.box_hi, case.divisions(h), order)
    sweeps = 0
    if background is not None:
        if background.divisions != bg.divisions:
            raise ValueError("cached background has different divisions")
        bg = bg.copy()
        bg.vertices[:] = background.vertices
    elif relocate:
        frozen = None
        if case.pin_box_nodes:
            # the surface is tangent to box planes: boundary vertices cannot
            # leave the band, so keep them fixed and let snapping absorb them
            bmask = bg.boundary_vertex_mask().any(axis=1)
            frozen = np.repeat(bmask[:, None], bg.vertices.shape[1], axis=1)
        fields = [case.manifold.master]
        if case.relocate_slaves:
            fields += list(case.manifold.slaves)
        for fld in fields:
            bg, used, _ = relocate_nodes(
                bg, fld, default_relocation_params(bg.h), frozen=frozen
            )
            sweeps += used
    snap_tol = None
    if case.pin_box_nodes:
        snap_tol = 0.25 * bg.h
    elems, registry = reconstruct_surface(
        bg, case.manifold.master, order, snap_tol=snap_tol
    )
    if case.manifold.slaves:
        elems = restrict_elements(elems, list(case.manifold.slaves), registry=registry)
    mesh = unify_nodes(elems, bg.lo, bg.hi)
    return MeshResult(
        case=case,
        h=bg.h,
        order=order,
        mesh=mesh,
        background=bg,
        sweeps=sweeps,
        relocated=relocate,
        quality=quality_report(mesh),
        seconds=time.perf_counter() - t0,
    )


def _dirichlet_nodes(mesh):
    """All nodes carrying any boundary marker, sorted."""
    return np.array(sorted(mesh.node_tags), dtype=np.int64)


def solve_poisson(case, mesh_result, compute_condition=False):
    """Solve -Laplace_Gamma u = f on a built mesh; returns a PoissonResult."""
    case = _resolve_case(case)
    if case.source is None:
        raise ValueError(f"case {case.name!r} has no stationary source term")
    mesh = mesh_result.mesh
    t0 = time.perf_counter()
    K = assemble_stiffness(mesh)
    b = assemble_load(mesh, case.source)
    system = LinearSystem(K, b)
    if case.bc == "zero-mean":
        system.apply_zero_mean(assemble_mass(mesh))
    elif case.bc == "dirichlet":
        nodes = _dirichlet_nodes(mesh)
        system.apply_dirichlet(nodes, case.dirichlet(mesh.nodes[nodes]))
    else:
        raise ValueError(f"case {case.name!r} has no boundary-condition kind")
    u, _ = solve_direct(system)
    err = l2_error(mesh, u, case.exact)
    norm = l2_error(mesh, np.zeros_like(u), case.exact)
    cond = None
    if compute_condition:
        cond, _ = condition_estimate(system.matrix)
    return PoissonResult(
        mesh_result=mesh_result,
        u=u,
        error_l2=err,
        exact_norm=norm,
        condition=cond,
        seconds=time.perf_counter() - t0,
    )


def solve_transport(case, mesh_result, n_steps=None, checkpoints=None):
    """Run the instationary advection-diffusion solver for a transport case."""
    case = _resolve_case(case)
    tr = case.transport
    if tr is None:
        raise ValueError(f"case {case.name!r} has no transport parameters")
    mesh = mesh_result.mesh
    t0 = time.perf_counter()
    M = assemble_mass(mesh)
    K = assemble_stiffness(mesh) if tr.diffusivity != 0.0 else None
    C = assemble_advection(mesh, tr.velocity)
    u0 = np.asarray(tr.initial(mesh.nodes), dtype=float)
    dirichlet = None
    if tr.inflow_marker is not None:
        nodes = mesh.tagged_nodes(tr.inflow_marker)
        value = tr.inflow_value
        dirichlet = (nodes, lambda t: np.full(nodes.shape[0], value))
    problem = TransientProblem(
        mass=M,
        stiffness=K,
        advection=C,
        diffusivity=tr.diffusivity,
        u0=u0,
        t_end=tr.t_end,
        n_steps=tr.n_steps if n_steps is None else int(n_steps),
        dirichlet=dirichlet,
    )
    marks = tr.checkpoints if checkpoints is None else tuple(checkpoints)
    u, snaps = integrate(problem, checkpoints=marks)
    w = np.asarray(M.sum(axis=1)).ravel()
    err = None
    if tr.exact is not None:
        err = l2_error(mesh, u, lambda x: tr.exact(x, tr.t_end))
    return TransportResult(
        mesh_result=mesh_result,
        u_final=u,
        snapshots=snaps,
        times=tuple(sorted(snaps)),
        error_l2=err,
        mass_initial=float(w @ u0),
        mass_final=float(w @ u),
        seconds=time.perf_counter() - t0,
    )


def convergence_rates(hs, errors):
    """Observed orders between consecutive sweep levels (len(hs) - 1 values)."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    return list(np.log(errors[:-1] / errors[1:]) / np.log(hs[:-1] / hs[1:]))


def run_convergence(
    case,
    orders,
    h_values=None,
    relocate=True,
    compute_condition=False,
    n_steps=None,
    progress=None,
):
    """Sweep mesh sizes for each order; returns a list of record dicts.

    Stationary cases get an L2 error per (order, h) and rates between
    consecutive levels; transport cases additionally carry the function
    integral at start and end.  Relocated backgrounds are cached per h
    (corner vertices are shared across orders).
    """
    case = _resolve_case(case)
    hs = tuple(case.h_sweep if h_values is None else h_values)
    records = []
    bg_cache = {}
    for p in orders:
        errors = []
        for h in hs:
            if progress:
                progress(f"{case.name}: p={p} h={h:g}")
            mr = build_surface_mesh(
                case, h, p, relocate=relocate, background=bg_cache.get(h)
            )
            if relocate and h not in bg_cache:
                bg_cache[h] = mr.background
            rec = {
                "case": case.name,
                "order": p,
                "h": mr.h,
                "nodes": mr.mesh.num_nodes,
                "cells": mr.mesh.num_cells,
                "area_ratio": mr.quality.ratio,
                "h_ratio": mr.quality.h_max / mr.quality.h_min,
                "max_angle": max(mr.quality.max_angle.values(), default=None),
                "mesh_seconds": mr.seconds,
            }
            if case.transport is not None:
                res = solve_transport(case, mr, n_steps=n_steps)
                rec.update(
                    error_l2=res.error_l2,
                    mass_initial=res.mass_initial,
                    mass_final=res.mass_final,
                    solve_seconds=res.seconds,
                )
                errors.append(res.error_l2)
            else:
                res = solve_poisson(case, mr, compute_condition=compute_condition)
                rec.update(
                    error_l2=res.error_l2,
                    error_rel=res.error_rel,
                    condition=res.condition,
                    solve_seconds=res.seconds,
                )
                errors.append(res.error_l2)
            records.append(rec)
        if len(hs) > 1 and all(e is not None for e in errors):
            rates = [None] + convergence_rates(hs, errors)
            for rec, rate in zip(records[-len(hs) :], rates):
                rec["rate"] = rate
    return records


def write_csv(records, path):
    """Write record dicts to a CSV file with a union header."""
    import csv

    keys = []
    for rec in records:
        for k in rec:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(records)
