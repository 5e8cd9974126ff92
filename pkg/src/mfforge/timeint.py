"""Implicit time integration for semi-discrete surface transport.

The semi-discrete system M du/dt = b(t) - S u with S = lambda*K + C is
integrated by the 3-stage Gauss-Legendre implicit Runge-Kutta scheme
(order 6, A-stable).  All three stages are solved at once from the
3n x 3n block system (I (x) M + dt * A (x) S) g = stage right-hand sides;
with a constant step and time-independent S the block factorization is
computed once and reused for every step.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import SolverError

_S15 = np.sqrt(15.0)

#: 3-stage Gauss-Legendre collocation tableau (order 6), exact entries.
GL3_A = np.array(
    [
        [5.0 / 36.0, 2.0 / 9.0 - _S15 / 15.0, 5.0 / 36.0 - _S15 / 30.0],
        [5.0 / 36.0 + _S15 / 24.0, 2.0 / 9.0, 5.0 / 36.0 - _S15 / 24.0],
        [5.0 / 36.0 + _S15 / 30.0, 2.0 / 9.0 + _S15 / 15.0, 5.0 / 36.0],
    ]
)
GL3_B = np.array([5.0 / 18.0, 4.0 / 9.0, 5.0 / 18.0])
GL3_C = np.array([0.5 - _S15 / 10.0, 0.5, 0.5 + _S15 / 10.0])


@dataclass
class TransientProblem:
    """M du/dt = b(t) - (lambda*K + C) u with optional Dirichlet data.

    ``load`` maps a time to the load vector (or None for zero);
    ``dirichlet`` is (node ids, g(t) -> values) or None.  The Dirichlet
    rows of M, K, C must already be reduced consistently by the caller
    (constrained rows become identity in the stage system).
    """

    mass: sp.spmatrix
    stiffness: sp.spmatrix = None
    advection: sp.spmatrix = None
    diffusivity: float = 0.0
    load: object = None
    u0: np.ndarray = None
    t_end: float = 1.0
    n_steps: int = 1
    dirichlet: tuple = None

    def operator(self):
        n = self.mass.shape[0]
        S = sp.csr_matrix((n, n))
        if self.stiffness is not None and self.diffusivity != 0.0:
            S = S + self.diffusivity * self.stiffness
        if self.advection is not None:
            S = S + self.advection
        return S


class IRKStepper:
    """Gauss-Legendre IRK-6 stepper with a cached block factorization."""

    def __init__(self, problem, dt):
        self.problem = problem
        self.dt = float(dt)
        M = sp.csr_matrix(problem.mass)
        S = sp.csr_matrix(problem.operator())
        n = M.shape[0]
        self.n = n
        self.S = S
        if problem.dirichlet is not None:
            nodes, _ = problem.dirichlet
            self._dir_nodes = np.asarray(nodes, dtype=np.int64)
            M, S = _reduce_rows(M, self._dir_nodes), _reduce_rows(S, self._dir_nodes)
            self.S = S
            self._M_red = M
        else:
            self._dir_nodes = None
        eye = sp.identity(3, format="csr")
        A = sp.csr_matrix(GL3_A)
        block = sp.kron(eye, M, format="csc") + self.dt * sp.kron(A, S, format="csc")
        if self._dir_nodes is not None:
            # constrained stage slopes are forced to zero (constant BC data)
            block = block.tolil()
            for s in range(3):
                rows = self._dir_nodes + s * n
                block[rows, :] = 0.0
                block[rows, rows] = 1.0
            block = block.tocsc()
        try:
            self._lu = spla.splu(block)
        except RuntimeError as exc:
            raise SolverError(f"stage factorization failed: {exc}") from None

    def step(self, t, u):
        """One step from (t, u) to t + dt."""
        n, dt, S = self.n, self.dt, self.S
        rhs = np.empty(3 * n)
        for s in range(3):
            b = _eval_load(self.problem.load, t + GL3_C[s] * dt, n)
            r = b - S @ u
            if self._dir_nodes is not None:
                r[self._dir_nodes] = 0.0
            rhs[s * n : (s + 1) * n] = r
        g = self._lu.solve(rhs)
        if not np.isfinite(g).all():
            raise SolverError("singular stage system")
        u_next = u + dt * (
            GL3_B[0] * g[:n] + GL3_B[1] * g[n : 2 * n] + GL3_B[2] * g[2 * n :]
        )
        if self._dir_nodes is not None:
            nodes, gfun = self.problem.dirichlet
            u_next[self._dir_nodes] = gfun(t + dt)
        return u_next


def _reduce_rows(A, nodes):
    A = A.tolil(copy=True)
    A[nodes, :] = 0.0
    return A.tocsr()


def _eval_load(load, t, n):
    if load is None:
        return np.zeros(n)
    return np.asarray(load(t), dtype=float)


def integrate(problem, checkpoints=()):
    """Run ``n_steps`` uniform IRK-6 steps to ``t_end``.

    Returns (u_final, snapshots) where snapshots maps each requested
    checkpoint time to the state at the nearest step boundary.
    """
    if problem.n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    dt = problem.t_end / problem.n_steps
    stepper = IRKStepper(problem, dt)
    u = np.asarray(problem.u0, dtype=float).copy()
    if problem.dirichlet is not None:
        nodes, gfun = problem.dirichlet
        u[np.asarray(nodes, dtype=np.int64)] = gfun(0.0)
    want = sorted(float(c) for c in checkpoints)
    snaps = {}
    for tc in want:
        if tc <= 0.0:
            snaps[tc] = u.copy()
    t = 0.0
    for k in range(problem.n_steps):
        u = stepper.step(t, u)
        t = (k + 1) * dt
        for tc in want:
            if tc not in snaps and tc <= t + 0.5 * dt:
                snaps[tc] = u.copy()
    return u, snaps
