"""Problem container and the linear PDE sweeps.

All four solvers share the same per-level step matrices (see
:mod:`mfg_inverse.sparse`).  Since the FP matrix is exactly the HJB
matrix transposed, one LU factorization per time level serves the
forward density sweep, the backward value sweep and the adjoint sweeps;
:class:`OperatorCache` holds those factorizations for one fixed policy
and is invalidated simply by building a new cache when the policy
changes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse.linalg as spla

from . import sparse
from .grid import Grid, eo_hamiltonian, gradient_field, integrate, l2_norm, one_sided_gradients


class ConvergenceError(RuntimeError):
    """An iterative loop hit its cap; carries the last residual or gap."""

    def __init__(self, message: str, last_gap: float):
        super().__init__(message)
        self.last_gap = last_gap


@dataclass(frozen=True)
class MFGProblem:
    """Mean-field game data on a periodic grid.

    The Hamiltonian is quadratic, H(p) = |p|^2 / 2, and the coupling is
    the power law F(m) = coupling_scale * m ** coupling_exponent.
    ``coupling_scale`` exists so test harnesses can switch the coupling
    off; production problems keep it at 1.
    """

    grid: Grid
    eps: float
    m0: np.ndarray
    uT: np.ndarray
    coupling_exponent: float = 2.0
    coupling_scale: float = 1.0
    hamiltonian: str = "quadratic"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.hamiltonian != "quadratic":
            raise ValueError(f"only the quadratic Hamiltonian is supported, got {self.hamiltonian!r}")
        if self.coupling_exponent < 1:
            raise ValueError(f"coupling_exponent must be >= 1, got {self.coupling_exponent}")
        m0 = np.asarray(self.m0, dtype=float)
        uT = np.asarray(self.uT, dtype=float)
        n = self.grid.num_points
        if m0.shape != (n,) or uT.shape != (n,):
            raise ValueError(f"m0 and uT must have shape ({n},)")
        if m0.min() < 0:
            raise ValueError("m0 must be nonnegative pointwise")
        mass = integrate(self.grid, m0)
        if mass <= 0:
            raise ValueError("m0 must have positive mass")
        object.__setattr__(self, "m0", m0 / mass)
        object.__setattr__(self, "uT", uT)

    def coupling(self, m: np.ndarray) -> np.ndarray:
        """F(m)."""
        if self.coupling_scale == 0.0:
            return np.zeros_like(m)
        return self.coupling_scale * np.power(m, self.coupling_exponent)

    def coupling_derivative(self, m: np.ndarray) -> np.ndarray:
        """F'(m)."""
        if self.coupling_scale == 0.0:
            return np.zeros_like(m)
        a = self.coupling_exponent
        return self.coupling_scale * a * np.power(m, a - 1.0)


def without_coupling(prob: MFGProblem) -> MFGProblem:
    return replace(prob, coupling_scale=0.0)


class OperatorCache:
    """Factorized step matrices, one per time level, for a fixed policy.

    ``hjb_solve`` applies B^{-1}, ``fp_solve`` applies (B^T)^{-1} through
    the transposed triangular solves of the same LU.  Levels are
    factorized lazily on first use.
    """

    def __init__(self, grid: Grid, eps: float, q: np.ndarray):
        q = np.asarray(q, dtype=float)
        expected = (grid.time_steps + 1, grid.num_points, 2 * grid.dim)
        if q.shape != expected:
            raise ValueError(f"expected policy field of shape {expected}, got {q.shape}")
        self.grid = grid
        self.eps = eps
        self.q = q
        self._direct = grid.num_points <= sparse.DIRECT_LIMIT
        self._matrices: dict[int, object] = {}
        self._lus: dict[int, object] = {}

    def _matrix(self, level: int):
        if level not in self._matrices:
            self._matrices[level] = sparse._step_matrix(self.grid, self.q[level], self.eps)
        return self._matrices[level]

    def _lu(self, level: int):
        if level not in self._lus:
            self._lus[level] = spla.splu(self._matrix(level).tocsc())
        return self._lus[level]

    def hjb_solve(self, level: int, rhs: np.ndarray) -> np.ndarray:
        if self._direct:
            return self._lu(level).solve(rhs)
        return sparse.SparseOperator(self._matrix(level)).solve(rhs)

    def fp_solve(self, level: int, rhs: np.ndarray) -> np.ndarray:
        if self._direct:
            return self._lu(level).solve(rhs, trans="T")
        return sparse.SparseOperator(self._matrix(level).T.tocsr()).solve(rhs)


def _cache(prob: MFGProblem, q: np.ndarray, ops: OperatorCache | None) -> OperatorCache:
    if ops is not None:
        return ops
    return OperatorCache(prob.grid, prob.eps, q)


def solve_fp(prob: MFGProblem, q: np.ndarray, ops: OperatorCache | None = None) -> np.ndarray:
    """Forward Fokker-Planck sweep for a fixed policy.

    Step n -> n+1 solves A[q^n] m^{n+1} = m^n; mass is conserved exactly
    because the column sums of A are 1.
    """
    ops = _cache(prob, q, ops)
    grid = prob.grid
    m = np.empty((grid.time_steps + 1, grid.num_points))
    m[0] = prob.m0
    for n in range(grid.time_steps):
        m[n + 1] = ops.fp_solve(n, m[n])
    return m


def solve_hjb_linear(
    prob: MFGProblem,
    q: np.ndarray,
    m: np.ndarray,
    b: np.ndarray,
    ops: OperatorCache | None = None,
) -> np.ndarray:
    """Backward linear HJB sweep for a fixed policy and density.

    Step n+1 -> n solves B[q^n] u^n = u^{n+1} + dt (L_h(q^n) + b + F(m^n))
    where L_h is the upwind quadratic form of the policy slopes, so that
    at the fixed point q = grad u the discrete identity
    q . grad u - L(q) = H_hat(grad u) holds exactly.
    """
    ops = _cache(prob, q, ops)
    grid = prob.grid
    u = np.empty((grid.time_steps + 1, grid.num_points))
    u[grid.time_steps] = prob.uT
    b = np.asarray(b, dtype=float)
    for n in range(grid.time_steps - 1, -1, -1):
        source = eo_hamiltonian(grid, q[n]) + b + prob.coupling(m[n])
        u[n] = ops.hjb_solve(n, u[n + 1] + grid.dt * source)
    return u


def solve_adjoint_w(
    prob: MFGProblem,
    q: np.ndarray,
    w0: np.ndarray,
    ops: OperatorCache | None = None,
    start_level: int = 0,
) -> np.ndarray:
    """Forward sweep of the light adjoint: same operator as solve_fp,
    initial value w0 injected at ``start_level``, zero before it."""
    ops = _cache(prob, q, ops)
    grid = prob.grid
    w = np.zeros((grid.time_steps + 1, grid.num_points))
    w[start_level] = np.asarray(w0, dtype=float)
    for n in range(start_level, grid.time_steps):
        w[n + 1] = ops.fp_solve(n, w[n])
    return w


def _upwind_div_m_grad(grid: Grid, q_slice, m_slice, v_slice) -> np.ndarray:
    """div(m grad v) with the upwind splitting of the transport.

    The masks follow the active branches of the Engquist-Osher flux at
    the policy q, so this is the exact transpose of the policy
    sensitivity of the advection, applied to m.
    """
    back = q_slice[:, : grid.dim]
    fwd = q_slice[:, grid.dim :]
    v_slopes = one_sided_gradients(grid, v_slice)
    out = np.zeros(grid.shape)
    for axis in range(grid.dim):
        a = ((back[:, axis] > 0) * m_slice * v_slopes[:, axis]).reshape(grid.shape)
        c = ((fwd[:, axis] < 0) * m_slice * v_slopes[:, grid.dim + axis]).reshape(grid.shape)
        out += (np.roll(a, -1, axis=axis) - a) / grid.dx
        out += (c - np.roll(c, 1, axis=axis)) / grid.dx
    return out.ravel()


def solve_coupled_adjoint(
    prob: MFGProblem,
    u: np.ndarray,
    m: np.ndarray,
    w_init: np.ndarray,
    v_term: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-point solve of the coupled adjoint pair around a state (u, m).

    w runs forward with the FP-type operator, transported by grad u and
    sourced by div(m grad v); v runs backward with the HJB-type
    operator, advected by grad u and sourced by F'(m) w.  The sweeps
    alternate (w given v, then v given w, v seeded at zero) until the
    combined L2 change of both fields drops below tol.

    The time-level placements follow the exact adjoint of the discrete
    forward system: the w step n -> n+1 uses the policy at level n and
    the density at level n+1, the v step for level n uses the policy at
    level n-1, and the terminal datum enters as the right-hand side of
    the last v step.
    """
    grid = prob.grid
    n_steps = grid.time_steps
    q = gradient_field(grid, u)
    ops = OperatorCache(grid, prob.eps, q)
    w = np.zeros((n_steps + 1, grid.num_points))
    v = np.zeros((n_steps + 1, grid.num_points))
    w_init = np.asarray(w_init, dtype=float)
    v_term = np.asarray(v_term, dtype=float)
    fprime = np.array([prob.coupling_derivative(m[n]) for n in range(n_steps + 1)])

    last_change = np.inf
    for _ in range(max_iter):
        w_new = np.empty_like(w)
        w_new[0] = w_init
        for n in range(n_steps):
            source = _upwind_div_m_grad(grid, q[n], m[n + 1], v[n + 1])
            w_new[n + 1] = ops.fp_solve(n, w_new[n] + grid.dt * source)
        v_new = np.empty_like(v)
        v_new[n_steps] = ops.hjb_solve(n_steps - 1, v_term)
        for n in range(n_steps - 1, 0, -1):
            rhs = v_new[n + 1] + grid.dt * fprime[n] * w_new[n + 1]
            v_new[n] = ops.hjb_solve(n - 1, rhs)
        v_new[0] = v_new[1]
        last_change = max(
            max(l2_norm(grid, w_new[n] - w[n]) for n in range(n_steps + 1)),
            max(l2_norm(grid, v_new[n] - v[n]) for n in range(n_steps + 1)),
        )
        w, v = w_new, v_new
        if last_change < tol:
            return w, v
    raise ConvergenceError(
        f"coupled adjoint did not converge in {max_iter} sweeps"
        f" (last change {last_change:.3e})",
        last_change,
    )
