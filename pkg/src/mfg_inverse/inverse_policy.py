"""Reconstruction of the obstacle by policy iteration.

Each outer iteration replaces the HJB solve of the forward method with
an inversion step that makes the value function consistent with the
measurement:

    (i)   m  <- linear Fokker-Planck solve with the current policy
    (ii)  b  <- closed-form update (terminal rate data) or a linear
                least-squares solve (initial value data), then
          u  <- linear HJB solve with the new b
    (iii) q  <- one-sided gradients of u

For terminal rate data the inversion is explicit.  For initial value
data step (ii) minimizes

    1/2 |u(.,0;b) - g|^2_L2  (+ further observation misfits)
    + gamma/2 |grad_h b|^2_L2

over b; the state map b -> u(.,0) is affine, so this is a convex
quadratic problem.  Its gradient is assembled from the adjoint sweep of
:func:`mfg_inverse.pde.solve_adjoint_w`, which is the exact transpose
of the discrete solution map (right-endpoint rectangular rule in time),
so finite differences validate it to solver precision.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import optim
from .grid import (
    Grid,
    eo_hamiltonian,
    gradient_field,
    l2_norm,
    laplacian_apply,
    one_sided_gradients,
    policy_gap,
)
from .mfg_forward import INITIAL_VALUE, TERMINAL_RATE, InverseData, zero_policy
from .pde import ConvergenceError, MFGProblem, OperatorCache, solve_adjoint_w, solve_fp, solve_hjb_linear

# A line-search stall this far above opt_tol is treated as failure.
STALL_SLACK = 1e4


class InversionError(RuntimeError):
    pass


@dataclass
class InverseResult:
    """Reconstruction output.

    Policy-iteration sweeps are indexed from zero: the first sweep
    produces iterate 0, and ``iterations`` is the index of the iterate
    the method stopped at, so the history lists hold ``iterations + 1``
    entries.  For the direct least-squares solver ``iterations`` is the
    number of accepted quasi-Newton steps instead.
    """

    b: np.ndarray
    u: np.ndarray
    m: np.ndarray
    q: np.ndarray
    iterations: int
    policy_gap_history: list[float] = field(default_factory=list)
    b_error_history: list[float] = field(default_factory=list)
    wall_time_seconds: float = 0.0
    optimizer_iterations: list[int] = field(default_factory=list)


def policy_update(grid: Grid, u: np.ndarray) -> np.ndarray:
    """New policy: the one-sided gradient pairs of u at every time level."""
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.time_steps + 1, grid.num_points):
        raise ValueError(
            f"expected value field of shape {(grid.time_steps + 1, grid.num_points)},"
            f" got {u.shape}"
        )
    return gradient_field(grid, u)


def closed_form_b(prob: MFGProblem, q: np.ndarray, m: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Explicit obstacle update from terminal rate data.

    b = -g - eps * Lap u_T + H_hat(grad u_T) - F(m(., T)).  The policy
    enters only through m; after the first iteration q(., T) equals
    grad u_T anyway, which is why the advection and running cost terms
    collapse into H_hat.
    """
    grid = prob.grid
    return (
        -np.asarray(g, dtype=float)
        - prob.eps * laplacian_apply(grid, prob.uT)
        + eo_hamiltonian(grid, one_sided_gradients(grid, prob.uT))
        - prob.coupling(m[grid.time_steps])
    )


def _regularizer(prob: MFGProblem, b: np.ndarray, gamma: float) -> tuple[float, np.ndarray]:
    """gamma/2 |grad_h b|^2 with its exact gradient -gamma * Lap b.

    The squared norm uses the forward differences; since the transpose
    of D^+ is -D^-, the gradient of the quadratic form is exactly the
    negative discrete Laplacian.
    """
    if gamma == 0.0:
        return 0.0, np.zeros_like(b)
    grid = prob.grid
    fwd = one_sided_gradients(grid, b)[:, grid.dim :]
    value = 0.5 * gamma * float(np.sum(fwd * fwd)) * grid.cell_volume
    return value, -gamma * laplacian_apply(grid, b)


def _observations(data: InverseData) -> list[tuple[int, np.ndarray]]:
    return [(0, data.g), *data.extra]


def step2_gradient_u0(
    prob: MFGProblem,
    q: np.ndarray,
    m: np.ndarray,
    b: np.ndarray,
    g: np.ndarray | InverseData,
    gamma: float,
    ops: OperatorCache | None = None,
) -> tuple[float, np.ndarray]:
    """Objective and L2 gradient of the step (ii) least-squares problem.

    Accepts either the plain initial-value measurement or a full
    :class:`InverseData` carrying additional observation times.  Each
    observation contributes the adjoint sweep of its residual, started
    at its own time level, integrated with the right-endpoint rule.
    """
    grid = prob.grid
    if ops is None:
        ops = OperatorCache(grid, prob.eps, q)
    observations = _observations(g) if isinstance(g, InverseData) else [(0, np.asarray(g, dtype=float))]
    u = solve_hjb_linear(prob, q, m, b, ops)
    value, gradient = _regularizer(prob, b, gamma)
    for level, g_obs in observations:
        residual = u[level] - g_obs
        value += 0.5 * l2_norm(grid, residual) ** 2
        w = solve_adjoint_w(prob, q, residual, ops, start_level=level)
        gradient = gradient + grid.dt * w[level + 1 :].sum(axis=0)
    return value, gradient


def invert_step_u0(
    prob: MFGProblem,
    q: np.ndarray,
    m: np.ndarray,
    data: InverseData | np.ndarray,
    gamma: float,
    b_init: np.ndarray,
    opt_tol: float = 1e-10,
    max_opt_iter: int = 500,
    ops: OperatorCache | None = None,
    curvature: object | None = None,
) -> tuple[np.ndarray, optim.OptimReport]:
    """Solve step (ii) for initial-value data with a warm-started BFGS.

    The quadratic's Hessian barely changes between outer iterations, so
    the caller may feed back ``report.curvature`` to warm-start the
    quasi-Newton metric along with the iterate.
    """
    grid = prob.grid
    if ops is None:
        ops = OperatorCache(grid, prob.eps, q)
    scale = grid.cell_volume  # Euclidean gradient of the quadrature-weighted objective

    def fun_and_grad(bvec):
        value, gradient = step2_gradient_u0(prob, q, m, bvec, data, gamma, ops)
        return value, gradient * scale

    report = optim.minimize(
        fun_and_grad, np.asarray(b_init, dtype=float), opt_tol, max_opt_iter,
        curvature=curvature,
    )
    if not report.converged:
        if (
            report.message.startswith("line search")
            and report.first_order_optimality <= STALL_SLACK * opt_tol
        ):
            warnings.warn(
                f"inversion step stalled at optimality {report.first_order_optimality:.3e}"
                f" (tolerance {opt_tol:.0e})",
                stacklevel=2,
            )
        else:
            raise InversionError(
                f"step (ii) optimizer failed: {report.message},"
                f" optimality {report.first_order_optimality:.3e}"
            )
    return report.minimizer, report


def policy_iteration_inverse(
    prob: MFGProblem,
    data: InverseData,
    tol: float = 1e-9,
    max_iter: int = 60,
    q0: np.ndarray | None = None,
    gamma: float | None = None,
    opt_tol: float = 1e-10,
    opt_tol_schedule: str = "fixed",
    max_opt_iter: int = 500,
    b_true: np.ndarray | None = None,
) -> InverseResult:
    """Reconstruct the obstacle from one measurement by policy iteration.

    gamma defaults to 0 for noiseless data and 1e-6 otherwise.  With
    ``opt_tol_schedule="tightening"`` the step (ii) tolerance starts at
    1e-6 and halves each outer iteration until it reaches ``opt_tol``;
    the default keeps it fixed at ``opt_tol``.
    """
    if opt_tol_schedule not in ("fixed", "tightening"):
        raise ValueError(f"unknown opt_tol_schedule {opt_tol_schedule!r}")
    if gamma is None:
        gamma = 0.0 if data.noise_level == 0.0 else 1e-6
    grid = prob.grid
    start = time.perf_counter()
    q = zero_policy(prob) if q0 is None else np.asarray(q0, dtype=float).copy()
    b = np.zeros(grid.num_points)
    gaps: list[float] = []
    b_errors: list[float] = []
    opt_iters: list[int] = []
    u = m = None
    curvature = None
    for k in range(1, max_iter + 1):
        ops = OperatorCache(grid, prob.eps, q)
        m = solve_fp(prob, q, ops)
        if data.kind == TERMINAL_RATE:
            b = closed_form_b(prob, q, m, data.g)
        else:
            step_tol = opt_tol
            if opt_tol_schedule == "tightening":
                step_tol = max(opt_tol, 1e-6 * 0.5 ** (k - 1))
            b, report = invert_step_u0(
                prob, q, m, data, gamma, b, step_tol, max_opt_iter, ops,
                curvature=curvature,
            )
            curvature = report.curvature
            opt_iters.append(report.iterations)
        u = solve_hjb_linear(prob, q, m, b, ops)
        q_new = policy_update(grid, u)
        gap = policy_gap(grid, q_new, q)
        gaps.append(gap)
        if b_true is not None:
            b_errors.append(l2_norm(grid, b - b_true))
        q = q_new
        if gap < tol:
            # iterates are indexed from zero; sweep k produced iterate k - 1
            return InverseResult(
                b, u, m, q, k - 1, gaps, b_errors,
                time.perf_counter() - start, opt_iters,
            )
    raise ConvergenceError(
        f"inverse policy iteration did not converge in {max_iter} iterations"
        f" (last gap {gaps[-1]:.3e})",
        gaps[-1],
    )
