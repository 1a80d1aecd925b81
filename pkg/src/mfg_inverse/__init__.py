"""Obstacle reconstruction for mean-field games.

Given observations of the value function of a coupled HJB /
Fokker-Planck system on the torus, this package recovers the obstacle
(spatial cost) term.  The main route is an inverse policy iteration
that stays linear in every step; a direct least-squares solver over the
full nonlinear forward map serves as the baseline.
"""

__version__ = "0.1.0"

from .grid import Grid, make_grid
from .pde import MFGProblem
from .mfg_forward import InverseData, MFGSolution, generate_data, policy_iteration_forward
from .inverse_policy import InverseResult, policy_iteration_inverse
from .direct_ls import direct_ls_solve

__all__ = [
    "Grid",
    "make_grid",
    "MFGProblem",
    "MFGSolution",
    "InverseData",
    "InverseResult",
    "generate_data",
    "policy_iteration_forward",
    "policy_iteration_inverse",
    "direct_ls_solve",
    "__version__",
]
