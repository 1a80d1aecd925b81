import numpy as np
import pytest

from mfg_inverse import MFGProblem, make_grid
from mfg_inverse.grid import integrate


def bump_density(grid, width=40.0):
    """Normalized Gaussian-like bump centered at the middle of the torus."""
    coords = grid.coordinates()
    m0 = np.exp(-width * np.sum((coords - 0.5) ** 2, axis=1))
    return m0 / integrate(grid, m0)


def small_problem(dim=1, points=8, steps=10, horizon=1.0, eps=0.3, width=40.0):
    grid = make_grid(dim, points, steps, horizon)
    m0 = bump_density(grid, width)
    return MFGProblem(grid=grid, eps=eps, m0=m0, uT=-m0, coupling_exponent=2.0)


def random_policy(grid, rng, scale=1.0):
    """Bounded random policy field over all time levels."""
    return scale * rng.uniform(-1.0, 1.0, size=(grid.time_steps + 1, grid.num_points, 2 * grid.dim))


@pytest.fixture
def rng():
    return np.random.default_rng(7)
