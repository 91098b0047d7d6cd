import numpy as np
import pytest

from kacflow.grid import GridDensity, VelocityGrid
from kacflow.measures import BaseMeasure


@pytest.fixture(scope="session")
def grid():
    return VelocityGrid()


@pytest.fixture(scope="session")
def gauss(grid):
    return BaseMeasure.gaussian(dim=2, sigma=1.0, grid=grid)


def gaussian_density(grid, var, mean=None):
    """Analytic isotropic Gaussian N(mean, var*I) evaluated on the grid."""
    mean = np.zeros(grid.dim) if mean is None else np.asarray(mean, dtype=float)
    diff = grid.nodes - mean
    expo = -0.5 * np.einsum("ij,ij->i", diff, diff) / var
    values = np.exp(expo) / (2 * np.pi * var) ** (grid.dim / 2)
    return GridDensity(grid, values, check=False)
