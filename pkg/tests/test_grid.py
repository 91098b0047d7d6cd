import numpy as np
import pytest

from kacflow.errors import GridMismatch
from kacflow.grid import GridDensity, VelocityGrid

from conftest import gaussian_density


def test_trapezoid_integrates_gaussian_to_one(grid):
    g = gaussian_density(grid, var=1.0)
    assert abs(g.mass - 1.0) < 1e-10


def test_moments_of_standard_gaussian(grid):
    g = gaussian_density(grid, var=1.0)
    assert abs(g.energy() - 1.0) < 1e-9  # d/2 per unit variance
    assert np.linalg.norm(g.momentum()) < 1e-12


def test_shifted_gaussian_moments(grid):
    g = gaussian_density(grid, var=1.0, mean=(0.5, -0.25))
    assert np.allclose(g.momentum(), [0.5, -0.25], atol=1e-9)
    expected_e = 1.0 + 0.5 * (0.5**2 + 0.25**2)
    assert abs(g.energy() - expected_e) < 1e-9


def test_weights_sum_to_box_volume():
    g = VelocityGrid(dim=2, half_width=3.0, points=31)
    assert abs(g.weights.sum() - 36.0) < 1e-12


def test_node_layout_matches_meshgrid():
    g = VelocityGrid(dim=2, half_width=1.0, points=3)
    expected = np.array(
        [[-1, -1], [-1, 0], [-1, 1], [0, -1], [0, 0], [0, 1], [1, -1], [1, 0], [1, 1]],
        dtype=float,
    )
    assert np.array_equal(g.nodes, expected)


def test_grid_mismatch_raises(grid):
    other = VelocityGrid(points=64)
    a = gaussian_density(grid, var=1.0)
    b = gaussian_density(other, var=1.0)
    with pytest.raises(GridMismatch):
        a.l1_distance(b)


def test_csv_round_trip_is_bit_exact(tmp_path, grid):
    rng = np.random.default_rng(7)
    values = rng.random(grid.n_nodes)
    d = GridDensity(grid, values)
    path = tmp_path / "density.csv"
    d.write_csv(path)
    back = GridDensity.read_csv(path)
    assert back.grid == grid
    assert np.array_equal(back.values, values)


def test_negative_values_rejected(grid):
    values = np.full(grid.n_nodes, 1.0)
    values[0] = -1e-12
    with pytest.raises(ValueError):
        GridDensity(grid, values)
