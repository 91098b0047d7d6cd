"""Uniform velocity grids and gridded probability densities.

The whole package shares one discrete carrier for densities on R^d: a
uniform tensor grid on ``[-L, L]^d`` with trapezoidal quadrature weights.
Node values are stored flat in C order of ``meshgrid(..., indexing="ij")``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import GridMismatch

DEFAULT_DIM = 2
DEFAULT_HALF_WIDTH = 8.0
DEFAULT_POINTS = 128


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform tensor grid on [-L, L]^d with trapezoidal quadrature."""

    dim: int = DEFAULT_DIM
    half_width: float = DEFAULT_HALF_WIDTH
    points: int = DEFAULT_POINTS

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("grid dimension must be >= 1")
        if self.points < 2:
            raise ValueError("grid needs at least two points per axis")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")

    @cached_property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.points)

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.points - 1)

    @property
    def n_nodes(self) -> int:
        return self.points**self.dim

    @property
    def shape(self) -> tuple:
        return (self.points,) * self.dim

    @cached_property
    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, dim)."""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        """Tensor-product trapezoidal weights, shape (n_nodes,)."""
        w1 = np.full(self.points, self.spacing)
        w1[0] *= 0.5
        w1[-1] *= 0.5
        w = w1
        for _ in range(self.dim - 1):
            w = np.multiply.outer(w, w1)
        return w.ravel()

    @cached_property
    def zeta0(self) -> np.ndarray:
        """Kinetic energy |v|^2 / 2 at every node."""
        return 0.5 * np.einsum("ij,ij->i", self.nodes, self.nodes)

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ np.asarray(values, dtype=float))

    def require_same(self, other: "VelocityGrid") -> None:
        if self != other:
            raise GridMismatch(f"grids differ: {self} vs {other}")


class GridDensity:
    """Nonnegative node values representing a probability density."""

    def __init__(self, grid: VelocityGrid, values: np.ndarray, check: bool = True):
        values = np.asarray(values, dtype=float).ravel()
        if values.size != grid.n_nodes:
            raise GridMismatch(
                f"value count {values.size} does not match grid with {grid.n_nodes} nodes"
            )
        if check and np.any(values < 0):
            raise ValueError("grid density has negative node values")
        self.grid = grid
        self.values = values

    @property
    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def normalized(self) -> "GridDensity":
        m = self.mass
        if m <= 0:
            raise ValueError("cannot normalize a density with nonpositive mass")
        return GridDensity(self.grid, self.values / m, check=False)

    def energy(self) -> float:
        """First moment of |v|^2/2."""
        return float((self.grid.weights * self.values) @ self.grid.zeta0)

    def momentum(self) -> np.ndarray:
        """First moment of v, shape (dim,)."""
        return (self.grid.weights * self.values) @ self.grid.nodes

    def moment(self, fn) -> float:
        """Quadrature of fn(nodes) against the density."""
        return float((self.grid.weights * self.values) @ np.asarray(fn(self.grid.nodes)))

    def abs_moment(self, p: float) -> float:
        """Quadrature of |v|^p against the density."""
        speed = np.linalg.norm(self.grid.nodes, axis=1)
        return float((self.grid.weights * self.values) @ speed**p)

    def l1_distance(self, other: "GridDensity") -> float:
        self.grid.require_same(other.grid)
        return self.grid.integrate(np.abs(self.values - other.values))

    def write_csv(self, path) -> None:
        """Flat CSV: one header line ``d,L,n_g`` then one node value per line.

        Values are written with shortest round-trip repr, so read/write
        round-trips bit-exactly.
        """
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.grid.dim},{self.grid.half_width!r},{self.grid.points}\n")
            for v in self.values:
                fh.write(repr(float(v)))
                fh.write("\n")

    @classmethod
    def read_csv(cls, path) -> "GridDensity":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            dim, half_width, points = int(header[0]), float(header[1]), int(header[2])
            values = np.array([float(line) for line in fh if line.strip()])
        return cls(VelocityGrid(dim, half_width, points), values, check=False)
