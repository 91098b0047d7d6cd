"""Sampling the microcanonical ensemble and ensemble-equivalence diagnostics.

The microcanonical ensemble at (e, u) is the law of N i.i.d. velocities
conditioned on their empirical mean energy and momentum.  For a Gaussian
base measure it is the uniform distribution on the sphere-hyperplane
intersection and admits an exact sampler: center i.i.d. Gaussians and
rescale onto the constraint manifold.  For other base measures we run a
Metropolis chain whose proposals are random binary collision moves; these
conserve both constraints exactly, so the chain never leaves the manifold.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ChainTooShort, DegenerateSample
from .grid import GridDensity
from .measures import BaseMeasure, MacroState, tilt_measure

DRIFT_CORRECTION_INTERVAL = 10_000


@dataclass
class Configuration:
    """N velocity vectors in R^d, stored as an (N, d) array."""

    velocities: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.velocities, dtype=float)
        if v.ndim != 2 or v.shape[0] < 2:
            raise ValueError("configuration must be an (N, d) array with N >= 2")
        if not np.all(np.isfinite(v)):
            raise ValueError("configuration has non-finite components")
        self.velocities = v

    @property
    def n(self) -> int:
        return self.velocities.shape[0]

    @property
    def dim(self) -> int:
        return self.velocities.shape[1]

    def mean_energy(self) -> float:
        return float(0.5 * np.sum(self.velocities**2) / self.n)

    def mean_momentum(self) -> np.ndarray:
        return self.velocities.mean(axis=0)

    def macro_state(self) -> MacroState:
        return MacroState(self.mean_energy(), self.mean_momentum())

    def copy(self) -> "Configuration":
        return Configuration(self.velocities.copy())

    # binary layout: int64 N, int64 d, then N*d little-endian float64
    def write_binary(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<qq", self.n, self.dim))
            fh.write(self.velocities.astype("<f8").tobytes())

    @classmethod
    def read_binary(cls, path) -> "Configuration":
        with open(path, "rb") as fh:
            n, d = struct.unpack("<qq", fh.read(16))
            data = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d)
        return cls(data.copy())

    def write_json(self, path) -> None:
        if self.n > 100:
            raise ValueError("JSON serialization is meant for N <= 100")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"N": self.n, "d": self.dim,
                       "velocities": self.velocities.tolist()}, fh)

    @classmethod
    def read_json(cls, path) -> "Configuration":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(np.asarray(payload["velocities"], dtype=float))


@dataclass(frozen=True)
class MicroConstraint:
    """Target macrostate with the tolerance a sampler must meet."""

    target: MacroState
    tol_constraint: float = 1e-10


def constraint_residual(c: Configuration, x: MacroState):
    """(|mean energy - e|, ||mean momentum - u||)."""
    return (abs(c.mean_energy() - x.e),
            float(np.linalg.norm(c.mean_momentum() - x.u)))


def sample_gaussian_micro(n: int, x: MacroState, rng: np.random.Generator) -> Configuration:
    """Exact sampler of the Gaussian microcanonical ensemble.

    Draws i.i.d. standard Gaussians, removes their mean, and rescales so
    that both constraints hold to machine precision; the result is uniform
    on the sphere-hyperplane intersection.
    """
    if n < 2:
        raise ValueError("need at least two particles")
    if not x.in_z:
        raise ValueError("(e, u) outside the admissible region")
    for _ in range(2):
        w = rng.normal(size=(n, x.dim))
        centered = w - w.mean(axis=0)
        norm2 = float(np.sum(centered**2))
        if norm2 > 0:
            r = np.sqrt(2.0 * n * x.internal_energy / norm2)
            return Configuration(x.u + r * centered)
    raise DegenerateSample("all Gaussian draws coincide; cannot rescale")


def _renormalize(v: np.ndarray, x: MacroState) -> np.ndarray:
    """Project a near-manifold configuration back onto the constraints."""
    v = v - v.mean(axis=0) + x.u
    internal = 0.5 * np.sum((v - x.u) ** 2) / v.shape[0]
    return x.u + np.sqrt(x.internal_energy / internal) * (v - x.u)


def _collision_sweep(v, pairs, omegas, log_density, rng):
    """Metropolis update of disjoint pairs by random collision moves.

    Each proposal replaces a pair (v_i, v_j) with its elastic collision
    image along a uniform direction; the move conserves the pair's energy
    and momentum exactly, so acceptance only weighs the density ratio of
    the two changed particles.  Disjoint pairs factorize, hence the whole
    sweep is a composition of valid Metropolis kernels.
    """
    vi, vj = v[pairs[:, 0]], v[pairs[:, 1]]
    a = np.einsum("ij,ij->i", omegas, vj - vi)
    vi_new = vi + a[:, None] * omegas
    vj_new = vj - a[:, None] * omegas
    log_ratio = (log_density(vi_new) + log_density(vj_new)
                 - log_density(vi) - log_density(vj))
    accept = np.log(rng.random(len(pairs))) < log_ratio
    rows_i = pairs[accept, 0]
    rows_j = pairs[accept, 1]
    v[rows_i] = vi_new[accept]
    v[rows_j] = vj_new[accept]
    return int(np.count_nonzero(accept))


def _uniform_sphere(rng, size, dim):
    w = rng.normal(size=(size, dim))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def sample_from_density(gd: GridDensity, n: int, rng: np.random.Generator,
                        jitter: bool = True) -> np.ndarray:
    """i.i.d. velocities from a gridded density.

    Draws grid cells by their quadrature mass and, when ``jitter`` is set,
    spreads each draw uniformly inside its cell so samples are continuous.
    """
    masses = gd.values * gd.grid.weights
    total = masses.sum()
    if total <= 0:
        raise ValueError("density has no mass to sample from")
    idx = rng.choice(gd.grid.n_nodes, size=n, p=masses / total)
    coords = gd.grid.nodes[idx].copy()
    if jitter:
        h = gd.grid.spacing
        coords += rng.uniform(-0.5 * h, 0.5 * h, size=coords.shape)
    return coords


def sample_micro_mcmc(m: BaseMeasure, n: int, x: MacroState, steps: int,
                      rng: np.random.Generator, log_density=None,
                      return_stats: bool = False):
    """Metropolis sampler of the microcanonical ensemble for base measure m.

    Starts from the exactly-constrained Gaussian sampler and runs ``steps``
    collision proposals with uniform pair and uniform direction, organized
    as sweeps over random disjoint-pair matchings (a composition of
    single-pair Metropolis kernels, each invariant for the target law).
    Numerical drift on the manifold is corrected every 10^4 proposals.
    Warns with ChainTooShort when fewer than 10 N proposals were accepted.
    """
    if log_density is None:
        log_density = m.log_density_at
    cfg = sample_gaussian_micro(n, x, rng)
    v = cfg.velocities
    accepted = 0
    done = 0
    while done < steps:
        block = min(DRIFT_CORRECTION_INTERVAL, steps - done)
        # sequential single-pair proposals, vectorized in blocks of
        # disjoint pairs; a random matching keeps the pairs independent
        per_sweep = n // 2
        sweeps, rem = divmod(block, per_sweep) if per_sweep else (0, block)
        for _ in range(sweeps):
            perm = rng.permutation(n)
            pairs = perm[: 2 * per_sweep].reshape(-1, 2)
            omegas = _uniform_sphere(rng, per_sweep, x.dim)
            accepted += _collision_sweep(v, pairs, omegas, log_density, rng)
        for _ in range(rem):
            i, j = rng.choice(n, size=2, replace=False)
            pairs = np.array([[i, j]])
            omegas = _uniform_sphere(rng, 1, x.dim)
            accepted += _collision_sweep(v, pairs, omegas, log_density, rng)
        done += block
        v = _renormalize(v, x)
    if accepted < 10 * n:
        warnings.warn(
            f"chain accepted {accepted} moves; fewer than 10 N = {10 * n}",
            ChainTooShort,
        )
    out = Configuration(v)
    if return_stats:
        return out, {"accepted": accepted, "proposals": done}
    return out


def histogram_velocities(velocities: np.ndarray, grid) -> GridDensity:
    """Normalized cell histogram of pooled velocities on a grid's boxes."""
    edges = np.concatenate((
        [-np.inf],
        0.5 * (grid.axis[1:] + grid.axis[:-1]),
        [np.inf],
    ))
    idx = [np.searchsorted(edges, velocities[:, k], side="right") - 1
           for k in range(grid.dim)]
    flat = np.ravel_multi_index(idx, grid.shape)
    counts = np.bincount(flat, minlength=grid.n_nodes).astype(float)
    density = counts / counts.sum()
    # convert cell masses to node densities against the quadrature weights
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(grid.weights > 0, density / grid.weights, 0.0)
    return GridDensity(grid, values, check=False)


@dataclass
class MarginalReport:
    """Pooled one-particle diagnostics against the tilted reference."""

    histogram: GridDensity
    l1_distance: float
    mean_energy: float
    mean_momentum: np.ndarray
    mean_speed_cubed: float
    n_samples: int
    n_particles: int
    moment_se: dict = field(default_factory=dict)


def marginal_diagnostics(samples, m: BaseMeasure, x: MacroState) -> MarginalReport:
    """Pooled one-particle histogram, L1 distance to the tilted reference,
    and a moment table with replica standard errors."""
    pooled = np.concatenate([c.velocities for c in samples], axis=0)
    hist = histogram_velocities(pooled, m.grid)
    reference = tilt_measure(m, x)
    per_sample_e = np.array([c.mean_energy() for c in samples])
    per_sample_u = np.stack([c.mean_momentum() for c in samples])
    per_sample_s3 = np.array(
        [np.mean(np.linalg.norm(c.velocities, axis=1) ** 3) for c in samples]
    )
    k = len(samples)
    se = {
        "energy": float(per_sample_e.std(ddof=1) / np.sqrt(k)) if k > 1 else np.nan,
        "speed3": float(per_sample_s3.std(ddof=1) / np.sqrt(k)) if k > 1 else np.nan,
    }
    return MarginalReport(
        histogram=hist,
        l1_distance=hist.l1_distance(reference),
        mean_energy=float(per_sample_e.mean()),
        mean_momentum=per_sample_u.mean(axis=0),
        mean_speed_cubed=float(per_sample_s3.mean()),
        n_samples=k,
        n_particles=samples[0].n,
        moment_se=se,
    )
