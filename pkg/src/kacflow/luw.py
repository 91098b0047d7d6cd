"""Upward energy-jump paths and their rate-functional asymptotics.

Weak solutions of the homogeneous hard-sphere Boltzmann equation with a
piecewise-constant increasing energy profile arise as limits of mixtures:
an energy-conserving solution carrying most of the mass plus vanishing
fractions of ever-hotter tilted components whose energy escapes to
infinity.  This module builds those approximating mixtures at a finite
index n, runs the energy-conserving semigroup by mean-field simulation of
the particle system, and evaluates the static and dynamical rate
functionals along the family.

The approximant at index n for a profile with jumps (t_i, dE_i), i=1..k,
carries component weights 1/(nk) on tilts with energies n k dE_i; on the
segment (t_i, t_{i+1}] the evolving part has weight 1 - (k-i)/(nk) and
the flow density is that weight times the product of the evolving
density with itself times the kernel (relative to the same carrier as
the reference flow).  The hand-over densities are fixed by continuity at
the jump times.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NegativeDensity, NoJump, TailClipped
from .grid import GridDensity, VelocityGrid
from .kac import kappa, simulate_null_collision
from .measures import (
    BaseMeasure,
    MacroState,
    log_mgf,
    micro_sanov_rate,
    relative_entropy,
    solve_tilt,
    tilt_measure,
)
from .microcanonical import Configuration, histogram_velocities, sample_from_density
from .observables import DensityPath
from .rates import _golden_minimize, static_cost
from .seeding import replica_rng


@dataclass(frozen=True)
class EnergyProfile:
    """Nondecreasing, piecewise-constant, left-continuous energy profile."""

    base: float
    jumps: tuple = ()

    def __post_init__(self):
        jumps = tuple((float(t), float(de)) for t, de in self.jumps)
        object.__setattr__(self, "jumps", jumps)
        times = [t for t, _ in jumps]
        if any(de <= 0 for _, de in jumps):
            raise ValueError("jump sizes must be positive")
        if sorted(times) != times or len(set(times)) != len(times):
            raise ValueError("jump times must be strictly increasing")
        if any(t < 0 for t in times):
            raise ValueError("jump times must be nonnegative")

    @property
    def jump_times(self):
        return [t for t, _ in self.jumps]

    @property
    def total_gain(self) -> float:
        return float(sum(de for _, de in self.jumps))

    def value(self, t: float) -> float:
        """Left-continuous evaluation: the jump at t_i affects t > t_i."""
        return self.base + sum(de for ti, de in self.jumps if ti < t)

    def final(self, horizon: float) -> float:
        return self.value(horizon + 0.0) if not self.jumps else self.base + sum(
            de for ti, de in self.jumps if ti < horizon or math.isclose(ti, horizon))


# ---------------------------------------------------------------------------
# mean-field semigroup
# ---------------------------------------------------------------------------

def _semigroup_histograms(h0: GridDensity, times, n_mf: int, replicas: int,
                          rng_seed: int) -> list:
    """Replica-averaged histograms of the hard-sphere walk started i.i.d.
    from h0, at the requested times."""
    grid = h0.grid
    times = np.asarray(times, dtype=float)
    acc = [np.zeros(grid.n_nodes) for _ in times]
    for r in range(replicas):
        rng = replica_rng(rng_seed, r)
        velocities = sample_from_density(h0, n_mf, rng)
        traj = simulate_null_collision(Configuration(velocities),
                                       horizon=float(times[-1]) if times[-1] > 0 else 0.0,
                                       rng=rng)
        for k, v in enumerate(traj.snapshots(times)):
            acc[k] += histogram_velocities(v, grid).values
    out = []
    for a in acc:
        d = GridDensity(grid, a / replicas, check=False)
        out.append(d.normalized())
    return out


def boltzmann_semigroup(h0: GridDensity, t: float, n_mf: int = 4000,
                        replicas: int = 25, rng_seed: int = 0) -> GridDensity:
    """Energy-conserving evolution of h0 for time t, estimated by the
    mean-field particle system (law of large numbers regime)."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    return _semigroup_histograms(h0, [t], n_mf, replicas, rng_seed)[0]


def moment_diagnostics(path: DensityPath, p: float) -> np.ndarray:
    """Table of t -> p-th absolute moment along a density path.

    Warns with TailClipped when more than 1% of the moment mass sits in
    the outermost grid cells.
    """
    if p <= 2:
        pass  # p = 2 reproduces twice the energy; smaller p allowed too
    grid = path.grid
    speed = np.linalg.norm(grid.nodes, axis=1)
    outer = np.max(np.abs(grid.nodes), axis=1) >= grid.half_width - grid.spacing
    rows = []
    for t, d in zip(path.times, path.densities):
        contrib = grid.weights * d.values * speed**p
        total = float(contrib.sum())
        if total > 0 and float(contrib[outer].sum()) > 0.01 * total:
            warnings.warn(
                f"more than 1% of the {p}-moment mass sits in the outermost bins",
                TailClipped,
            )
        rows.append((t, total))
    return np.array(rows)


# ---------------------------------------------------------------------------
# tilted components on an extended box
# ---------------------------------------------------------------------------

def extended_tilt_on_common(m: BaseMeasure, x: MacroState):
    """Tilt of m with the target moments, built on a box wide enough for
    the target energy and restricted to the common grid.

    Returns (component on the common grid, clipped tail mass).  The
    component keeps the extended-box normalization, so its common-grid
    mass is 1 minus the reported tail.
    """
    common = m.grid
    need = max(common.half_width, 4.0 * math.sqrt(2.0 * x.e))
    if m.family == "gaussian":
        g = solve_tilt(m, x)
        log_z = log_mgf(m, g)
    else:
        if m.density_fn is None:
            raise ValueError("custom measures need a density evaluator to extend the box")
        points = int(math.ceil(2 * need / common.spacing)) + 1
        ext_grid = VelocityGrid(common.dim, need, points)
        ext = BaseMeasure.from_density(m.density_fn, m.gamma0_star, grid=ext_grid,
                                       normalize=False, tol_quad=m.tol_quad)
        g = solve_tilt(ext, x)
        log_z = log_mgf(ext, g)
    tilt = g.gamma0 * common.zeta0 + common.nodes @ g.gamma
    values = m.density_values * np.exp(tilt - log_z)
    component = GridDensity(common, values, check=False)
    tail = max(0.0, 1.0 - component.mass)
    return component, tail


# ---------------------------------------------------------------------------
# the approximating paths
# ---------------------------------------------------------------------------

@dataclass
class LuWPath:
    """Mixture approximant of an energy-jumping solution at index n."""

    n: int
    profile: EnergyProfile
    horizon: float
    times: np.ndarray                 # all snapshot times
    segment_of: np.ndarray            # segment index per snapshot
    weights: np.ndarray               # evolving-part weight per segment
    u_paths: list                     # per snapshot: evolving density U_{t-t_i}(h_i)
    rest: list                        # per segment: summed dormant tilt values
    f_path: DensityPath = None        # assembled, renormalized mixture path
    handovers: list = field(default_factory=list)
    tilt_tails: list = field(default_factory=list)
    renormalizations: list = field(default_factory=list)

    def energies(self) -> np.ndarray:
        return self.f_path.energies()

    def continuity_defect(self) -> float:
        """Largest L1 gap between the two segment representations at the
        hand-over times (zero up to float error by construction)."""
        worst = 0.0
        grid = self.f_path.grid
        for i, h in enumerate(self.handovers):
            k = int(np.searchsorted(self.times, self.profile.jump_times[i]))
            left = self.f_path.densities[k]
            right_vals = self.weights[i + 1] * h.values + self.rest[i + 1]
            norm = max(float(grid.integrate(right_vals)), 1e-300)
            right = GridDensity(grid, right_vals / norm, check=False)
            worst = max(worst, left.l1_distance(right))
        return worst


def build_luw_approximant(f0: GridDensity, prof: EnergyProfile, n: int,
                          m: BaseMeasure, u, horizon: float,
                          n_mf: int = 4000, replicas: int = 25,
                          rng_seed: int = 0, snapshots_per_segment: int = 21,
                          shared_segment_paths: dict = None,
                          negative_mass_tol: float = 1e-6) -> LuWPath:
    """Assemble the index-n mixture path for the given profile.

    The evolving component of each segment is propagated by the mean-field
    semigroup; dormant components are the tilts of m at the inflated jump
    energies, built on an auto-extended box and restricted to the common
    grid with their clipped tail mass reported.  Hand-over densities are
    fixed by continuity at the jump times; the construction keeps them
    nonnegative by design, and any numerically negative mass beyond
    ``negative_mass_tol`` raises NegativeDensity.

    ``shared_segment_paths`` may carry precomputed semigroup paths keyed by
    (segment index, key of the segment initial datum) to share the common
    first segment across several n.
    """
    if n < 1:
        raise ValueError("approximation index must be at least 1")
    u = np.asarray(u, dtype=float)
    grid = f0.grid
    m.grid.require_same(grid)
    if abs(f0.energy() - prof.base) > 1e-3:
        raise ValueError("initial datum energy must match the profile base")
    k = len(prof.jumps)
    jump_times = prof.jump_times
    if any(t >= horizon for t in jump_times):
        raise ValueError("jump times must lie inside the horizon")

    tilts, tails = [], []
    for _, de in prof.jumps:
        comp, tail = extended_tilt_on_common(m, MacroState(n * k * de, u))
        tilts.append(comp)
        tails.append(tail)
        if tail > 0.05:
            warnings.warn(
                f"tilted component at energy {n * k * de} loses {tail:.3f} "
                "of its mass outside the common box",
                TailClipped,
            )

    bounds = [0.0] + list(jump_times) + [horizon]
    weights = np.array([1.0 - (k - i) / (n * k) if k else 1.0
                        for i in range(k + 1)])
    rest = []
    for i in range(k + 1):
        vals = np.zeros(grid.n_nodes)
        for j in range(i, k):
            vals += tilts[j].values / (n * k)
        rest.append(vals)

    times_all, seg_all, u_all = [], [], []
    handovers = []
    h_current = f0
    for i in range(k + 1):
        t0, t1 = bounds[i], bounds[i + 1]
        seg_times = np.linspace(t0, t1, snapshots_per_segment)
        if i > 0:
            seg_times = seg_times[1:]  # the jump time belongs to the left segment
        rel_times = seg_times - t0
        # the first segment evolves f0 itself and is identical for every n
        key = (i, 0 if i == 0 else n)
        if shared_segment_paths is not None and key in shared_segment_paths:
            u_seg = shared_segment_paths[key]
        else:
            u_seg = _semigroup_histograms(h_current, rel_times, n_mf, replicas,
                                          rng_seed + 101 * i)
            if shared_segment_paths is not None:
                shared_segment_paths[key] = u_seg
        times_all.extend(seg_times)
        seg_all.extend([i] * len(seg_times))
        u_all.extend(u_seg)
        if i < k:
            u_end = u_seg[-1]
            vals = (weights[i] * u_end.values + tilts[i].values / (n * k))
            vals /= weights[i + 1]
            neg = -float(grid.integrate(np.minimum(vals, 0.0)))
            if neg > negative_mass_tol:
                raise NegativeDensity(
                    f"hand-over density carries negative mass {neg}; "
                    "increase the approximation index")
            vals = np.maximum(vals, 0.0)
            h_current = GridDensity(grid, vals, check=False).normalized()
            handovers.append(h_current)

    densities, renorms = [], []
    for t, i, u_d in zip(times_all, seg_all, u_all):
        vals = weights[i] * u_d.values + rest[i]
        d = GridDensity(grid, vals, check=False)
        renorms.append(d.mass)
        densities.append(d.normalized())
    f_path = DensityPath(np.asarray(times_all), densities)
    return LuWPath(
        n=n, profile=prof, horizon=horizon, times=np.asarray(times_all),
        segment_of=np.asarray(seg_all), weights=weights, u_paths=u_all,
        rest=rest, f_path=f_path, handovers=handovers, tilt_tails=tails,
        renormalizations=renorms,
    )


# ---------------------------------------------------------------------------
# rate functionals along the family
# ---------------------------------------------------------------------------

def _block_masses(density: GridDensity, stride: int) -> np.ndarray:
    """Aggregate node masses into stride x stride blocks (flattened)."""
    g = density.grid
    if g.points % stride:
        raise ValueError("stride must divide the grid point count")
    nb = g.points // stride
    masses = (g.weights * density.values).reshape(g.points, g.points)
    return masses.reshape(nb, stride, nb, stride).sum(axis=(1, 3)).ravel()


def _block_centers(grid: VelocityGrid, stride: int) -> np.ndarray:
    nb = grid.points // stride
    axis = grid.axis.reshape(nb, stride).mean(axis=1)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack((xx.ravel(), yy.ravel()))


def mixture_dynamical_rate(path: LuWPath, stride: int = 4) -> float:
    """Dynamical rate of the mixture pair in grid-analytic form.

    The flow density is the evolving-part product and the reference the
    full mixture product; the ratio does not depend on the scattering
    direction, so the angular integral reduces to the total pair rate and
    per snapshot the cost is a double sum over coarse velocity blocks:
    (1/2) kappa |c_A - c_B| [a log(a/c) - a + c] with a, c the products of
    block masses.  Aggregating blocks (instead of sampling nodes) keeps
    the histogram noise of the simulated evolving component from
    inflating the entropy integrand.
    """
    grid = path.f_path.grid
    centers = _block_centers(grid, stride)
    diff = centers[:, None, :] - centers[None, :, :]
    kernel_w = 0.5 * kappa(2) * np.sqrt(np.sum(diff**2, axis=2))

    def spatial_cost(u_density, f_density, weight):
        mu = _block_masses(u_density, stride)
        mf = _block_masses(f_density, stride)
        a = weight * np.outer(mu, mu)
        c = np.outer(mf, mf)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where((a > 0) & (c > 0), a / c, 1.0)
            term = np.where(a > 0, a * np.log(ratio), 0.0) - a + c
        return float(np.sum(kernel_w * term))

    total = 0.0
    times = path.times
    for i in range(path.weights.size):
        sel = np.nonzero(path.segment_of == i)[0]
        if sel.size < 2:
            continue
        costs = np.array([
            spatial_cost(path.u_paths[s], path.f_path.densities[s],
                         path.weights[i])
            for s in sel
        ])
        total += float(np.trapezoid(costs, times[sel]))
    return total


def luw_rate_convergence(f0: GridDensity, prof: EnergyProfile, m: BaseMeasure,
                         x: MacroState, n_list, horizon: float,
                         n_mf: int = 4000, replicas: int = 25, rng_seed: int = 0,
                         snapshots_per_segment: int = 21, stride: int = 4):
    """Table of (n, dynamical rate, static rate) along the approximant
    family, plus the limiting static cost of the initial datum.

    The first segment's semigroup path does not depend on n and is shared
    across the family.
    """
    if x.e <= prof.base + prof.total_gain:
        raise ValueError("the conditioning energy must exceed the final profile energy")
    shared: dict = {}
    rows = []
    paths = {}
    for n in n_list:
        path = build_luw_approximant(
            f0, prof, n, m, x.u, horizon, n_mf=n_mf, replicas=replicas,
            rng_seed=rng_seed, snapshots_per_segment=snapshots_per_segment,
            shared_segment_paths=shared)
        j = mixture_dynamical_rate(path, stride=stride)
        # the static cost uses the analytic initial mixture, free of the
        # sampling noise that the simulated segment snapshots carry
        pi0 = GridDensity(f0.grid,
                          path.weights[0] * f0.values + path.rest[0],
                          check=False).normalized()
        h = micro_sanov_rate(pi0, m, x)
        rows.append((n, j, h))
        paths[n] = path
    g = solve_tilt(m, x)
    target = (relative_entropy(f0, tilt_measure(m, x))
              + (m.gamma0_star - g.gamma0) * (x.e - f0.energy()))
    return np.array(rows), target, paths


def luw_canonical_cost(m: BaseMeasure, prof: EnergyProfile,
                       e_max_factor: float = 6.0):
    """Cost of the energy-jump path under i.i.d. initial data.

    Returns (closed form, numeric minimum): the closed form is the tail
    index times the total energy gain; the numeric value minimizes the
    macrostate cost plus the static rate of the base measure over
    conditioning energies dominating the final profile energy.
    """
    if not math.isfinite(m.gamma0_star):
        raise ValueError("the closed form needs a finite exponential-tail index")
    state = m.mean_state()
    if abs(state.e - prof.base) > 1e-3:
        raise ValueError("profile must start at the mean energy of the base measure")
    if not prof.jumps:
        warnings.warn("profile has no jumps; the cost is zero", NoJump)
        return 0.0, 0.0
    closed = m.gamma0_star * prof.total_gain
    e_final = prof.base + prof.total_gain
    pi0 = m.as_grid_density()

    def objective(e):
        return static_cost(m, e, state.u, pi0, pi0.energy())

    e_star, numeric = _golden_minimize(objective, e_final,
                                       e_max_factor * e_final, tol=1e-10)
    edge = objective(e_final)
    if edge < numeric:
        e_star, numeric = e_final, edge
    return closed, numeric
