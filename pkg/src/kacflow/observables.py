"""Empirical measures, empirical flows, and their coarse-grained carriers.

A trajectory induces two observables: the empirical measure path (the
average of point masses at the current velocities, right-continuous in
time) and the empirical flow (weight 1/N at every collision's time,
incoming pair and scattering direction).  Flow measures are represented
in the (v, v*, omega) chart: the outgoing pair is recovered through the
collision map, and admissible test functions are symmetric under both
the incoming and the outgoing label swap, so integrals computed in this
chart are well defined.

For rate-functional evaluation both objects are binned: velocities on a
uniform box partition, directions by angle (d = 2), time uniformly.  The
reference flow of a measure path has the factorized bin masses
(1/2) dt pi(bin) pi(bin*) integral_of_B_over_the_angle_bin, which this
module evaluates in closed form; only the degenerate same-velocity-bin
entries fall back to a sub-grid average, so that coarse bins never report
a spuriously vanishing reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import GridMismatch
from .grid import GridDensity, VelocityGrid
from .kac import Trajectory, kappa
from .microcanonical import histogram_velocities


@dataclass(frozen=True)
class FlowTestFunction:
    """Bounded test function F(t; v, v*, v', v*') of an event.

    ``fn`` must be vectorized over leading axes of the velocity arguments
    (arrays of shape (..., d)) and symmetric under swapping the incoming
    pair and under swapping the outgoing pair.  ``time_dependent`` tells
    integrators whether within-interval time quadrature is needed.
    """

    fn: object
    bound: float = math.inf
    time_dependent: bool = False

    def __call__(self, t, v, vstar, vout, vstarout):
        return self.fn(t, v, vstar, vout, vstarout)


def symmetrized(fn):
    """Average a raw evaluator over the two label swaps."""
    def wrapped(t, v, vstar, vout, vstarout):
        return 0.25 * (
            np.asarray(fn(t, v, vstar, vout, vstarout), dtype=float)
            + np.asarray(fn(t, vstar, v, vout, vstarout), dtype=float)
            + np.asarray(fn(t, v, vstar, vstarout, vout), dtype=float)
            + np.asarray(fn(t, vstar, v, vstarout, vout), dtype=float)
        )
    return wrapped


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------

def snapshot_times(horizon, n=101, extra=()):
    times = np.linspace(0.0, horizon, n)
    if len(extra):
        times = np.unique(np.concatenate((times, np.asarray(extra, dtype=float))))
    return times


class EmpiricalPath:
    """Velocity snapshots of one trajectory at fixed times, weight 1/N."""

    def __init__(self, traj: Trajectory, times=None):
        self.traj = traj
        self.times = (np.asarray(times, dtype=float) if times is not None
                      else snapshot_times(traj.horizon))
        self.configs = traj.snapshots(self.times)
        self.n = traj.n

    @property
    def horizon(self):
        return self.traj.horizon

    def moments(self, fn) -> np.ndarray:
        """Per-snapshot empirical mean of fn(velocities)."""
        return np.array([np.mean(fn(v)) for v in self.configs])

    def energies(self, radius=None) -> np.ndarray:
        out = []
        for v in self.configs:
            z = 0.5 * np.sum(v**2, axis=1)
            if radius is not None:
                z = z * (np.linalg.norm(v, axis=1) <= radius)
            out.append(z.mean())
        return np.array(out)

    def histogram_at(self, k: int, grid: VelocityGrid) -> GridDensity:
        return histogram_velocities(self.configs[k], grid)

    def time_binned_occupancy(self, binning) -> np.ndarray:
        """Exact time-average velocity-bin occupancy per time bin.

        Integrates the piecewise-constant empirical occupancy over each
        time bin, splitting constancy intervals across bin boundaries.
        """
        pibar = np.zeros((binning.n_time, binning.n_v_total))
        dt = binning.horizon / binning.n_time
        for t0, t1, v in self.traj.intervals():
            idx = binning.velocity_bin_flat(v)
            counts = np.bincount(idx, minlength=binning.n_v_total) / self.n
            k0 = min(int(t0 / dt), binning.n_time - 1)
            k1 = min(int(t1 / dt) + 1, binning.n_time)
            for k in range(k0, k1):
                lo, hi = k * dt, (k + 1) * dt
                overlap = min(t1, hi) - max(t0, lo)
                if overlap > 0:
                    pibar[k] += overlap * counts
        return pibar / dt


class DensityPath:
    """Time-indexed grid densities (an analytic or averaged measure path)."""

    def __init__(self, times, densities):
        self.times = np.asarray(times, dtype=float)
        if len(densities) != self.times.size:
            raise ValueError("one density per snapshot time required")
        grid = densities[0].grid
        for d in densities:
            grid.require_same(d.grid)
        self.densities = list(densities)
        self.grid = grid

    @property
    def horizon(self):
        return float(self.times[-1])

    def energies(self, radius=None) -> np.ndarray:
        if radius is None:
            return np.array([d.energy() for d in self.densities])
        mask = np.linalg.norm(self.grid.nodes, axis=1) <= radius
        z = self.grid.zeta0 * mask
        return np.array([
            float((self.grid.weights * d.values) @ z) for d in self.densities
        ])

    def time_binned_occupancy(self, binning) -> np.ndarray:
        """Velocity-bin masses averaged over the snapshots in each time bin."""
        agg = binning.aggregate_grid_masses(self.grid)
        masses = np.stack([agg(d) for d in self.densities])
        dt = binning.horizon / binning.n_time
        pibar = np.zeros((binning.n_time, binning.n_v_total))
        for k in range(binning.n_time):
            lo, hi = k * dt, (k + 1) * dt
            sel = (self.times >= lo - 1e-12) & (self.times <= hi + 1e-12)
            if not np.any(sel):
                raise ValueError("a time bin contains no snapshot; refine the path")
            pibar[k] = masses[sel].mean(axis=0)
        return pibar


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowBinning:
    """Product binning of [0, T] x box x box x S^1 for flow histograms.

    The angular offset defaults to half a bin so that no bin center is
    exactly perpendicular to any lattice velocity difference.
    """

    horizon: float
    n_time: int = 20
    n_v: int = 16
    n_omega: int = 16
    half_width: float = 8.0
    dim: int = 2

    def __post_init__(self):
        if self.dim != 2:
            raise NotImplementedError("flow histograms are implemented for d = 2")

    @property
    def n_v_total(self) -> int:
        return self.n_v**2

    @property
    def v_spacing(self) -> float:
        return 2.0 * self.half_width / self.n_v

    @property
    def omega_offset(self) -> float:
        return math.pi / self.n_omega

    def time_bin(self, t):
        dt = self.horizon / self.n_time
        return np.minimum((np.asarray(t, dtype=float) / dt).astype(int),
                          self.n_time - 1)

    def velocity_bin_flat(self, v) -> np.ndarray:
        v = np.atleast_2d(np.asarray(v, dtype=float))
        ix = np.clip(((v + self.half_width) / self.v_spacing).astype(int),
                     0, self.n_v - 1)
        return ix[:, 0] * self.n_v + ix[:, 1]

    def omega_bin(self, omega) -> np.ndarray:
        omega = np.atleast_2d(np.asarray(omega, dtype=float))
        theta = np.mod(np.arctan2(omega[:, 1], omega[:, 0]) - self.omega_offset,
                       2.0 * math.pi)
        width = 2.0 * math.pi / self.n_omega
        return np.minimum((theta / width).astype(int), self.n_omega - 1)

    @cached_property
    def v_bin_centers(self) -> np.ndarray:
        axis = -self.half_width + (np.arange(self.n_v) + 0.5) * self.v_spacing
        xx, yy = np.meshgrid(axis, axis, indexing="ij")
        return np.column_stack((xx.ravel(), yy.ravel()))

    def omega_bin_edges(self, k):
        width = 2.0 * math.pi / self.n_omega
        a = self.omega_offset + k * width
        return a, a + width

    def omega_bin_center(self, k) -> np.ndarray:
        a, b = self.omega_bin_edges(k)
        mid = 0.5 * (a + b)
        return np.array([math.cos(mid), math.sin(mid)])

    def bin_center_event(self, key):
        """Representative event (t, v, v*, v', v*', omega) of a bin."""
        from .kac import collision_map

        it, iv, ivs, iom = key
        dt = self.horizon / self.n_time
        t = (it + 0.5) * dt
        v = self.v_bin_centers[iv]
        vs = self.v_bin_centers[ivs]
        om = self.omega_bin_center(iom)
        vo, vso = collision_map(v, vs, om)
        return t, v, vs, vo, vso, om

    def aggregate_grid_masses(self, grid: VelocityGrid):
        """Map from a GridDensity on ``grid`` to bin masses.

        Node masses are deposited with cloud-in-cell (bilinear) weights so
        that incommensurate grid/bin spacings do not snap mass off-center;
        particle paths, whose atoms are genuinely pointlike, use plain
        nearest-bin counts instead (matching how events are binned).
        """
        u = (grid.nodes + self.half_width) / self.v_spacing - 0.5
        i0 = np.floor(u).astype(int)
        frac = u - i0

        def agg(density: GridDensity):
            mass = grid.weights * density.values
            out = np.zeros((self.n_v, self.n_v))
            for dx in (0, 1):
                for dy in (0, 1):
                    wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                    wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                    ix = np.clip(i0[:, 0] + dx, 0, self.n_v - 1)
                    iy = np.clip(i0[:, 1] + dy, 0, self.n_v - 1)
                    np.add.at(out, (ix, iy), mass * wx * wy)
            return out.ravel()

        return agg


def _abs_cos_antiderivative(x):
    """Integral of |cos| from 0 to x, for any real x (odd function)."""
    x = np.asarray(x, dtype=float)
    sign = np.sign(x)
    ax = np.abs(x)
    k = np.floor(ax / math.pi)
    r = ax - k * math.pi
    partial = np.where(r <= 0.5 * math.pi, np.sin(r), 2.0 - np.sin(r))
    return sign * (2.0 * k + partial)


def integral_abs_cos(a, b, phase=0.0):
    """Integral of |cos(theta - phase)| over [a, b]."""
    return (_abs_cos_antiderivative(b - phase)
            - _abs_cos_antiderivative(a - phase))


class ReferenceFlow:
    """Factorized reference flow of a measure path on a flow binning.

    Bin masses are (1/2) dt pibar(v-bin) pibar(v*-bin) times the exact
    integral of the hard-sphere kernel over the angle bin, evaluated at
    the velocity-bin midpoints.  Same-bin pairs, whose midpoint difference
    vanishes, use a deterministic sub-grid average of the kernel instead;
    all other midpoint differences on this lattice are never exactly
    perpendicular to an (offset) bin-center direction, so reference masses
    vanish only where the occupancy does.
    """

    _SUBGRID = 5

    def __init__(self, path, binning: FlowBinning, diagonal: str = "subgrid"):
        if diagonal not in ("subgrid", "midpoint"):
            raise ValueError("diagonal policy must be 'subgrid' or 'midpoint'")
        self.binning = binning
        self.pibar = path.time_binned_occupancy(binning)
        self.dt = binning.horizon / binning.n_time
        self._diag = (self._diagonal_kernel_table() if diagonal == "subgrid"
                      else np.zeros(binning.n_omega))

    def _diagonal_kernel_table(self) -> np.ndarray:
        """Angle-bin integrals of B averaged over same-bin velocity pairs."""
        b = self.binning
        h = b.v_spacing
        s = np.linspace(-0.5 * h, 0.5 * h, self._SUBGRID + 1)
        s = 0.5 * (s[1:] + s[:-1])
        xx, yy = np.meshgrid(s, s, indexing="ij")
        pts = np.column_stack((xx.ravel(), yy.ravel()))
        diff = pts[:, None, :] - pts[None, :, :]
        diff = diff.reshape(-1, 2)
        norms = np.linalg.norm(diff, axis=1)
        phases = np.arctan2(diff[:, 1], diff[:, 0])
        out = np.empty(b.n_omega)
        for k in range(b.n_omega):
            a, bb = b.omega_bin_edges(k)
            vals = 0.5 * norms * integral_abs_cos(a, bb, phases)
            out[k] = float(vals.mean())
        return out

    def kernel_bin_integral(self, iv, ivs, iom):
        """Integral of B over the angle bin at the velocity-bin midpoints."""
        b = self.binning
        if iv == ivs:
            return float(self._diag[iom])
        w = b.v_bin_centers[iv] - b.v_bin_centers[ivs]
        a, bb = b.omega_bin_edges(iom)
        return 0.5 * float(np.linalg.norm(w)) * float(
            integral_abs_cos(a, bb, math.atan2(w[1], w[0])))

    def bin_mass(self, key) -> float:
        it, iv, ivs, iom = key
        return (0.5 * self.dt * self.pibar[it, iv] * self.pibar[it, ivs]
                * self.kernel_bin_integral(iv, ivs, iom))

    def total_mass(self) -> float:
        """Half the time integral of the binned pair rate.

        Accumulated in row chunks so fine binnings never materialize the
        full pair-rate table.
        """
        b = self.binning
        centers = b.v_bin_centers
        diag_rate = float(self._diag.sum())
        kap = kappa(2)
        total = 0.0
        p2 = self.pibar  # (n_time, n_bins)
        chunk = max(1, 2_000_000 // b.n_v_total)
        for lo in range(0, b.n_v_total, chunk):
            hi = min(lo + chunk, b.n_v_total)
            diff = centers[lo:hi, None, :] - centers[None, :, :]
            lam = kap * np.sqrt(np.sum(diff**2, axis=2))
            for r in range(lo, hi):
                lam[r - lo, r] = diag_rate
            total += float(np.einsum("ti,ij,tj->", p2[:, lo:hi], lam, p2))
        return 0.5 * self.dt * total

    def as_histogram(self, max_bins=2_000_000) -> "FlowHistogram":
        b = self.binning
        n_bins = b.n_time * b.n_v_total**2 * b.n_omega
        if n_bins > max_bins:
            raise MemoryError(
                f"dense reference flow would hold {n_bins} bins; "
                "use bin_mass/total_mass instead")
        bins = {}
        for it in range(b.n_time):
            occ = np.nonzero(self.pibar[it])[0]
            for iv in occ:
                for ivs in occ:
                    for iom in range(b.n_omega):
                        m = self.bin_mass((it, int(iv), int(ivs), iom))
                        if m > 0:
                            bins[(it, int(iv), int(ivs), iom)] = m
        return FlowHistogram(self.binning, bins)


class FlowHistogram:
    """Sparse 4-way histogram over (time, v, v*, omega) bins."""

    def __init__(self, binning: FlowBinning, bins: dict):
        self.binning = binning
        self.bins = bins

    @property
    def total_mass(self) -> float:
        return float(sum(self.bins.values()))

    def integrate(self, F) -> float:
        """Integral of a test function, evaluated at bin-center events."""
        fn = getattr(F, "fn", F)
        total = 0.0
        for key, mass in self.bins.items():
            t, v, vs, vo, vso, _ = self.binning.bin_center_event(key)
            total += mass * float(np.asarray(
                fn(t, v[None, :], vs[None, :], vo[None, :], vso[None, :])).ravel()[0])
        return total

    def scaled(self, factor) -> "FlowHistogram":
        return FlowHistogram(self.binning,
                             {k: factor * v for k, v in self.bins.items()})

    def __add__(self, other) -> "FlowHistogram":
        if self.binning != other.binning:
            raise GridMismatch("flow histograms live on different binnings")
        out = dict(self.bins)
        for k, v in other.bins.items():
            out[k] = out.get(k, 0.0) + v
        return FlowHistogram(self.binning, out)


class EmpiricalFlow:
    """Collision events of one trajectory with weight 1/N."""

    def __init__(self, traj: Trajectory):
        self.traj = traj
        self.n = traj.n

    @property
    def event_count(self) -> int:
        return self.traj.event_count

    def pair_functional(self, F) -> float:
        """Q^N(F): (1/N) sum of F over events; linear and bounded by
        (event count / N) sup |F|."""
        fn = getattr(F, "fn", F)
        if not self.traj.events:
            return 0.0
        t = np.array([ev.t for ev in self.traj.events])
        vin = np.stack([ev.v_in for ev in self.traj.events])
        vsin = np.stack([ev.vstar_in for ev in self.traj.events])
        vout = np.stack([ev.v_out for ev in self.traj.events])
        vsout = np.stack([ev.vstar_out for ev in self.traj.events])
        vals = np.asarray(fn(t, vin, vsin, vout, vsout), dtype=float)
        return float(vals.sum()) / self.n

    def histogram(self, binning: FlowBinning) -> FlowHistogram:
        """Bin events in the (v, v*, omega) chart, symmetrized over the
        incoming-label swap at fill time (half weight on each image)."""
        bins: dict = {}
        if not self.traj.events:
            return FlowHistogram(binning, bins)
        w = 0.5 / self.n
        t = np.array([ev.t for ev in self.traj.events])
        vin = np.stack([ev.v_in for ev in self.traj.events])
        vsin = np.stack([ev.vstar_in for ev in self.traj.events])
        om = np.stack([ev.omega for ev in self.traj.events])
        it = binning.time_bin(t)
        iv = binning.velocity_bin_flat(vin)
        ivs = binning.velocity_bin_flat(vsin)
        iom = binning.omega_bin(om)
        for k in range(it.size):
            key = (int(it[k]), int(iv[k]), int(ivs[k]), int(iom[k]))
            bins[key] = bins.get(key, 0.0) + w
            swapped = (int(it[k]), int(ivs[k]), int(iv[k]), int(iom[k]))
            bins[swapped] = bins.get(swapped, 0.0) + w
        return FlowHistogram(binning, bins)


# ---------------------------------------------------------------------------
# module operations
# ---------------------------------------------------------------------------

def empirical_measure_at(traj: Trajectory, t: float, grid: VelocityGrid = None):
    """The empirical measure at time t (right-continuous), either as the
    particle configuration or binned on a grid."""
    cfg = traj.configuration_at(t)
    if grid is None:
        return cfg
    return histogram_velocities(cfg.velocities, grid)


def empirical_flow(traj: Trajectory) -> EmpiricalFlow:
    return EmpiricalFlow(traj)


def balance_residual(path: EmpiricalPath, flow: EmpiricalFlow, phi,
                     dphi_dt=None) -> float:
    """Defect of the weak continuity equation coupling a measure path to
    its flow.

    ``phi(t, v)`` must be vectorized over rows of v.  For time-dependent
    test functions the time-derivative term requires ``dphi_dt`` and is
    integrated by the trapezoidal rule on the snapshot times (first-order
    accurate because the path jumps inside subintervals); the collision
    term is summed exactly over events.
    """
    times = path.times
    v0, vT = path.configs[0], path.configs[-1]
    boundary = (np.mean(phi(times[-1], vT)) - np.mean(phi(times[0], v0)))
    transport = 0.0
    if dphi_dt is not None:
        vals = np.array([np.mean(dphi_dt(t, v))
                         for t, v in zip(times, path.configs)])
        transport = float(np.trapezoid(vals, times))
    collision = 0.0
    for ev in flow.traj.events:
        collision += (float(phi(ev.t, ev.v_in[None, :])[0])
                      + float(phi(ev.t, ev.vstar_in[None, :])[0])
                      - float(phi(ev.t, ev.v_out[None, :])[0])
                      - float(phi(ev.t, ev.vstar_out[None, :])[0]))
    collision /= path.n
    return boundary - transport + collision


def reference_flow(path, binning: FlowBinning = None,
                   diagonal: str = "subgrid") -> ReferenceFlow:
    """Reference flow (1/2) dt pi pi B domega of a measure path, on bins.

    ``diagonal`` picks the kernel value for same-velocity-bin pairs:
    "subgrid" (default) averages the kernel over the bin so atoms spread
    over a cell never report a vanishing reference, "midpoint" evaluates
    at the coinciding centers and yields exactly zero there.
    """
    if binning is None:
        binning = FlowBinning(horizon=path.horizon)
    return ReferenceFlow(path, binning, diagonal=diagonal)


def energy_profile(path, radius=None):
    """Table of t -> mean energy of the path (optionally restricted to
    speeds at most ``radius``)."""
    return np.column_stack((path.times, path.energies(radius=radius)))
