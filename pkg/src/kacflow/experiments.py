"""Experiment drivers: rare-event scans and level-set diagnostics.

These are the numerical protocols the command-line front end exposes:

* ``sanov_scan`` estimates the decay rate of an energy-deficit event under
  the microcanonical ensemble, both by direct counting and by
  importance sampling from a tilted ensemble, and compares both against a
  variational proxy of the rate-function infimum over the event.
* ``kac_ldp_scan`` estimates the decay rate of a tube event around a
  perturbed-dynamics target pair by simulating the tilted kernel and
  reweighting with the exponential martingale.
* ``zero_level_scan`` tracks the binned dynamical rate of typical runs as
  the particle number grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .errors import EventTooRare, WeightDegenerate
from .grid import GridDensity
from .kac import simulate_null_collision, simulate_perturbed, tilted_hard_sphere_kernel
from .measures import BaseMeasure, MacroState, micro_sanov_rate, solve_tilt
from .microcanonical import Configuration, _collision_sweep, _uniform_sphere
from .observables import EmpiricalPath, FlowBinning, empirical_flow
from .rates import DiscretizedPair, dynamical_rate
from .seeding import replica_rng


# ---------------------------------------------------------------------------
# energy-deficit events under the microcanonical ensemble
# ---------------------------------------------------------------------------

def truncated_energy(velocities: np.ndarray, radius: float) -> np.ndarray:
    """Per-configuration mean of |v|^2/2 restricted to speeds <= radius."""
    v = np.asarray(velocities, dtype=float)
    z = 0.5 * np.sum(v**2, axis=-1)
    z = np.where(np.linalg.norm(v, axis=-1) <= radius, z, 0.0)
    return z.mean(axis=-1)


def sample_gaussian_micro_batch(reps: int, n: int, x: MacroState,
                                rng: np.random.Generator) -> np.ndarray:
    """Vectorized exact Gaussian microcanonical sampler, (reps, n, d)."""
    w = rng.normal(size=(reps, n, x.dim))
    centered = w - w.mean(axis=1, keepdims=True)
    norm2 = np.sum(centered**2, axis=(1, 2), keepdims=True)
    r = np.sqrt(2.0 * n * x.internal_energy / norm2)
    return x.u + r * centered


@dataclass
class DeficitEvent:
    """Energy-deficit event: mean truncated energy at most e - deficit."""

    x: MacroState
    radius: float
    deficit: float

    @property
    def threshold(self) -> float:
        return self.x.e - self.deficit

    def indicator(self, velocities: np.ndarray) -> np.ndarray:
        return truncated_energy(velocities, self.radius) <= self.threshold


def energy_deficit_infimum(m: BaseMeasure, event: DeficitEvent):
    """Variational proxy of the rate-function infimum over the event.

    Minimizes the microcanonical Sanov rate over the exponential family
    m_{e,u} exp(-beta * truncated_energy + eta_shift * zeta0 + xi . v),
    with the multipliers solving the moment conditions: truncated energy
    at the event threshold, total energy at the conditioning value, and
    momentum at u.  Returns (proxy value, beta, minimizing density).
    """
    from .measures import tilt_measure

    x = event.x
    g = solve_tilt(m, x)
    m_eu = tilt_measure(m, x)
    grid = m.grid
    speeds = np.linalg.norm(grid.nodes, axis=1)
    t_stat = grid.zeta0 * (speeds <= event.radius)
    log_w = np.log(m_eu.values) + np.log(grid.weights)
    zeta = np.column_stack((t_stat, grid.zeta0, grid.nodes))
    target = np.array([event.threshold, x.e, *x.u])

    def moments(params):
        expo = log_w + zeta @ params
        expo -= logsumexp(expo)
        p = np.exp(expo)
        return p @ zeta, p

    def residual(params):
        mom, _ = moments(params)
        return mom - target

    sol = optimize.root(residual, np.zeros(2 + x.dim), method="hybr",
                        options={"xtol": 1e-12})
    if not sol.success:
        raise RuntimeError(f"deficit-proxy solve failed: {sol.message}")
    params = sol.x
    _, p = moments(params)
    with np.errstate(divide="ignore", invalid="ignore"):
        density = np.where(grid.weights > 0, p / grid.weights, 0.0)
    pi_star = GridDensity(grid, density, check=False)
    value = micro_sanov_rate(pi_star, m, x, tol_moment=1e-4)
    beta = -float(params[0])
    return value, beta, pi_star


def _tilted_micro_chain(m: BaseMeasure, n: int, x: MacroState, psi,
                        sweeps: int, burn_in: int, thin: int,
                        rng: np.random.Generator, init_density=None):
    """Matched-pair collision MCMC for the psi-tilted microcanonical law.

    ``psi(velocities) -> per-particle values`` tilts the base measure by
    exp(psi).  When ``init_density`` is given, the chain starts from an
    i.i.d. draw of it projected onto the constraint manifold, which puts
    tail-dominated tilted laws in their typical region from the start.
    """
    from .microcanonical import sample_from_density, sample_gaussian_micro, _renormalize

    base_log = m.log_density_at

    def log_density(vel):
        return base_log(vel) + psi(vel)

    if init_density is None:
        v = sample_gaussian_micro(n, x, rng).velocities
    else:
        v = _renormalize(sample_from_density(init_density, n, rng), x)
    per_sweep = n // 2
    retained = []
    for s in range(sweeps):
        perm = rng.permutation(n)
        pairs = perm[: 2 * per_sweep].reshape(-1, 2)
        omegas = _uniform_sphere(rng, per_sweep, x.dim)
        _collision_sweep(v, pairs, omegas, log_density, rng)
        if s % 200 == 199:
            v = _renormalize(v, x)
        if s >= burn_in and (s - burn_in) % thin == 0:
            retained.append(v.copy())
    return retained


def _ladder_log_probability(m: BaseMeasure, n: int, x: MacroState,
                            event: DeficitEvent, beta_star: float,
                            sweeps: int, thin: int, rng: np.random.Generator,
                            n_steps: int = 16):
    """One independent stepping-stone estimate of log P(event).

    Walks a ladder of tilts exp(-beta_k * truncated energy) from beta = 0
    up to the dual-optimal beta, warm-starting each chain from the last
    state of the previous one; the ratio of consecutive normalizers is
    estimated at every rung and the event term at the top, where the
    tilted law concentrates on the event boundary.  Returns (log p, the
    smallest effective sample size seen along the ladder).
    """
    from .microcanonical import sample_gaussian_micro, _renormalize

    betas = np.linspace(0.0, beta_star, n_steps + 1)
    radius = event.radius
    base_log = m.log_density_at

    def t_sum(vel):
        z = 0.5 * np.sum(vel**2, axis=-1)
        return float(np.sum(z * (np.linalg.norm(vel, axis=-1) <= radius)))

    v = sample_gaussian_micro(n, x, rng).velocities
    per_sweep = n // 2
    burn = max(sweeps // 4, 50)
    log_z = 0.0
    min_ess = math.inf
    top_logs, top_hits = [], []
    for k, bk in enumerate(betas):
        def log_density(vel, _b=bk):
            z = 0.5 * np.sum(np.asarray(vel)**2, axis=-1)
            inside = np.linalg.norm(np.asarray(vel), axis=-1) <= radius
            return base_log(vel) - _b * z * inside

        samples_t = []
        for s in range(sweeps):
            perm = rng.permutation(n)
            pairs = perm[: 2 * per_sweep].reshape(-1, 2)
            omegas = _uniform_sphere(rng, per_sweep, x.dim)
            _collision_sweep(v, pairs, omegas, log_density, rng)
            if s % 200 == 199:
                v = _renormalize(v, x)
            if s >= burn and (s - burn) % thin == 0:
                samples_t.append(t_sum(v))
                if k == n_steps:
                    top_logs.append(betas[-1] * samples_t[-1])
                    top_hits.append(samples_t[-1] <= n * event.threshold)
        samples_t = np.array(samples_t)
        if k < n_steps:
            dbeta = betas[k + 1] - bk
            expo = -dbeta * samples_t
            log_z += float(logsumexp(expo) - math.log(expo.size))
            min_ess = min(min_ess, float(
                np.exp(2 * logsumexp(expo) - logsumexp(2 * expo))))
    top_logs = np.array(top_logs)
    top_hits = np.array(top_hits, dtype=bool)
    if not top_hits.any():
        return -math.inf, min_ess
    log_event = float(logsumexp(top_logs[top_hits]) - math.log(top_logs.size))
    min_ess = min(min_ess, float(np.exp(
        2 * logsumexp(top_logs[top_hits]) - logsumexp(2 * top_logs[top_hits]))))
    return log_z + log_event, min_ess


@dataclass
class SanovScanResult:
    n: int
    direct_estimate: float
    direct_hits: int
    direct_samples: int
    is_estimate: float
    is_se: float
    ess: float


def sanov_scan(m: BaseMeasure, event: DeficitEvent, n_list, seed: int,
               direct_samples: int = 200_000, chains: int = 24,
               sweeps: int = 3000, thin: int = 5,
               use_tilting: bool = True, beta: float = None):
    """Decay-rate estimates of the deficit event at several particle
    numbers.

    Direct counting uses the exact Gaussian-ensemble sampler; importance
    sampling draws from the collision MCMC for the base tilted by
    exp(-beta * truncated energy) and reweights self-normalizedly, so no
    normalization constant is needed.  Requires a Gaussian base measure.
    Raises EventTooRare when the smallest particle number sees fewer than
    10 direct hits with tilting disabled, WeightDegenerate when the
    effective sample size of the weights drops below 10.
    """
    if m.family != "gaussian":
        raise ValueError("the scan needs the exact sampler of a Gaussian base")
    if beta is None:
        _, beta, pi_star = energy_deficit_infimum(m, event)
    else:
        pi_star = None
    x = event.x
    results = []
    for idx, n in enumerate(sorted(n_list)):
        rng = replica_rng(seed, 1000 + n)
        # direct Monte Carlo in manageable batches
        hits = 0
        batch = 50_000
        done = 0
        while done < direct_samples:
            take = min(batch, direct_samples - done)
            vs = sample_gaussian_micro_batch(take, n, x, rng)
            hits += int(np.count_nonzero(event.indicator(vs)))
            done += take
        p_direct = hits / direct_samples
        direct = -math.log(p_direct) / n if hits > 0 else math.inf
        if idx == 0 and hits < 10 and not use_tilting:
            raise EventTooRare(
                f"{hits} direct hits at N = {n} and tilting is disabled")

        is_estimate, is_se, ess = math.nan, math.nan, math.nan
        if use_tilting:
            per_chain, ess_list = [], []
            for c in range(chains):
                crng = replica_rng(seed, 10_000 + 97 * n + c)
                log_p_c, ess_c = _ladder_log_probability(
                    m, n, x, event, beta, sweeps, thin, crng)
                per_chain.append(log_p_c)
                ess_list.append(ess_c)
            per_chain = np.array(per_chain)
            ess = float(np.min(ess_list))
            if ess < 10:
                raise WeightDegenerate(f"effective sample size {ess:.1f} < 10")
            log_p = float(logsumexp(per_chain) - math.log(chains))
            is_estimate = -log_p / n
            # spread of the independent per-chain log estimates; chains whose
            # top rung saw no hit are excluded and the spread inflated
            finite = per_chain[np.isfinite(per_chain)]
            if finite.size >= 2:
                is_se = (float(finite.std(ddof=1) / math.sqrt(finite.size))
                         * math.sqrt(chains / finite.size) / n)
            else:
                is_se = math.inf
        results.append(SanovScanResult(
            n=n, direct_estimate=direct, direct_hits=hits,
            direct_samples=direct_samples, is_estimate=is_estimate,
            is_se=is_se, ess=ess))
    return results


# ---------------------------------------------------------------------------
# tube events for the path large deviations
# ---------------------------------------------------------------------------

@dataclass
class TubeStatistics:
    """Finitely many functionals whose half-width boxes define the tube."""

    flow_mass: float
    flow_bump: float
    measure_bump: float

    def as_array(self):
        return np.array([self.flow_mass, self.flow_bump, self.measure_bump])


def _tube_statistics(traj) -> TubeStatistics:
    flow = empirical_flow(traj)
    mass = flow.pair_functional(lambda t, a, b, c, d: np.ones(np.shape(a)[:-1]))

    def bump(t, v, vs, vo, vso):
        z = np.einsum("...d,...d->...", v, v) + np.einsum("...d,...d->...", vs, vs)
        return np.exp(-0.25 * z)

    fb = flow.pair_functional(bump)
    mid = traj.configuration_at(0.5 * traj.horizon).velocities
    mb = float(np.mean(np.exp(-0.5 * np.sum(mid**2, axis=1))))
    return TubeStatistics(mass, fb, mb)


def _constant_tilt_log_weight(traj, c: float) -> float:
    """Exponential-martingale log weight for the constant tilt F = c.

    The tilted total rate is e^c times the original, so the compensator
    reduces to (e^c - 1) times the time integral of the total pair rate,
    summed exactly over constancy intervals.
    """
    from .kac import kappa

    kap = kappa(traj.dim)
    n = traj.n
    lam_integral = 0.0
    for t0, t1, v in traj.intervals():
        diff = v[:, None, :] - v[None, :, :]
        lam_sum = 0.5 * kap * float(np.sqrt((diff**2).sum(axis=2)).sum())
        lam_integral += (t1 - t0) * lam_sum / n
    return c * traj.event_count - (math.exp(c) - 1.0) * lam_integral


@dataclass
class KacLdpRow:
    n: int
    estimate: float
    se: float
    ess: float
    target_rate: float
    tube_hits: int
    replicas: int
    direct_estimate: float = math.nan
    direct_hits: int = 0
    direct_replicas: int = 0


def kac_ldp_scan(x: MacroState, n_list, epsilon: float, horizon: float,
                 seed: int, replicas: int = 400, calibration: int = 100,
                 half_widths=(0.08, 0.02, 0.02), width_sigmas: float = 1.2,
                 direct_replicas: int = 0):
    """Decay-rate estimate of a tube event around the typical path of the
    kernel tilted by the constant factor (1 + epsilon).

    The tube is a box around calibration-run medians of three bounded
    statistics.  The probability under the hard-sphere dynamics is
    estimated by simulating the tilted kernel and reweighting each run by
    the inverse exponential martingale; the comparison column is the
    dynamical rate of the tilted target, whose flow density is (1 +
    epsilon) times its reference: [(1+e)log(1+e) - e] * reference mass.
    """
    log_factor = math.log1p(epsilon)

    def f_const(t, v, vs, vo, vso):
        return np.full(np.shape(v)[:-1], log_factor)

    rows = []
    for n in n_list:
        speed_bound = 2.0 * math.sqrt(2.0 * n * x.e) * 1.001
        kern = tilted_hard_sphere_kernel(f_const, f_bound=log_factor,
                                         speed_bound=speed_bound)
        # calibration: centers of the tube under the tilted dynamics
        stats = []
        for k in range(calibration):
            init = Configuration(sample_gaussian_micro_batch(
                1, n, x, replica_rng(seed, 5_000 + 31 * n + k))[0])
            traj = simulate_perturbed(init, kern, horizon=horizon,
                                      rng=replica_rng(seed, 6_000 + 31 * n + k))
            stats.append(_tube_statistics(traj).as_array())
        all_stats = np.stack(stats)
        center = np.median(all_stats, axis=0)
        # half-widths: the declared fractions floored at a multiple of the
        # calibration spread; tighter tubes pin the martingale statistics
        # (smaller weight variance) at the price of fewer hits
        widths = np.maximum(
            np.asarray(half_widths) * np.maximum(np.abs(center), 0.05),
            width_sigmas * all_stats.std(axis=0, ddof=1))

        # reference mass of the typical tilted path for the target rate
        ref_mass = float(np.mean([s[0] for s in stats])) / (1.0 + epsilon)
        target = ((1 + epsilon) * math.log1p(epsilon) - epsilon) * ref_mass

        log_terms = []
        hits = 0
        for k in range(replicas):
            init = Configuration(sample_gaussian_micro_batch(
                1, n, x, replica_rng(seed, 7_000 + 31 * n + k))[0])
            traj = simulate_perturbed(init, kern, horizon=horizon,
                                      rng=replica_rng(seed, 8_000 + 31 * n + k))
            s = _tube_statistics(traj).as_array()
            if np.all(np.abs(s - center) <= widths):
                hits += 1
                log_terms.append(-_constant_tilt_log_weight(traj, log_factor))
        if hits == 0:
            raise WeightDegenerate("no tilted run fell inside the tube")
        weights = np.zeros(replicas)
        weights[:hits] = np.exp(np.array(log_terms))
        ess = float(weights.sum()**2 / np.sum(weights**2))
        if ess < 10:
            raise WeightDegenerate(f"effective sample size {ess:.1f} < 10")
        p_hat = float(weights.mean())
        se_p = float(weights.std(ddof=1) / math.sqrt(replicas))
        direct_est, direct_hits = math.nan, 0
        for k in range(direct_replicas):
            init = Configuration(sample_gaussian_micro_batch(
                1, n, x, replica_rng(seed, 9_000 + 31 * n + k))[0])
            traj = simulate_null_collision(init, horizon=horizon,
                                           rng=replica_rng(seed, 9_500 + 31 * n + k))
            s = _tube_statistics(traj).as_array()
            if np.all(np.abs(s - center) <= widths):
                direct_hits += 1
        if direct_replicas and direct_hits:
            direct_est = -math.log(direct_hits / direct_replicas) / n
        rows.append(KacLdpRow(
            n=n, estimate=-math.log(p_hat) / n,
            se=se_p / (p_hat * n),
            ess=ess, target_rate=target, tube_hits=hits, replicas=replicas,
            direct_estimate=direct_est, direct_hits=direct_hits,
            direct_replicas=direct_replicas))
    return rows


# ---------------------------------------------------------------------------
# zero level set of the dynamical rate
# ---------------------------------------------------------------------------

def zero_level_scan(n_list, horizon: float, seed: int, sigma: float = 1.0,
                    binning: FlowBinning = None):
    """Binned dynamical rate of one typical hard-sphere run per particle
    number, started from i.i.d. Gaussian velocities."""
    if binning is None:
        binning = FlowBinning(horizon=horizon)
    rows = []
    for n in n_list:
        rng = replica_rng(seed, n)
        init = Configuration(sigma * rng.normal(size=(n, 2)))
        traj = simulate_null_collision(init, horizon=horizon,
                                       rng=replica_rng(seed, 17 * n + 1))
        path = EmpiricalPath(traj)
        q = empirical_flow(traj).histogram(binning)
        rows.append((n, dynamical_rate(DiscretizedPair(path, q)),
                     traj.event_count))
    return np.array(rows)
