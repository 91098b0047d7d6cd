"""Dynamical and full rate functionals on discretized measure-flow pairs.

The dynamical cost of a pair (measure path, flow) is the relative entropy
of the flow with respect to the reference flow of the path, evaluated
bin-wise: sum over bins of q log(q/q_ref) - q + q_ref, with +infinity as
soon as the flow charges a bin whose reference mass vanishes.  On top of
it sit the microcanonical rate (adding the initial-datum cost and the
energy-momentum constraint along the path) and the canonical rate (the
macrostate cost minimized over admissible conditioning energies).

A variational evaluation is also provided: maximizing
Q(F) - (1/2) int pi x pi (lambda^F - lambda) over a finite family of
bounded symmetric test functions yields a lower bound of the dynamical
cost up to the declared coarse-graining slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import brentq, minimize

from .errors import AlphaNotFound, EmptyFeasible, NonFiniteObjective
from .grid import GridDensity
from .measures import (
    BaseMeasure,
    MacroState,
    TOL_MOMENT,
    log_mgf,
    micro_sanov_rate,
    relative_entropy,
    solve_tilt,
    tilt_measure,
)
from .observables import (
    DensityPath,
    EmpiricalPath,
    FlowBinning,
    FlowHistogram,
    FlowTestFunction,
    ReferenceFlow,
)


@dataclass
class DiscretizedPair:
    """A measure path together with a binned flow.

    ``f_path`` is an EmpiricalPath or DensityPath; ``q`` a FlowHistogram.
    ``pi0`` optionally carries the initial law as a grid density (needed
    by the static part of the rate; analytic paths default to their first
    snapshot).
    """

    f_path: object
    q: FlowHistogram
    pi0: GridDensity = None

    def initial_density(self) -> GridDensity:
        if self.pi0 is not None:
            return self.pi0
        if isinstance(self.f_path, DensityPath):
            return self.f_path.densities[0]
        raise ValueError("empirical pairs need an explicit initial grid density")


def dynamical_rate(pair: DiscretizedPair, diagonal: str = "subgrid") -> float:
    """Bin-wise relative entropy of the flow against the path's reference.

    Unoccupied bins contribute their reference mass alone; a flow bin with
    vanishing reference mass makes the rate infinite.
    """
    ref = ReferenceFlow(pair.f_path, pair.q.binning, diagonal=diagonal)
    total = ref.total_mass()
    for key, mass in pair.q.bins.items():
        if mass == 0.0:
            continue
        q_ref = ref.bin_mass(key)
        if q_ref <= 0.0:
            return math.inf
        total += mass * math.log(mass / q_ref) - mass
    return total


def path_energies(f_path) -> np.ndarray:
    return f_path.energies()


def path_momenta(f_path) -> np.ndarray:
    if isinstance(f_path, DensityPath):
        return np.stack([d.momentum() for d in f_path.densities])
    return np.stack([v.mean(axis=0) for v in f_path.configs])


def micro_rate(pair: DiscretizedPair, m: BaseMeasure, x: MacroState,
               tol_moment: float = TOL_MOMENT) -> float:
    """Static cost of the initial law plus the dynamical cost, infinite
    unless every snapshot keeps momentum u and energy at most e."""
    energies = path_energies(pair.f_path)
    momenta = path_momenta(pair.f_path)
    if np.any(energies > x.e + tol_moment):
        return math.inf
    if np.any(np.linalg.norm(momenta - x.u, axis=1) > tol_moment):
        return math.inf
    h = micro_sanov_rate(pair.initial_density(), m, x, tol_moment=tol_moment)
    if not math.isfinite(h):
        return math.inf
    return h + dynamical_rate(pair)


def static_cost(m: BaseMeasure, e: float, u, pi0: GridDensity,
                pi0_energy: float) -> float:
    """cramer_rate(e, u) + entropy of pi0 against the (e, u)-tilt plus the
    tail penalty for the energy gap."""
    x = MacroState(e, u)
    g = solve_tilt(m, x)
    a = g.dot(x) - log_mgf(m, g)
    ent = relative_entropy(pi0, tilt_measure(m, x))
    gap = max(x.e - pi0_energy, 0.0)
    if not math.isfinite(m.gamma0_star):
        return a + ent if gap <= 1e-9 else math.inf
    return a + ent + (m.gamma0_star - g.gamma0) * gap


def _golden_minimize(fn, lo, hi, tol=1e-8, max_iter=200):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    xm = 0.5 * (a + b)
    return xm, fn(xm)


def canonical_rate(pair: DiscretizedPair, m: BaseMeasure, e_scan,
                   e_max: float = None, tol_moment: float = TOL_MOMENT):
    """Macrostate cost plus microcanonical rate, minimized over the
    conditioning energy.

    The momentum is pinned to the initial law's mean (the constraint set
    leaves no freedom there), the energy is scanned over ``e_scan``
    restricted to values dominating every snapshot energy, and the scan
    minimum is refined by golden section.  Returns (argmin state, value).
    """
    pi0 = pair.initial_density()
    u = pi0.momentum()
    pi0_energy = pi0.energy()
    energies = path_energies(pair.f_path)
    e_floor = float(max(energies.max(), pi0_energy))
    if e_max is None:
        e_max = 4.0 * e_floor
    j = dynamical_rate(pair)
    if not math.isfinite(m.gamma0_star):
        # the tail penalty is infinite for any energy gap: only e equal to
        # the initial energy is admissible, and it must dominate the path
        if pi0_energy + tol_moment < e_floor:
            return MacroState(e_floor, u), math.inf
        e = max(e_floor, pi0_energy)
        return MacroState(e, u), static_cost(m, e, u, pi0, pi0_energy) + j

    candidates = [float(e) for e in np.atleast_1d(np.asarray(e_scan, dtype=float))
                  if e >= e_floor - tol_moment]
    if not candidates:
        raise EmptyFeasible(
            f"no scan energy dominates the path maximum {e_floor}")

    def g(e):
        return static_cost(m, max(e, e_floor), u, pi0, pi0_energy)

    values = [g(e) for e in candidates]
    k = int(np.argmin(values))
    lo = candidates[k - 1] if k > 0 else e_floor
    hi = candidates[k + 1] if k + 1 < len(candidates) else max(e_max, candidates[k])
    e_star, v_star = _golden_minimize(g, max(lo, e_floor), hi)
    if values[k] < v_star:
        e_star, v_star = candidates[k], values[k]
    return MacroState(e_star, u), v_star + j


# ---------------------------------------------------------------------------
# variational evaluation
# ---------------------------------------------------------------------------

def default_flow_basis(horizon: float, n_centers: int = 5, width: float = 1.5,
                       clip: float = 10.0, size: int = 40):
    """Bounded symmetric test functions for the variational bound.

    Symmetrized products of Gaussian bumps in (v, v*) on a small velocity
    lattice, multiplied by the time factors {1, cos, sin}; truncated to
    ``size`` members.  All members ignore the outgoing pair, hence are
    symmetric under both label swaps, and are clipped at ``clip``.
    """
    lattice = [np.zeros(2)]
    for r in (2.0,):
        lattice += [np.array([r, 0.0]), np.array([-r, 0.0]),
                    np.array([0.0, r]), np.array([0.0, -r])]
    lattice = lattice[:n_centers]

    def bump(center):
        def b(v):
            d = v - center
            return np.exp(-0.5 * np.einsum("...d,...d->...", d, d) / width**2)
        return b

    def make(bi, bj, tfac, time_dependent):
        def fn(t, v, vstar, vout, vstarout):
            val = 0.5 * (bi(v) * bj(vstar) + bj(v) * bi(vstar))
            return np.clip(val * tfac(t), -clip, clip)
        return FlowTestFunction(fn, bound=clip, time_dependent=time_dependent)

    tfacs = [
        (lambda t: np.ones_like(np.asarray(t, dtype=float)), False),
        (lambda t: np.cos(2 * math.pi * np.asarray(t) / horizon), True),
        (lambda t: np.sin(2 * math.pi * np.asarray(t) / horizon), True),
    ]
    basis = []
    for a in range(len(lattice)):
        for b in range(a, len(lattice)):
            for tf, td in tfacs:
                basis.append(make(bump(lattice[a]), bump(lattice[b]), tf, td))
    return basis[:size]


def dynamical_rate_variational(pair: DiscretizedPair, basis,
                               eval_binning: FlowBinning = None,
                               iterations: int = 200, clip: float = 10.0,
                               diagonal: str = "subgrid") -> float:
    """Lower bound of the dynamical rate by maximizing the concave map
    c -> Q(F_c) - (1/2) int pi x pi (lambda^{F_c} - lambda) over linear
    combinations F_c of the basis.

    Both terms are evaluated at bin-center events of ``eval_binning``,
    which defaults to the flow's own binning; matching discretizations
    make center-evaluation biases cancel, so on typical pairs the fitted
    value reflects sampling noise only.  Supplying a coarser evaluation
    binning trades memory for an extra coarse-graining slack.  The
    combination is clipped at ``clip`` so the objective stays finite.
    """
    if eval_binning is None:
        eval_binning = pair.q.binning
    ref = ReferenceFlow(pair.f_path, eval_binning, diagonal=diagonal)
    b = eval_binning
    # active compensator cells and their reference masses
    keys = []
    wvec = []
    for it in range(b.n_time):
        occ = np.nonzero(ref.pibar[it])[0]
        for iv in occ:
            for ivs in occ:
                for iom in range(b.n_omega):
                    w = ref.bin_mass((it, int(iv), int(ivs), int(iom)))
                    if w > 0.0:
                        keys.append((it, int(iv), int(ivs), int(iom)))
                        wvec.append(w)
    wvec = np.asarray(wvec)
    if wvec.size == 0:
        raise NonFiniteObjective("reference flow has no mass on the evaluation grid")

    def design_matrix(keys_list, binning):
        events = [binning.bin_center_event(key) for key in keys_list]
        t_arr = np.array([e[0] for e in events])
        v_arr = np.stack([e[1] for e in events])
        vs_arr = np.stack([e[2] for e in events])
        vo_arr = np.stack([e[3] for e in events])
        vso_arr = np.stack([e[4] for e in events])
        out = np.empty((len(events), len(basis)), dtype=np.float32)
        for k, f in enumerate(basis):
            out[:, k] = np.asarray(f.fn(t_arr, v_arr, vs_arr, vo_arr, vso_arr),
                                   dtype=np.float32)
        return out

    phi = design_matrix(keys, b)
    q_keys = [k for k, v in pair.q.bins.items() if v != 0.0]
    q_masses = np.array([pair.q.bins[k] for k in q_keys])
    phi_q = (design_matrix(q_keys, pair.q.binning) if q_keys
             else np.zeros((0, len(basis)), dtype=np.float32))

    def neg_objective(c):
        raw_q = phi_q.astype(float) @ c if q_keys else np.zeros(0)
        fq = np.clip(raw_q, -clip, clip)
        raw_w = phi.astype(float) @ c
        fw = np.clip(raw_w, -clip, clip)
        val = float(q_masses @ fq) - float(wvec @ (np.exp(fw) - 1.0))
        if not np.isfinite(val):
            raise NonFiniteObjective("variational objective is not finite")
        grad = np.zeros(len(basis))
        if q_keys:
            grad += phi_q.T.astype(float) @ (q_masses * (np.abs(raw_q) < clip))
        grad -= phi.T.astype(float) @ (wvec * np.exp(fw) * (np.abs(raw_w) < clip))
        return -val, -grad

    res = minimize(neg_objective, np.zeros(len(basis)), jac=True,
                   method="L-BFGS-B", options={"maxiter": iterations})
    return max(-float(res.fun), 0.0)


# ---------------------------------------------------------------------------
# velocity mollification
# ---------------------------------------------------------------------------

def _dilate_grid_density(values2d, grid, u, alpha):
    """alpha^d * f(u + alpha (v - u)) resampled on the same grid."""
    axis = grid.axis
    h = grid.spacing
    # source index of each target node
    tgt = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
    src = u + alpha * (tgt - u)
    coords = np.stack([(src[..., 0] - axis[0]) / h, (src[..., 1] - axis[0]) / h])
    out = ndimage.map_coordinates(values2d, coords, order=1, mode="constant")
    return alpha**grid.dim * out


def _mollified_density(d: GridDensity, u, delta, alpha) -> GridDensity:
    g = d.grid
    sigma = math.sqrt(delta) / g.spacing
    smooth = ndimage.gaussian_filter(d.values.reshape(g.shape), sigma=sigma,
                                     mode="constant")
    out = _dilate_grid_density(smooth, g, u, alpha)
    return GridDensity(g, np.maximum(out.ravel(), 0.0), check=False)


def mollify_velocity(pair: DiscretizedPair, delta: float,
                     alpha_bracket=(0.2, 5.0)) -> DiscretizedPair:
    """Gaussian-smooth the pair in every velocity argument, then dilate
    about the path momentum so the internal energy is restored.

    The dilation factor solves a one-dimensional root problem on the
    initial snapshot; the same factor applies along the whole path (the
    internal energy is constant for admissible pairs).  The momentum is
    preserved by construction up to grid error.
    """
    if not isinstance(pair.f_path, DensityPath):
        raise ValueError("mollification operates on density paths")
    if delta <= 0:
        raise ValueError("the smoothing variance must be positive")
    path = pair.f_path
    d0 = path.densities[0]
    u = d0.momentum()
    target = d0.energy() - 0.5 * float(u @ u)

    def internal_energy(alpha):
        cand = _mollified_density(d0, u, delta, alpha).normalized()
        return cand.energy() - 0.5 * float(cand.momentum() @ cand.momentum())

    lo, hi = alpha_bracket
    flo, fhi = internal_energy(lo) - target, internal_energy(hi) - target
    if flo * fhi > 0:
        raise AlphaNotFound(
            f"no sign change for the dilation factor in {alpha_bracket}; "
            "grid box too small for this smoothing width")
    alpha = brentq(lambda a: internal_energy(a) - target, lo, hi, xtol=1e-12)

    new_densities = [
        _mollified_density(d, u, delta, alpha).normalized() for d in path.densities
    ]
    new_path = DensityPath(path.times, new_densities)
    new_q = _mollify_flow(pair.q, u, delta, alpha)
    return DiscretizedPair(new_path, new_q, pi0=new_densities[0])


def _mollify_flow(q: FlowHistogram, u, delta, alpha) -> FlowHistogram:
    """Smooth and dilate both velocity arguments of a binned flow."""
    b = q.binning
    n_cells = b.n_time * b.n_v**4 * b.n_omega
    if n_cells > 40_000_000:
        raise MemoryError("flow binning too fine to mollify densely")
    dense = np.zeros((b.n_time, b.n_v, b.n_v, b.n_v, b.n_v, b.n_omega))
    for (it, iv, ivs, iom), mass in q.bins.items():
        dense[it, iv // b.n_v, iv % b.n_v, ivs // b.n_v, ivs % b.n_v, iom] += mass
    sigma_bins = math.sqrt(delta) / b.v_spacing
    dense = ndimage.gaussian_filter(
        dense, sigma=(0, sigma_bins, sigma_bins, sigma_bins, sigma_bins, 0),
        mode="constant")
    # dilation about u in all four velocity axes, mass-preserving
    centers_1d = -b.half_width + (np.arange(b.n_v) + 0.5) * b.v_spacing
    out = np.zeros_like(dense)
    idx = [None] * 4
    for axis in range(4):
        mu = u[axis % 2]
        src = mu + alpha * (centers_1d - mu)
        pos = (src - centers_1d[0]) / b.v_spacing
        idx[axis] = pos
    grids = np.meshgrid(*idx, indexing="ij")
    coords = np.stack([g for g in grids])
    for it in range(b.n_time):
        for iom in range(b.n_omega):
            block = dense[it, :, :, :, :, iom]
            out[it, :, :, :, :, iom] = ndimage.map_coordinates(
                block, coords, order=1, mode="constant") * alpha**4
    bins = {}
    nz = np.nonzero(out)
    for it, a0, a1, b0, b1, iom in zip(*nz):
        key = (int(it), int(a0) * b.n_v + int(a1), int(b0) * b.n_v + int(b1),
               int(iom))
        bins[key] = bins.get(key, 0.0) + float(out[it, a0, a1, b0, b1, iom])
    return FlowHistogram(b, bins)
