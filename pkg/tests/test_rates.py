import math

import numpy as np
import pytest

from kacflow.errors import EmptyFeasible
from kacflow.grid import GridDensity
from kacflow.measures import MacroState, relative_entropy, tilt_measure
from kacflow.microcanonical import sample_gaussian_micro
from kacflow.kac import simulate_null_collision
from kacflow.observables import (
    DensityPath,
    EmpiricalPath,
    FlowBinning,
    FlowTestFunction,
    empirical_flow,
    reference_flow,
)
from kacflow.rates import (
    DiscretizedPair,
    canonical_rate,
    default_flow_basis,
    dynamical_rate,
    dynamical_rate_variational,
    micro_rate,
    mollify_velocity,
)
from kacflow.seeding import rng_from_seed

from conftest import gaussian_density

SMALL_BINNING = FlowBinning(horizon=1.0, n_time=3, n_v=8, n_omega=8)


def constant_path(density, horizon=1.0, snapshots=7):
    times = np.linspace(0.0, horizon, snapshots)
    return DensityPath(times, [density] * snapshots)


def reference_pair(density, binning=SMALL_BINNING, factor=1.0):
    """Pair whose flow is ``factor`` times the reference of its own path."""
    path = constant_path(density, horizon=binning.horizon)
    hist = reference_flow(path, binning).as_histogram()
    return DiscretizedPair(path, hist.scaled(factor), pi0=density)


# ---------------------------------------------------------------------------
# dynamical_rate
# ---------------------------------------------------------------------------

def test_dynamical_rate_zero_at_reference(gauss):
    pi = tilt_measure(gauss, MacroState(1.0, (0.0, 0.0)))
    pair = reference_pair(pi)
    assert abs(dynamical_rate(pair)) < 1e-12


def test_dynamical_rate_doubled_flow(gauss):
    pi = tilt_measure(gauss, MacroState(1.0, (0.0, 0.0)))
    pair = reference_pair(pi, factor=2.0)
    mass = reference_flow(pair.f_path, SMALL_BINNING).total_mass()
    expected = (2.0 * math.log(2.0) - 1.0) * mass
    assert abs(dynamical_rate(pair) - expected) < 1e-10


def test_dynamical_rate_support_violation(gauss):
    pi = tilt_measure(gauss, MacroState(1.0, (0.0, 0.0)))
    pair = reference_pair(pi)
    # put mass on a same-bin pair, whose midpoint reference vanishes
    bad = dict(pair.q.bins)
    bad[(0, 27, 27, 3)] = bad.get((0, 27, 27, 3), 0.0) + 1e-3
    pair_bad = DiscretizedPair(pair.f_path, type(pair.q)(SMALL_BINNING, bad), pi0=pair.pi0)
    assert dynamical_rate(pair_bad, diagonal="midpoint") == math.inf
    assert math.isfinite(dynamical_rate(pair_bad, diagonal="subgrid"))


# ---------------------------------------------------------------------------
# variational lower bound
# ---------------------------------------------------------------------------

def test_variational_trivial_basis_gives_zero(gauss):
    pi = tilt_measure(gauss, MacroState(1.0, (0.0, 0.0)))
    pair = reference_pair(pi)
    zero = FlowTestFunction(lambda t, a, b, c, d: np.zeros(np.shape(a)[:-1]))
    assert dynamical_rate_variational(pair, [zero]) == 0.0


def bump_test_function():
    def fn(t, v, vs, vo, vso):
        zv = np.einsum("...d,...d->...", v, v)
        zs = np.einsum("...d,...d->...", vs, vs)
        return 0.8 * np.exp(-0.5 * zv) * np.exp(-0.5 * zs)

    return FlowTestFunction(fn, bound=0.8, time_dependent=False)


def test_variational_recovers_exponential_tilt_exactly(gauss):
    # flow built as exp(F0) times its reference with F0 in the basis:
    # the optimizer reaches the discrete rate exactly
    pi = tilt_measure(gauss, MacroState(1.0, (0.0, 0.0)))
    path = constant_path(pi)
    ref = reference_flow(path, SMALL_BINNING)
    hist = ref.as_histogram()
    f0 = bump_test_function()
    tilted = {}
    for key, mass in hist.bins.items():
        t, v, vs, vo, vso, _ = SMALL_BINNING.bin_center_event(key)
        val = float(np.asarray(f0.fn(t, v[None], vs[None], vo[None], vso[None])).ravel()[0])
        tilted[key] = mass * math.exp(val)
    pair = DiscretizedPair(path, type(hist)(SMALL_BINNING, tilted), pi0=pi)
    j = dynamical_rate(pair)
    second = FlowTestFunction(
        lambda t, a, b, c, d: np.exp(-np.einsum("...d,...d->...", a - 1.0, a - 1.0))
        * np.exp(-np.einsum("...d,...d->...", b - 1.0, b - 1.0)))
    bound = dynamical_rate_variational(pair, [f0, second], iterations=500)
    assert bound <= j + 1e-8
    assert abs(bound - j) < 1e-4 * (1.0 + j)


def test_variational_never_exceeds_dynamical_rate(gauss):
    pi = tilt_measure(gauss, MacroState(1.2, (0.1, 0.0)))
    pair = reference_pair(pi, factor=1.5)
    basis = default_flow_basis(horizon=1.0, size=12)
    j = dynamical_rate(pair)
    bound = dynamical_rate_variational(pair, basis)
    assert 0.0 <= bound <= j + 1e-8


def test_variational_small_on_typical_pair():
    x = MacroState(1.0, (0.0, 0.0))
    init = sample_gaussian_micro(2000, x, rng_from_seed(501))
    traj = simulate_null_collision(init, horizon=1.0, rng=rng_from_seed(502))
    path = EmpiricalPath(traj)
    binning = FlowBinning(horizon=1.0)
    q = empirical_flow(traj).histogram(binning)
    pair = DiscretizedPair(path, q)
    basis = default_flow_basis(horizon=1.0, size=9)
    bound = dynamical_rate_variational(pair, basis)
    assert 0.0 <= bound < 0.02


# ---------------------------------------------------------------------------
# micro_rate / canonical_rate
# ---------------------------------------------------------------------------

def test_micro_rate_zero_at_equilibrium(gauss):
    x = MacroState(1.0, (0.0, 0.0))
    pair = reference_pair(tilt_measure(gauss, x))
    assert micro_rate(pair, gauss, x) < 1e-5


def test_micro_rate_infinite_for_hot_path(gauss):
    x = MacroState(1.0, (0.0, 0.0))
    pair = reference_pair(tilt_measure(gauss, MacroState(1.2, (0.0, 0.0))))
    assert micro_rate(pair, gauss, x) == math.inf


def test_micro_rate_cold_initial_datum_pays_the_tail_penalty(grid, gauss):
    # constant path at the unit-energy Gaussian, conditioned at energy 2:
    # the cost is the Gaussian entropy plus half the energy gap
    x = MacroState(2.0, (0.0, 0.0))
    pair = reference_pair(gaussian_density(grid, var=1.0))
    val = micro_rate(pair, gauss, x)
    assert abs(val - math.log(2.0)) < 1e-3


def test_canonical_rate_zero_on_equilibrium_pair(gauss):
    pair = reference_pair(gauss.as_grid_density())
    state, value = canonical_rate(pair, gauss, e_scan=np.linspace(1.0, 2.5, 16))
    assert abs(value) < 1e-5
    assert abs(state.e - 1.0) < 1e-3


def test_canonical_rate_energy_jump_closed_form(grid, gauss):
    # path that jumps from the unit-energy Gaussian to the 1.5-tilt while
    # the flow stays at reference: the cost is gamma0* times the gain
    cold = gauss.as_grid_density()
    hot = tilt_measure(gauss, MacroState(1.5, (0.0, 0.0)))
    times = np.linspace(0.0, 1.0, 7)
    densities = [cold if t <= 0.4 else hot for t in times]
    path = DensityPath(times, densities)
    hist = reference_flow(path, SMALL_BINNING).as_histogram()
    pair = DiscretizedPair(path, hist, pi0=cold)
    state, value = canonical_rate(pair, gauss, e_scan=np.linspace(1.0, 3.0, 21))
    assert abs(value - 0.5) < 1e-3
    assert abs(state.e - 1.5) < 1e-2


def test_canonical_rate_dominates_entropy_identity(grid, gauss):
    pi = tilt_measure(gauss, MacroState(1.3, (0.1, 0.0)))
    pair = reference_pair(pi)
    _, value = canonical_rate(pair, gauss, e_scan=np.linspace(1.0, 3.0, 21))
    lower = relative_entropy(pi, gauss.as_grid_density()) + dynamical_rate(pair)
    assert value >= lower - 1e-6


def test_canonical_rate_empty_feasible(gauss):
    pair = reference_pair(tilt_measure(gauss, MacroState(2.0, (0.0, 0.0))))
    with pytest.raises(EmptyFeasible):
        canonical_rate(pair, gauss, e_scan=[1.0, 1.5])


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------

def test_mollify_gaussian_is_fixed_point(grid, gauss):
    # smoothing then energy-restoring dilation maps a Maxwellian to itself
    pi = gaussian_density(grid, var=1.0)
    pair = reference_pair(pi)
    out = mollify_velocity(pair, delta=0.25)
    assert out.f_path.densities[0].l1_distance(pi) < 2e-3


def test_mollify_identity_limit(grid, gauss):
    values = 0.6 * gaussian_density(grid, var=0.8).values \
        + 0.4 * gaussian_density(grid, var=1.6, mean=(0.8, 0.0)).values
    mix = GridDensity(grid, values, check=False).normalized()
    pair = reference_pair(mix)
    dists = []
    for delta in (0.1, 0.01, 0.001):
        out = mollify_velocity(pair, delta)
        dists.append(out.f_path.densities[0].l1_distance(mix))
    assert dists[0] > dists[1] > dists[2]


def test_mollify_preserves_internal_energy_and_momentum(grid):
    values = 0.5 * gaussian_density(grid, var=0.7, mean=(0.4, -0.2)).values \
        + 0.5 * gaussian_density(grid, var=1.4, mean=(-0.1, 0.3)).values
    mix = GridDensity(grid, values, check=False).normalized()
    pair = reference_pair(mix)
    u = mix.momentum()
    internal = mix.energy() - 0.5 * float(u @ u)
    out = mollify_velocity(pair, delta=0.3)
    d0 = out.f_path.densities[0]
    u_out = d0.momentum()
    internal_out = d0.energy() - 0.5 * float(u_out @ u_out)
    assert abs(internal_out - internal) < 1e-6
    assert np.linalg.norm(u_out - u) < 1e-3


def test_mollify_contracts_dynamical_rate(grid, gauss):
    # the contraction is a vanishing-smoothing statement: the excess of the
    # mollified rate over the original decreases monotonically to zero
    pi = tilt_measure(gauss, MacroState(1.1, (0.0, 0.0)))
    pair = reference_pair(pi, factor=1.8)
    j = dynamical_rate(pair)
    excess = []
    for delta in (0.2, 0.1, 0.05, 0.02):
        out = mollify_velocity(pair, delta)
        excess.append(dynamical_rate(out) - j)
    assert excess[0] > excess[1] > excess[2] > excess[3]
    assert excess[-1] <= 0.1 * j + 0.05
