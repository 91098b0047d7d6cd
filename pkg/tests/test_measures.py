import math

import numpy as np
import pytest

from kacflow.errors import NoConvergence, TiltOutOfRange
from kacflow.grid import GridDensity, VelocityGrid
from kacflow.measures import (
    BaseMeasure,
    MacroState,
    TiltVector,
    canonical_entropy_decomposition,
    cramer_rate,
    decomposition_scan,
    log_mgf,
    log_mgf_gradient,
    log_mgf_micro,
    micro_sanov_rate,
    relative_entropy,
    solve_tilt,
    tilt_measure,
)

from conftest import gaussian_density


def quartic_measure(grid=None):
    """Non-Gaussian base with gamma0_star = +inf (super-Gaussian tail).

    Uses a smaller box than the default so the density stays strictly
    positive in double precision at every node.
    """
    if grid is None:
        grid = VelocityGrid(dim=2, half_width=6.0, points=96)

    def fn(nodes):
        z = 0.5 * np.einsum("ij,ij->i", nodes, nodes)
        return np.exp(-z - 0.05 * (2 * z) ** 2)

    return BaseMeasure.from_density(fn, gamma0_star=math.inf, grid=grid)


# ---------------------------------------------------------------------------
# log_mgf
# ---------------------------------------------------------------------------

def test_log_mgf_zero_tilt_is_zero(gauss):
    assert log_mgf(gauss, TiltVector(0.0, np.zeros(2))) == 0.0


def test_log_mgf_closed_form_half_tilt(gauss):
    # completing the square: integral of exp(-|v|^2/4)/(2*pi) over R^2 is 2
    val = log_mgf(gauss, TiltVector(0.5, np.zeros(2)))
    assert abs(val - math.log(2.0)) < 1e-12


def test_log_mgf_at_gamma0_star_raises(gauss):
    with pytest.raises(TiltOutOfRange):
        log_mgf(gauss, TiltVector(1.0, np.zeros(2)))


def test_log_mgf_grid_agrees_with_closed_form(grid, gauss):
    # same density registered as a custom measure goes through quadrature
    custom = BaseMeasure.from_density(
        lambda nodes: np.exp(-0.5 * np.einsum("ij,ij->i", nodes, nodes)) / (2 * np.pi),
        gamma0_star=1.0,
        grid=grid,
    )
    for g in [TiltVector(0.5, (0.0, 0.0)), TiltVector(0.3, (0.4, -0.2)), TiltVector(-1.0, (1.0, 0.5))]:
        assert abs(log_mgf(custom, g) - log_mgf(gauss, g)) < 1e-6


def test_log_mgf_convex_along_segments(gauss):
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = TiltVector(rng.uniform(-1, 0.6), rng.normal(size=2) * 0.5)
        b = TiltVector(rng.uniform(-1, 0.6), rng.normal(size=2) * 0.5)
        vals = []
        for t in (0.25, 0.5, 0.75):
            g = TiltVector(
                (1 - t) * a.gamma0 + t * b.gamma0, (1 - t) * a.gamma + t * b.gamma
            )
            vals.append(log_mgf(gauss, g))
        mid = vals[1]
        assert mid <= 0.5 * (vals[0] + vals[2]) + 1e-10


# ---------------------------------------------------------------------------
# solve_tilt / tilt_measure
# ---------------------------------------------------------------------------

def test_solve_tilt_identity_at_mean(gauss):
    g = solve_tilt(gauss, MacroState(1.0, (0.0, 0.0)))
    assert abs(g.gamma0) < 1e-10
    assert np.linalg.norm(g.gamma) < 1e-10


def test_solve_tilt_doubled_energy(gauss):
    g = solve_tilt(gauss, MacroState(2.0, (0.0, 0.0)))
    assert abs(g.gamma0 - 0.5) < 1e-8
    assert np.linalg.norm(g.gamma) < 1e-10


def test_solve_tilt_outside_z_raises(gauss):
    with pytest.raises((TiltOutOfRange, NoConvergence)):
        solve_tilt(gauss, MacroState(0.4, (1.0, 0.0)))


def test_solve_tilt_inverts_gradient(gauss):
    rng = np.random.default_rng(11)
    for _ in range(8):
        g = TiltVector(rng.uniform(-1.0, 0.5), rng.normal(size=2) * 0.4)
        x = log_mgf_gradient(gauss, g)
        back = solve_tilt(gauss, x)
        assert abs(back.gamma0 - g.gamma0) < 1e-8
        assert np.linalg.norm(back.gamma - g.gamma) < 1e-8


def test_solve_tilt_custom_measure_roundtrip():
    m = quartic_measure()
    for target in [MacroState(0.9, (0.0, 0.0)), MacroState(1.1, (0.3, -0.1))]:
        g = solve_tilt(m, target)
        x = log_mgf_gradient(m, g)
        assert abs(x.e - target.e) < 1e-8
        assert np.linalg.norm(x.u - target.u) < 1e-8


def test_tilt_measure_zero_tilt_returns_base(gauss):
    out = tilt_measure(gauss, MacroState(1.0, (0.0, 0.0)))
    assert out.l1_distance(gauss.as_grid_density()) < 1e-9


def test_tilt_measure_doubled_energy_is_wider_gaussian(grid, gauss):
    out = tilt_measure(gauss, MacroState(2.0, (0.0, 0.0)))
    expected = gaussian_density(grid, var=2.0)
    assert out.l1_distance(expected) < 1e-5


def test_tilt_measure_moments_match_target(gauss):
    x = MacroState(1.5, (0.3, 0.0))
    out = tilt_measure(gauss, x)
    assert abs(out.mass - 1.0) < 1e-12
    assert abs(out.energy() - 1.5) < 1e-6
    assert np.allclose(out.momentum(), x.u, atol=1e-6)


# ---------------------------------------------------------------------------
# cramer_rate
# ---------------------------------------------------------------------------

def test_cramer_rate_zero_at_mean(gauss):
    assert abs(cramer_rate(gauss, MacroState(1.0, (0.0, 0.0)))) < 1e-12


def test_cramer_rate_doubled_energy(gauss):
    val = cramer_rate(gauss, MacroState(2.0, (0.0, 0.0)))
    assert abs(val - (1.0 - math.log(2.0))) < 1e-8


def test_cramer_rate_nonnegative_on_state_grid(gauss):
    for e in np.linspace(0.6, 2.5, 8):
        for u1 in np.linspace(-0.6, 0.6, 5):
            x = MacroState(e, (u1, 0.0))
            if not x.in_z:
                continue
            assert cramer_rate(gauss, x) >= -1e-12


def test_cramer_rate_matches_direct_monte_carlo(gauss):
    # frequency of the empirical zeta-mean falling in a small ball,
    # estimated from i.i.d. samples of m at N = 40
    rng = np.random.default_rng(2024)
    N, reps, delta = 40, 200_000, 0.12
    x = MacroState(1.3, (0.2, 0.0))
    samples = rng.normal(size=(reps, N, 2))
    zeta0 = 0.5 * np.sum(samples**2, axis=2).mean(axis=1)
    zmean = samples.mean(axis=1)
    dist = np.sqrt(
        (zeta0 - x.e) ** 2 + (zmean[:, 0] - x.u[0]) ** 2 + (zmean[:, 1] - x.u[1]) ** 2
    )
    hits = int(np.sum(dist < delta))
    assert hits >= 50, "oracle event too rare; enlarge delta"
    p_hat = hits / reps
    se = math.sqrt(p_hat * (1 - p_hat) / reps)
    mc = -math.log(p_hat) / N
    mc_err = se / (p_hat * N)  # delta-method error of -(1/N) log p
    rate = cramer_rate(gauss, x)
    # O(delta) slack for the ball infimum plus an O(log N / N) prefactor allowance
    slack = delta + 4.0 / N
    assert abs(mc - rate) <= 3 * mc_err + slack


# ---------------------------------------------------------------------------
# relative_entropy
# ---------------------------------------------------------------------------

def test_relative_entropy_of_self_is_zero(grid):
    p = gaussian_density(grid, var=1.0)
    assert relative_entropy(p, p) == 0.0


def test_relative_entropy_gaussian_closed_form(grid):
    p = gaussian_density(grid, var=1.0)
    q = gaussian_density(grid, var=2.0)
    assert abs(relative_entropy(p, q) - (math.log(2.0) - 0.5)) < 1e-8


def test_relative_entropy_support_violation(grid):
    p = gaussian_density(grid, var=1.0)
    qv = gaussian_density(grid, var=1.0).values.copy()
    qv[grid.n_nodes // 2] = 0.0
    q = GridDensity(grid, qv, check=False)
    assert relative_entropy(p, q) == math.inf


# ---------------------------------------------------------------------------
# micro_sanov_rate
# ---------------------------------------------------------------------------

def test_micro_sanov_zero_at_tilted_measure(gauss):
    x = MacroState(1.5, (0.2, 0.0))
    pi = tilt_measure(gauss, x)
    assert micro_sanov_rate(pi, gauss, x) < 1e-6


def test_micro_sanov_energy_gap_value(grid, gauss):
    # rate of the cold standard Gaussian under conditioning at energy 2:
    # Gaussian relative entropy plus the tail penalty 0.5 * (2 - 1)
    pi = gaussian_density(grid, var=1.0)
    val = micro_sanov_rate(pi, gauss, MacroState(2.0, (0.0, 0.0)))
    assert abs(val - math.log(2.0)) < 1e-4


def test_micro_sanov_excess_energy_is_infinite(gauss):
    pi = tilt_measure(gauss, MacroState(2.1, (0.0, 0.0)))
    assert micro_sanov_rate(pi, gauss, MacroState(2.0, (0.0, 0.0))) == math.inf


def test_micro_sanov_momentum_mismatch_is_infinite(gauss):
    pi = tilt_measure(gauss, MacroState(1.5, (0.3, 0.0)))
    assert micro_sanov_rate(pi, gauss, MacroState(1.5, (0.0, 0.0))) == math.inf


def test_micro_sanov_infinite_tail_index_requires_exact_energy():
    m = quartic_measure()
    x = MacroState(1.0, (0.0, 0.0))
    low = tilt_measure(m, MacroState(0.8, (0.0, 0.0)))
    assert micro_sanov_rate(low, m, x) == math.inf
    exact = tilt_measure(m, x)
    assert micro_sanov_rate(exact, m, x) < 1e-6


def test_micro_sanov_convexity_on_random_pairs(grid, gauss):
    rng = np.random.default_rng(5)
    x = MacroState(1.6, (0.0, 0.0))
    m_eu = tilt_measure(gauss, x)
    for _ in range(5):
        # random mixtures of cooled tilts keep momentum 0 and energy <= e
        p = tilt_measure(gauss, MacroState(rng.uniform(0.9, 1.5), (0.0, 0.0)))
        q = tilt_measure(gauss, MacroState(rng.uniform(0.9, 1.5), (0.0, 0.0)))
        a = rng.uniform(0.2, 0.8)
        mix = GridDensity(grid, a * p.values + (1 - a) * q.values, check=False)
        h_mix = micro_sanov_rate(mix, gauss, x)
        bound = a * micro_sanov_rate(p, gauss, x) + (1 - a) * micro_sanov_rate(q, gauss, x)
        assert h_mix <= bound + 1e-9


# ---------------------------------------------------------------------------
# log_mgf_micro
# ---------------------------------------------------------------------------

def test_log_mgf_micro_zero_function(gauss):
    x = MacroState(1.5, (0.0, 0.0))
    val = log_mgf_micro(np.zeros(gauss.grid.n_nodes), gauss, x)
    assert abs(val) < 1e-6


def test_log_mgf_micro_constant_shift(gauss):
    x = MacroState(1.5, (0.0, 0.0))
    c = 0.7
    val = log_mgf_micro(np.full(gauss.grid.n_nodes, c), gauss, x)
    assert abs(val - c) < 1e-6


def test_log_mgf_micro_legendre_lower_bounds_rate(grid, gauss):
    # Legendre duality: sup over a finite family of pi(phi) - Lambda(phi)
    # stays below the microcanonical rate and tightens as the family grows
    x = MacroState(1.5, (0.0, 0.0))
    bump = np.exp(-0.5 * np.einsum("ij,ij->i", grid.nodes - 1.0, grid.nodes - 1.0))
    m_eu = tilt_measure(gauss, x)
    pi = GridDensity(grid, m_eu.values * np.exp(0.8 * bump), check=False).normalized()
    target = MacroState(pi.energy(), pi.momentum())
    h = micro_sanov_rate(pi, gauss, target)

    def family_sup(cs):
        best = -math.inf
        for c in cs:
            phi = c * bump
            val = float((grid.weights * pi.values) @ phi) - log_mgf_micro(phi, gauss, target)
            best = max(best, val)
        return best

    coarse = family_sup(np.linspace(-1.0, 2.0, 7))
    fine = family_sup(np.linspace(-1.0, 2.0, 25))
    assert coarse <= h + 1e-8
    assert fine <= h + 1e-8
    assert fine >= coarse - 1e-12
    assert h - fine <= h - coarse + 1e-12


# ---------------------------------------------------------------------------
# canonical_entropy_decomposition
# ---------------------------------------------------------------------------

def test_decomposition_at_base_measure(gauss):
    xstar, value = canonical_entropy_decomposition(gauss.as_grid_density(), gauss)
    assert abs(xstar.e - 1.0) < 1e-9
    assert np.linalg.norm(xstar.u) < 1e-9
    assert abs(value) < 1e-8


def test_decomposition_value_at_hot_tilt(grid, gauss):
    pi = tilt_measure(gauss, MacroState(2.0, (0.0, 0.0)))
    xstar, value = canonical_entropy_decomposition(pi, gauss)
    assert abs(value - (1.0 - math.log(2.0))) < 1e-4
    assert abs(value - relative_entropy(pi, gauss.as_grid_density())) < 1e-4


def test_decomposition_matches_entropy_for_random_tilts(grid, gauss):
    rng = np.random.default_rng(17)
    for _ in range(3):
        x = MacroState(rng.uniform(1.1, 1.8), (rng.uniform(-0.3, 0.3), 0.0))
        pi = tilt_measure(gauss, x)
        _, value = canonical_entropy_decomposition(pi, gauss)
        direct = relative_entropy(pi, gauss.as_grid_density())
        assert abs(value - direct) < 1e-4


def test_decomposition_scan_minimum_at_pi_moments(grid, gauss):
    pi = tilt_measure(gauss, MacroState(1.4, (0.15, 0.0)))
    e_star, u_star = pi.energy(), pi.momentum()
    e_values = np.sort(np.concatenate([[e_star], np.linspace(1.0, 2.2, 19)]))
    u1_values = np.sort(np.concatenate([[u_star[0]], np.linspace(-0.4, 0.5, 19)]))
    table = decomposition_scan(pi, gauss, e_values, u1_values)
    i, j = np.unravel_index(np.argmin(table), table.shape)
    assert abs(e_values[i] - e_star) < 1e-9
    assert abs(u1_values[j] - u_star[0]) < 1e-9
    _, value = canonical_entropy_decomposition(pi, gauss)
    assert table.min() >= value - 1e-4
