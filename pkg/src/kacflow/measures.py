"""Reference measures, exponential tilting, and static rate functionals.

A reference velocity law ``m`` on R^d is carried on a quadrature grid
together with its exponential-tail index ``gamma0_star``: the supremum of
energy tilts ``gamma0`` for which ``m(exp(gamma0 |v|^2/2))`` stays finite.
Tilting by a vector ``(gamma0, gamma)`` acts through the statistics
``zeta(v) = (|v|^2/2, v)``.  The inverse problem (find the tilt whose mean
energy and momentum match a target) is solved by damped Newton iteration
on the strictly convex log moment generating function.

The static rate functionals follow: the Cramer rate of the pair
(mean energy, mean momentum) of i.i.d. samples, the relative entropy
between grid densities, and the microcanonical Sanov rate, which is the
entropy relative to the tilted measure plus a tail-cost penalty
``(gamma0_star - gamma0) * (energy deficit)`` for probability laws whose
energy falls short of the conditioning value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import GridMismatch, NoConvergence, QuadratureOverflow, TiltOutOfRange
from .grid import GridDensity, VelocityGrid

TOL_QUAD = 1e-6
TOL_MOMENT = 1e-6
TOL_NEWTON = 1e-10
TOL_DECOMP = 1e-4
MAX_NEWTON_ITER = 100

# exp() overflows double precision just above this exponent
_LOG_FLOAT_MAX = 700.0


@dataclass(frozen=True, eq=False)
class MacroState:
    """Energy-momentum pair (e, u); admissible states satisfy e > |u|^2/2."""

    e: float
    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "e", float(self.e))
        object.__setattr__(self, "u", np.atleast_1d(np.asarray(self.u, dtype=float)))

    @property
    def dim(self) -> int:
        return self.u.size

    @property
    def internal_energy(self) -> float:
        return self.e - 0.5 * float(self.u @ self.u)

    @property
    def in_z(self) -> bool:
        return self.internal_energy > 0

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.e], self.u))

    def __repr__(self):
        return f"MacroState(e={self.e!r}, u={self.u.tolist()!r})"


@dataclass(frozen=True, eq=False)
class TiltVector:
    """Exponential tilt (gamma0, gamma) acting through zeta(v) = (|v|^2/2, v)."""

    gamma0: float
    gamma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma0", float(self.gamma0))
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.gamma0], self.gamma))

    def dot(self, x: MacroState) -> float:
        return self.gamma0 * x.e + float(self.gamma @ x.u)

    def __repr__(self):
        return f"TiltVector(gamma0={self.gamma0!r}, gamma={self.gamma.tolist()!r})"


class BaseMeasure:
    """Reference velocity distribution on a quadrature grid.

    The density must be strictly positive at every grid node and integrate
    to 1 over the box within ``tol_quad``.  ``gamma0_star`` is supplied by
    the caller (it is not estimable from a finite grid); for the Gaussian
    family it equals ``1/sigma^2``.
    """

    def __init__(self, grid, density_values, gamma0_star, family="custom",
                 sigma=None, tol_quad=TOL_QUAD, density_fn=None):
        self.grid = grid
        self.gamma0_star = float(gamma0_star)
        self.family = family
        self.sigma = sigma
        self.tol_quad = float(tol_quad)
        self.density_fn = density_fn
        values = np.asarray(density_values, dtype=float).ravel()
        if values.size != grid.n_nodes:
            raise GridMismatch("density values do not match the grid")
        if np.any(values <= 0):
            raise ValueError("base measure density must be strictly positive at every node")
        self.density_values = values
        mass = grid.integrate(values)
        if abs(mass - 1.0) > self.tol_quad:
            raise ValueError(
                f"density integrates to {mass:.8f} over the box; expected 1 within {self.tol_quad}"
            )
        self.log_density_values = np.log(values)

    @property
    def dim(self) -> int:
        return self.grid.dim

    @classmethod
    def gaussian(cls, dim=2, sigma=1.0, grid=None, tol_quad=TOL_QUAD):
        """Centered isotropic Gaussian with per-axis variance sigma^2."""
        if grid is None:
            grid = VelocityGrid(dim=dim)
        if grid.dim != dim:
            raise GridMismatch("grid dimension does not match requested dimension")
        norm = (2 * math.pi * sigma**2) ** (dim / 2)

        def fn(nodes):
            z = 0.5 * np.einsum("ij,ij->i", np.atleast_2d(nodes), np.atleast_2d(nodes))
            return np.exp(-z / sigma**2) / norm

        return cls(grid, fn(grid.nodes), gamma0_star=1.0 / sigma**2, family="gaussian",
                   sigma=float(sigma), tol_quad=tol_quad, density_fn=fn)

    @classmethod
    def from_density(cls, fn, gamma0_star, grid=None, normalize=True, tol_quad=TOL_QUAD):
        """Custom measure from a density evaluator ``fn(nodes) -> values``."""
        if grid is None:
            grid = VelocityGrid()
        values = np.asarray(fn(grid.nodes), dtype=float).ravel()
        if normalize:
            values = values / grid.integrate(values)
        return cls(grid, values, gamma0_star=gamma0_star, tol_quad=tol_quad,
                   density_fn=fn)

    def as_grid_density(self) -> GridDensity:
        return GridDensity(self.grid, self.density_values, check=False)

    def mean_state(self) -> MacroState:
        d = self.as_grid_density()
        return MacroState(d.energy(), d.momentum())

    def tilt_exponent(self, g: TiltVector) -> np.ndarray:
        return g.gamma0 * self.grid.zeta0 + self.grid.nodes @ g.gamma

    def log_density_at(self, velocities: np.ndarray) -> np.ndarray:
        """Log density (up to normalization) at arbitrary velocity vectors.

        Uses the registered density evaluator when available, falling back
        to bilinear interpolation of the stored log node values.
        """
        velocities = np.atleast_2d(np.asarray(velocities, dtype=float))
        if self.density_fn is not None:
            with np.errstate(divide="ignore"):
                return np.log(np.asarray(self.density_fn(velocities), dtype=float))
        return self._interp_log_density(velocities)

    def _interp_log_density(self, vel: np.ndarray) -> np.ndarray:
        g = self.grid
        if g.dim != 2:
            raise NotImplementedError("interpolated densities support d = 2 only")
        logf = self.log_density_values.reshape(g.shape)
        pos = (vel + g.half_width) / g.spacing
        pos = np.clip(pos, 0, g.points - 1 - 1e-12)
        idx = pos.astype(int)
        frac = pos - idx
        i, j = idx[:, 0], idx[:, 1]
        fx, fy = frac[:, 0], frac[:, 1]
        return (logf[i, j] * (1 - fx) * (1 - fy)
                + logf[i + 1, j] * fx * (1 - fy)
                + logf[i, j + 1] * (1 - fx) * fy
                + logf[i + 1, j + 1] * fx * fy)


# ---------------------------------------------------------------------------
# log moment generating function and its inverse
# ---------------------------------------------------------------------------

def _gaussian_log_mgf(sigma, dim, gvec):
    """Closed form by completing the square; gvec = (gamma0, gamma...)."""
    s2 = sigma**2
    a = 1.0 - s2 * gvec[0]
    gg = float(gvec[1:] @ gvec[1:])
    return -0.5 * dim * math.log(a) + 0.5 * s2 * gg / a


def _gaussian_moments(sigma, dim, gvec):
    s2 = sigma**2
    a = 1.0 - s2 * gvec[0]
    var = s2 / a
    u = var * gvec[1:]
    e = 0.5 * dim * var + 0.5 * float(u @ u)
    return np.concatenate(([e], u))


def _gaussian_covariance(sigma, dim, gvec):
    """Covariance of zeta under the tilted Gaussian."""
    s2 = sigma**2
    a = 1.0 - s2 * gvec[0]
    var = s2 / a
    u = var * gvec[1:]
    cov = np.zeros((dim + 1, dim + 1))
    cov[0, 0] = 0.5 * dim * var**2 + var * float(u @ u)
    cov[0, 1:] = var * u
    cov[1:, 0] = var * u
    cov[1:, 1:] = var * np.eye(dim)
    return cov


def _grid_log_weights(m: BaseMeasure) -> np.ndarray:
    return m.log_density_values + np.log(m.grid.weights)


def _grid_log_mgf_stats(log_weights, grid, gvec, need_cov=False):
    """log Z, zeta moments and optionally the zeta covariance of the tilt."""
    expo = log_weights + gvec[0] * grid.zeta0 + grid.nodes @ gvec[1:]
    log_z = float(logsumexp(expo))
    p = np.exp(expo - log_z)
    zeta = np.column_stack((grid.zeta0, grid.nodes))
    mom = p @ zeta
    if not need_cov:
        return log_z, mom, None
    cov = (zeta * p[:, None]).T @ zeta - np.outer(mom, mom)
    return log_z, mom, cov


def log_mgf(m: BaseMeasure, g: TiltVector) -> float:
    """log of m(exp(gamma0 |v|^2/2 + gamma.v)).

    Gaussian family uses the closed form; custom measures use grid
    quadrature.  Raises TiltOutOfRange at or beyond gamma0_star and
    QuadratureOverflow when the integrand leaves the double range.
    """
    if g.gamma0 >= m.gamma0_star:
        raise TiltOutOfRange(
            f"gamma0={g.gamma0} is not below gamma0_star={m.gamma0_star}"
        )
    if m.family == "gaussian":
        return _gaussian_log_mgf(m.sigma, m.dim, g.as_vector())
    expo = m.log_density_values + m.tilt_exponent(g)
    if float(np.max(expo)) > _LOG_FLOAT_MAX:
        raise QuadratureOverflow(
            "tilted integrand exceeds the floating-point range; "
            "grid box too small or gamma0 too close to gamma0_star"
        )
    log_z, _, _ = _grid_log_mgf_stats(_grid_log_weights(m), m.grid, g.as_vector())
    return log_z


def log_mgf_gradient(m: BaseMeasure, g: TiltVector) -> MacroState:
    """Mean (energy, momentum) of the tilted measure."""
    if g.gamma0 >= m.gamma0_star:
        raise TiltOutOfRange(
            f"gamma0={g.gamma0} is not below gamma0_star={m.gamma0_star}"
        )
    if m.family == "gaussian":
        mom = _gaussian_moments(m.sigma, m.dim, g.as_vector())
    else:
        _, mom, _ = _grid_log_mgf_stats(_grid_log_weights(m), m.grid, g.as_vector())
    return MacroState(mom[0], mom[1:])


def _damped_newton(stats, target, gamma0_cap, tol=TOL_NEWTON, max_iter=MAX_NEWTON_ITER):
    """Minimize logZ(g) - g.target by damped Newton with backtracking.

    ``stats(gvec, need_cov)`` returns (logZ, moments, cov).  The energy
    component of the iterate is kept strictly below ``gamma0_cap``.
    """
    g = np.zeros_like(target)
    log_z, mom, cov = stats(g, True)
    value = log_z - g @ target
    for _ in range(max_iter):
        grad = mom - target
        if np.linalg.norm(grad) <= tol:
            return g
        try:
            step = np.linalg.solve(cov, -grad)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence("singular zeta covariance in Newton step") from exc
        t = 1.0
        if np.isfinite(gamma0_cap) and step[0] > 0:
            # stay strictly inside the admissible tilt range
            t = min(t, 0.9 * (gamma0_cap - g[0]) / step[0])
        slope = float(grad @ step)
        # Armijo with an absolute-noise allowance so that machine-precision
        # steps near the optimum are not rejected
        noise = 1e-14 * (1.0 + abs(value))
        while True:
            cand = g + t * step
            log_z, mom, cov = stats(cand, True)
            cand_value = log_z - cand @ target
            if np.isfinite(cand_value) and cand_value <= value + 0.25 * t * slope + noise:
                g, value = cand, cand_value
                break
            t *= 0.5
            if t < 1e-14:
                raise NoConvergence("backtracking line search failed")
    raise NoConvergence(f"no tilt found in {max_iter} Newton iterations")


def solve_tilt(m: BaseMeasure, x: MacroState, tol=TOL_NEWTON,
               max_iter=MAX_NEWTON_ITER) -> TiltVector:
    """Tilt vector whose mean energy and momentum equal (e, u).

    Gaussian bases use analytic derivatives of the log-MGF; custom bases
    differentiate the grid quadrature.  Raises TiltOutOfRange for targets
    outside the admissible region, NoConvergence when the target is not
    reachable (e.g. near the boundary of what the grid box can represent).
    """
    if x.dim != m.dim:
        raise GridMismatch("macro state dimension does not match the measure")
    if not x.in_z:
        raise TiltOutOfRange(f"(e, u) with internal energy {x.internal_energy} is outside Z")
    target = x.as_vector()
    if m.family == "gaussian":
        def stats(gvec, need_cov):
            return (_gaussian_log_mgf(m.sigma, m.dim, gvec),
                    _gaussian_moments(m.sigma, m.dim, gvec),
                    _gaussian_covariance(m.sigma, m.dim, gvec) if need_cov else None)
    else:
        log_w = _grid_log_weights(m)

        def stats(gvec, need_cov):
            return _grid_log_mgf_stats(log_w, m.grid, gvec, need_cov)

    g = _damped_newton(stats, target, m.gamma0_star, tol=tol, max_iter=max_iter)
    return TiltVector(g[0], g[1:])


def tilt_measure(m: BaseMeasure, x: MacroState) -> GridDensity:
    """The tilt of m with mean energy e and mean momentum u, grid-normalized."""
    g = solve_tilt(m, x)
    expo = m.log_density_values + m.tilt_exponent(g)
    log_z = float(logsumexp(expo + np.log(m.grid.weights)))
    return GridDensity(m.grid, np.exp(expo - log_z), check=False)


def cramer_rate(m: BaseMeasure, x: MacroState) -> float:
    """Large-deviation cost of observing mean zeta = (e, u) under i.i.d. m."""
    g = solve_tilt(m, x)
    return g.dot(x) - log_mgf(m, g)


# ---------------------------------------------------------------------------
# entropies and the microcanonical rate
# ---------------------------------------------------------------------------

def relative_entropy(p: GridDensity, q: GridDensity) -> float:
    """Quadrature of p log(p/q); +inf when p charges a node where q vanishes."""
    p.grid.require_same(q.grid)
    pv, qv = p.values, q.values
    support = pv > 0
    if np.any(qv[support] == 0):
        return math.inf
    integrand = np.zeros_like(pv)
    integrand[support] = pv[support] * np.log(pv[support] / qv[support])
    return p.grid.integrate(integrand)


def micro_sanov_rate(pi: GridDensity, m: BaseMeasure, x: MacroState,
                     tol_moment=TOL_MOMENT) -> float:
    """Rate of the empirical measure under the microcanonical ensemble.

    Finite only on laws with momentum u and energy at most e (within
    ``tol_moment``, the declared membership slack for gridded densities).
    The value is the entropy relative to the tilted reference plus
    ``(gamma0_star - gamma0(e,u)) * (e - energy of pi)``; when
    gamma0_star is infinite an energy deficit costs infinity.
    """
    pi.grid.require_same(m.grid)
    pe = pi.energy()
    pu = pi.momentum()
    if np.linalg.norm(pu - x.u) > tol_moment or pe > x.e + tol_moment:
        return math.inf
    if not np.isfinite(m.gamma0_star):
        if pe < x.e - tol_moment:
            return math.inf
        return relative_entropy(pi, tilt_measure(m, x))
    g = solve_tilt(m, x)
    gap = max(x.e - pe, 0.0)
    return relative_entropy(pi, tilt_measure(m, x)) + (m.gamma0_star - g.gamma0) * gap


def log_mgf_micro(phi, m: BaseMeasure, x: MacroState, tol=TOL_NEWTON) -> float:
    """Scaled cumulant generating function of pi(phi) under the ensemble.

    ``phi`` is a bounded test function given as node values or as a
    callable on node coordinates.  The correcting tilt gamma solves the
    constraint that the tilt of (m_{e,u} e^phi) has moments (e, u); the
    returned value is ``-gamma.(e,u) + log m_{e,u}(exp(phi + gamma.zeta))``.
    """
    phi_values = np.asarray(phi(m.grid.nodes) if callable(phi) else phi, dtype=float).ravel()
    if phi_values.size != m.grid.n_nodes:
        raise GridMismatch("test function values do not match the grid")
    g_eu = solve_tilt(m, x)
    m_eu = tilt_measure(m, x)
    log_w = np.log(m_eu.values) + np.log(m.grid.weights) + phi_values
    cap = m.gamma0_star - g_eu.gamma0

    def stats(gvec, need_cov):
        return _grid_log_mgf_stats(log_w, m.grid, gvec, need_cov)

    g = _damped_newton(stats, x.as_vector(), cap, tol=tol)
    log_z, _, _ = stats(g, False)
    return float(-g @ x.as_vector() + log_z)


def canonical_entropy_decomposition(pi: GridDensity, m: BaseMeasure):
    """Split Ent(pi|m) into a macrostate cost plus a microcanonical rate.

    Returns ((e*, u*), value) where (e*, u*) are the zeta moments of pi,
    the minimizer of cramer_rate + micro_sanov_rate over macrostates, and
    value the rate evaluated there.  The value coincides with Ent(pi|m).
    """
    pi.grid.require_same(m.grid)
    xstar = MacroState(pi.energy(), pi.momentum())
    if not xstar.in_z:
        raise TiltOutOfRange("pi has moments outside the admissible region")
    value = cramer_rate(m, xstar) + micro_sanov_rate(pi, m, xstar)
    return xstar, value


def decomposition_scan(pi: GridDensity, m: BaseMeasure, e_values, u1_values,
                       tol_moment=TOL_MOMENT) -> np.ndarray:
    """Brute-force table of cramer_rate + micro_sanov_rate over a state grid.

    Scans e along ``e_values`` and the first momentum component along
    ``u1_values`` (remaining components pinned to pi's momentum); used to
    check that the decomposition minimum sits at pi's own moments.  States
    whose constraint set does not admit pi evaluate to +inf.
    """
    pu = pi.momentum()
    out = np.full((len(e_values), len(u1_values)), math.inf)
    for i, e in enumerate(e_values):
        for j, u1 in enumerate(u1_values):
            u = pu.copy()
            u[0] = u1
            x = MacroState(e, u)
            if not x.in_z:
                continue
            try:
                h = micro_sanov_rate(pi, m, x, tol_moment=tol_moment)
                if math.isfinite(h):
                    out[i, j] = cramer_rate(m, x) + h
            except (NoConvergence, TiltOutOfRange):
                continue
    return out
