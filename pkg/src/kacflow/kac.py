"""Event-driven simulation of the binary-collision velocity jump process.

N velocities evolve by elastic pair collisions: an unordered pair (i, j)
collides at rate (1/N) * integral of the kernel over scattering directions,
and the collision map transfers the relative-velocity component along the
sampled direction.  Energy and momentum are conserved per event, exactly
up to floating point.

Two equivalent schedulers cover the hard-sphere kernel: an exact-rate
scheme that maintains all pairwise speed differences, and a null-collision
(thinning) scheme against the majorant |v| + |v*| that discards fictitious
events.  Time-dependent bounded perturbations of the kernel run through a
third scheduler that thins candidates against a declared rate bound.

The exponential martingale used for changes of measure is evaluated by
``girsanov_log_weight``: the jump part sums a test function over events,
and the compensator integrates the tilted minus the original total rate
exactly over the constancy intervals of the configuration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as gamma_fn, roots_legendre

from .errors import DegeneratePair, NotUnit, RateBoundViolated
from .microcanonical import Configuration

DEFAULT_N_OMEGA = 256
_RESYNC_EVERY = 1000


def sphere_area(dim: int) -> float:
    """Surface measure of the unit sphere in R^dim."""
    return 2.0 * math.pi ** (dim / 2) / gamma_fn(dim / 2)


def kappa(dim: int) -> float:
    """Angular factor of the total hard-sphere rate: the integral of
    |e.omega|/2 over the unit sphere for a unit vector e."""
    if dim < 2:
        raise ValueError("collision kernels need d >= 2")
    return sphere_area(dim - 1) / (dim - 1)


def collision_map(v, vstar, omega):
    """Elastic collision update along the unit direction omega."""
    omega = np.asarray(omega, dtype=float)
    nrm = np.linalg.norm(omega)
    if abs(nrm - 1.0) > 1e-9:
        raise NotUnit(f"|omega| = {nrm} is not 1 within 1e-9")
    v = np.asarray(v, dtype=float)
    vstar = np.asarray(vstar, dtype=float)
    a = float(omega @ (vstar - v))
    return v + a * omega, vstar - a * omega


def pair_rate(v, vstar) -> float:
    """Total collision rate of a pair: kappa_d |v - v*|."""
    v = np.asarray(v, dtype=float)
    vstar = np.asarray(vstar, dtype=float)
    return kappa(v.size) * float(np.linalg.norm(v - vstar))


def sample_scatter_directions(v, vstar, size, rng) -> np.ndarray:
    """Directions distributed like |e.omega| on the sphere, e the unit
    relative velocity; rejection from the uniform sphere measure."""
    v = np.asarray(v, dtype=float)
    vstar = np.asarray(vstar, dtype=float)
    rel = v - vstar
    nrm = np.linalg.norm(rel)
    if nrm == 0.0:
        raise DegeneratePair("coinciding velocities admit no scattering direction")
    e = rel / nrm
    dim = v.size
    out = np.empty((size, dim))
    have = 0
    while have < size:
        batch = max(2 * (size - have), 16)
        w = rng.normal(size=(batch, dim))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        accept = rng.random(batch) < np.abs(w @ e)
        picked = w[accept]
        take = min(size - have, picked.shape[0])
        out[have:have + take] = picked[:take]
        have += take
    return out


def sample_scatter_direction(v, vstar, rng) -> np.ndarray:
    return sample_scatter_directions(v, vstar, 1, rng)[0]


def _draw_index(cumulative, rng) -> int:
    """Index with probability proportional to the increments of a
    cumulative weight array; zero-weight cells are never selected."""
    u = rng.random() * cumulative[-1]
    idx = int(np.searchsorted(cumulative, u, side="right"))
    return min(idx, cumulative.size - 1)


# ---------------------------------------------------------------------------
# sphere quadrature for tilted total rates
# ---------------------------------------------------------------------------

def circle_rule(n: int):
    """Uniform angles with equal weights; trapezoidal rule on the circle."""
    theta = 2.0 * math.pi * np.arange(n) / n
    nodes = np.column_stack((np.cos(theta), np.sin(theta)))
    weights = np.full(n, 2.0 * math.pi / n)
    return nodes, weights


def aligned_sphere_rule(e, n_polar: int = 16, n_azimuth: int = 32):
    """Product rule on S^2 aligned with the axis e.

    Gauss-Legendre nodes on [-1, 0] and [0, 1] in cos(theta) times a
    uniform azimuth; splitting at the equator integrates the |e.omega|
    factor of the hard-sphere kernel exactly on each panel.
    """
    e = np.asarray(e, dtype=float)
    helper = np.zeros(3)
    helper[np.argmin(np.abs(e))] = 1.0
    p = np.cross(e, helper)
    p /= np.linalg.norm(p)
    q = np.cross(e, p)
    xs, ws = roots_legendre(n_polar)
    u = np.concatenate((0.5 * (xs - 1.0), 0.5 * (xs + 1.0)))
    wu = np.concatenate((0.5 * ws, 0.5 * ws))
    phi = 2.0 * math.pi * np.arange(n_azimuth) / n_azimuth
    wphi = 2.0 * math.pi / n_azimuth
    uu, pp = np.meshgrid(u, phi, indexing="ij")
    s = np.sqrt(np.maximum(1.0 - uu**2, 0.0))
    nodes = (uu[..., None] * e
             + (s * np.cos(pp))[..., None] * p
             + (s * np.sin(pp))[..., None] * q).reshape(-1, 3)
    weights = np.repeat(wu * wphi, n_azimuth)
    return nodes, weights


def scatter_quadrature(v, vstar, n_omega=DEFAULT_N_OMEGA):
    """Quadrature nodes/weights on the sphere for integrals against the
    scattering kernel of the pair (v, v*)."""
    v = np.asarray(v, dtype=float)
    dim = v.size
    if dim == 2:
        return circle_rule(n_omega)
    if dim == 3:
        rel = v - np.asarray(vstar, dtype=float)
        nrm = np.linalg.norm(rel)
        e = rel / nrm if nrm > 0 else np.array([0.0, 0.0, 1.0])
        n_polar = max(4, int(round(math.sqrt(n_omega / 4))))
        return aligned_sphere_rule(e, n_polar=n_polar, n_azimuth=2 * n_polar)
    raise NotImplementedError("scattering quadrature supports d in {2, 3}")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HardSphereKernel:
    """B(v - v*, omega) = |(v - v*) . omega| / 2."""

    def evaluate(self, t, v, vstar, omega):
        rel = np.asarray(v, dtype=float) - np.asarray(vstar, dtype=float)
        return 0.5 * np.abs(np.asarray(omega) @ rel)


@dataclass(frozen=True)
class PerturbedKernel:
    """Bounded, possibly time-dependent collision kernel.

    ``evaluate(t, v, vstar, omega)`` must accept an (n, d) array of
    directions.  ``lambda_bound`` bounds the total rate (the omega
    integral) uniformly in (t, v, v*); ``omega_bound(t, v, vstar)`` bounds
    the kernel pointwise in omega and drives rejection sampling of the
    scattering direction.  ``total_rate`` may supply a closed form for the
    omega integral; otherwise sphere quadrature with ``n_omega`` nodes is
    used (a documented approximation for non-analytic kernels).
    """

    evaluate: object
    lambda_bound: float
    omega_bound: object
    total_rate: object = None
    n_omega: int = DEFAULT_N_OMEGA

    def rate_total(self, t, v, vstar) -> float:
        if self.total_rate is not None:
            return float(self.total_rate(t, v, vstar))
        nodes, weights = scatter_quadrature(v, vstar, self.n_omega)
        vals = np.asarray(self.evaluate(t, v, vstar, nodes), dtype=float)
        return float(weights @ vals)


def truncated_hard_sphere_kernel(cap: float, dim: int = 2) -> PerturbedKernel:
    """min(B, cap); the truncation is inactive whenever |v - v*| <= 2 cap."""
    if dim != 2:
        raise NotImplementedError("closed-form truncated kernel implemented for d = 2")

    def evaluate(t, v, vstar, omega):
        rel = np.asarray(v, dtype=float) - np.asarray(vstar, dtype=float)
        return np.minimum(0.5 * np.abs(np.asarray(omega) @ rel), cap)

    def total_rate(t, v, vstar):
        # circle integral of min(|w||cos|/2, cap), w the relative velocity
        w = float(np.linalg.norm(np.asarray(v, dtype=float)
                                 - np.asarray(vstar, dtype=float)))
        if w == 0.0:
            return 0.0
        half_w = 0.5 * w
        if half_w <= cap:
            return 2.0 * w
        t0 = math.acos(cap / half_w)
        return 4.0 * (cap * t0 + half_w * (1.0 - math.sin(t0)))

    def omega_bound(t, v, vstar):
        w = float(np.linalg.norm(np.asarray(v, dtype=float)
                                 - np.asarray(vstar, dtype=float)))
        return min(0.5 * w, cap)

    return PerturbedKernel(evaluate, lambda_bound=2 * math.pi * cap,
                           omega_bound=omega_bound, total_rate=total_rate)


def maxwell_kernel(b0: float, dim: int = 2) -> PerturbedKernel:
    """Velocity-independent kernel b0; per-pair total rate |S^{d-1}| b0."""
    area = sphere_area(dim)

    def evaluate(t, v, vstar, omega):
        omega = np.atleast_2d(np.asarray(omega))
        return np.full(omega.shape[0], b0)

    return PerturbedKernel(evaluate, lambda_bound=area * b0,
                           omega_bound=lambda t, v, vstar: b0,
                           total_rate=lambda t, v, vstar: area * b0)


def tilted_hard_sphere_kernel(F, f_bound, speed_bound, dim=2,
                              n_omega=DEFAULT_N_OMEGA) -> PerturbedKernel:
    """B * exp(F) for a bounded flow test function F.

    ``speed_bound`` must dominate |v - v*| along the run; on the energy
    shell of N particles with mean energy e, 2 sqrt(2 N e) always works.
    """
    fn = getattr(F, "fn", F)

    def evaluate(t, v, vstar, omega):
        omega = np.atleast_2d(np.asarray(omega, dtype=float))
        v = np.asarray(v, dtype=float)
        vstar = np.asarray(vstar, dtype=float)
        a = omega @ (vstar - v)
        vout = v[None, :] + a[:, None] * omega
        vsout = vstar[None, :] - a[:, None] * omega
        shape = vout.shape
        fv = fn(t, np.broadcast_to(v, shape), np.broadcast_to(vstar, shape),
                vout, vsout)
        return 0.5 * np.abs(a) * np.exp(np.asarray(fv, dtype=float))

    def omega_bound(t, v, vstar):
        w = float(np.linalg.norm(np.asarray(v) - np.asarray(vstar)))
        return 0.5 * w * math.exp(f_bound)

    return PerturbedKernel(
        evaluate,
        lambda_bound=kappa(dim) * speed_bound * math.exp(f_bound),
        omega_bound=omega_bound,
        n_omega=n_omega,
    )


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class CollisionEvent:
    t: float
    i: int
    j: int
    v_in: np.ndarray
    vstar_in: np.ndarray
    v_out: np.ndarray
    vstar_out: np.ndarray
    omega: np.ndarray


@dataclass
class Trajectory:
    """Initial configuration plus the time-ordered collision log."""

    initial: Configuration
    events: list
    horizon: float
    final: Configuration
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.initial.n

    @property
    def dim(self) -> int:
        return self.initial.dim

    @property
    def event_count(self) -> int:
        return len(self.events)

    def replay(self) -> Configuration:
        """Recompute the final configuration by applying the collision map
        to the logged incoming states; bit-identical to ``final``."""
        v = self.initial.velocities.copy()
        for ev in self.events:
            vi, vj = collision_map(v[ev.i], v[ev.j], ev.omega)
            v[ev.i] = vi
            v[ev.j] = vj
        return Configuration(v)

    def configuration_at(self, t: float) -> Configuration:
        if not 0.0 <= t <= self.horizon:
            raise ValueError("time outside the trajectory horizon")
        v = self.initial.velocities.copy()
        for ev in self.events:
            if ev.t > t:
                break
            v[ev.i] = ev.v_out
            v[ev.j] = ev.vstar_out
        return Configuration(v)

    def snapshots(self, times) -> list:
        """Velocity arrays at nondecreasing times, computed in one sweep.

        Right-continuous convention: a snapshot at an event time includes
        that event.
        """
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) < 0):
            raise ValueError("snapshot times must be nondecreasing")
        out = []
        v = self.initial.velocities.copy()
        k = 0
        for t in times:
            while k < len(self.events) and self.events[k].t <= t:
                ev = self.events[k]
                v[ev.i] = ev.v_out
                v[ev.j] = ev.vstar_out
                k += 1
            out.append(v.copy())
        return out

    def intervals(self):
        """Constancy intervals (t0, t1, velocities) covering [0, horizon]."""
        v = self.initial.velocities.copy()
        t0 = 0.0
        for ev in self.events:
            if ev.t > t0:
                yield t0, ev.t, v
            v = v.copy()
            v[ev.i] = ev.v_out
            v[ev.j] = ev.vstar_out
            t0 = ev.t
        if self.horizon > t0:
            yield t0, self.horizon, v

    def write_jsonl(self, path) -> None:
        """One header line with run metadata, then one event per line."""
        header = {"N": self.n, "d": self.dim, "T": self.horizon}
        header.update(self.meta)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for ev in self.events:
                fh.write(json.dumps({
                    "t": ev.t, "i": int(ev.i), "j": int(ev.j),
                    "vin": ev.v_in.tolist(), "vsin": ev.vstar_in.tolist(),
                    "vout": ev.v_out.tolist(), "vsout": ev.vstar_out.tolist(),
                    "omega": ev.omega.tolist(),
                }) + "\n")

    @classmethod
    def read_jsonl(cls, path, initial: Configuration) -> "Trajectory":
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            events = []
            for line in fh:
                d = json.loads(line)
                events.append(CollisionEvent(
                    t=d["t"], i=d["i"], j=d["j"],
                    v_in=np.array(d["vin"]), vstar_in=np.array(d["vsin"]),
                    v_out=np.array(d["vout"]), vstar_out=np.array(d["vsout"]),
                    omega=np.array(d["omega"]),
                ))
        meta = {k: v for k, v in header.items() if k not in ("N", "d", "T")}
        traj = cls(initial=initial, events=events, horizon=header["T"],
                   final=None, meta=meta)
        traj.final = traj.replay()
        return traj


# ---------------------------------------------------------------------------
# schedulers
# ---------------------------------------------------------------------------

def simulate(init: Configuration, kernel=None, horizon: float = 1.0,
             rng: np.random.Generator = None, debug_checks: bool = False) -> Trajectory:
    """Exact-rate simulation of the hard-sphere jump process.

    Maintains the symmetric matrix of pair rates and its row sums; the
    total rate is (row sums)/(2N), a pair is drawn by two cumulative
    searches, and only the two affected rows are refreshed per event
    (O(N)).  The matrices are rebuilt from scratch every 1000 events to
    bound float drift; ``debug_checks`` asserts the incremental total
    agrees with the rebuilt one to 1e-9 relative.
    """
    if isinstance(kernel, PerturbedKernel):
        return simulate_perturbed(init, kernel, horizon, rng)
    if kernel is not None and not isinstance(kernel, HardSphereKernel):
        raise TypeError("unsupported kernel specification")
    if rng is None:
        raise ValueError("an explicit seeded generator is required")
    v = init.velocities.copy()
    n, dim = v.shape
    kap = kappa(dim)

    def full_matrix():
        diff = v[:, None, :] - v[None, :, :]
        return kap * np.sqrt(np.sum(diff**2, axis=2))

    dmat = full_matrix()
    s = dmat.sum(axis=1)
    events = []
    t = 0.0
    since_resync = 0
    while True:
        total = float(s.sum())
        rate = total / (2.0 * n)
        if rate <= 0.0:
            break
        t = t + rng.exponential(1.0 / rate)
        if t > horizon:
            break
        i = _draw_index(np.cumsum(s), rng)
        j = _draw_index(np.cumsum(dmat[i]), rng)
        omega = sample_scatter_direction(v[i], v[j], rng)
        vi_old, vj_old = v[i].copy(), v[j].copy()
        vi_new, vj_new = collision_map(vi_old, vj_old, omega)
        events.append(CollisionEvent(t, i, j, vi_old, vj_old,
                                     vi_new.copy(), vj_new.copy(), omega))
        v[i], v[j] = vi_new, vj_new
        old_i, old_j = dmat[i].copy(), dmat[j].copy()
        new_i = kap * np.linalg.norm(v - v[i], axis=1)
        dmat[i] = new_i
        dmat[:, i] = new_i
        new_j = kap * np.linalg.norm(v - v[j], axis=1)
        dmat[j] = new_j
        dmat[:, j] = new_j
        s += (dmat[i] - old_i) + (dmat[j] - old_j)
        s[i] = dmat[i].sum()
        s[j] = dmat[j].sum()
        since_resync += 1
        if since_resync >= _RESYNC_EVERY:
            fresh = full_matrix()
            if debug_checks:
                rel = abs(float(s.sum()) - float(fresh.sum()))
                scale = max(float(fresh.sum()), 1e-300)
                assert rel <= 1e-9 * scale, \
                    "incremental rate bookkeeping drifted beyond 1e-9 relative"
            dmat = fresh
            s = dmat.sum(axis=1)
            since_resync = 0
    return Trajectory(initial=init.copy(), events=events, horizon=horizon,
                      final=Configuration(v),
                      meta={"scheme": "exact", "kernel": "hard_sphere"})


def simulate_null_collision(init: Configuration, horizon: float = 1.0,
                            rng: np.random.Generator = None) -> Trajectory:
    """Thinning scheme against the majorant kappa (|v_i| + |v_j|).

    Candidates arrive at the majorant total rate; the pair is drawn by a
    speed-weighted first index and a uniform partner, then accepted with
    probability |v_i - v_j| / (|v_i| + |v_j|), which the triangle
    inequality keeps at most one.  Null events leave the state unchanged
    and are not logged.  Same law as ``simulate``.
    """
    if rng is None:
        raise ValueError("an explicit seeded generator is required")
    v = init.velocities.copy()
    n, dim = v.shape
    kap = kappa(dim)
    speeds = np.linalg.norm(v, axis=1)
    cum = np.cumsum(speeds)
    events = []
    t = 0.0
    while True:
        s1 = float(cum[-1])
        majorant = kap * (n - 1) * s1 / n
        if majorant <= 0.0:
            break
        t = t + rng.exponential(1.0 / majorant)
        if t > horizon:
            break
        i = _draw_index(cum, rng)
        j = int(rng.integers(n - 1))
        if j >= i:
            j += 1
        denom = speeds[i] + speeds[j]
        if denom <= 0.0:
            continue
        accept_p = float(np.linalg.norm(v[i] - v[j])) / denom
        assert accept_p <= 1.0 + 1e-12, "majorant violated the triangle inequality"
        if rng.random() >= accept_p:
            continue  # null event
        omega = sample_scatter_direction(v[i], v[j], rng)
        vi_old, vj_old = v[i].copy(), v[j].copy()
        vi_new, vj_new = collision_map(vi_old, vj_old, omega)
        events.append(CollisionEvent(t, i, j, vi_old, vj_old,
                                     vi_new.copy(), vj_new.copy(), omega))
        v[i], v[j] = vi_new, vj_new
        speeds[i] = np.linalg.norm(vi_new)
        speeds[j] = np.linalg.norm(vj_new)
        cum = np.cumsum(speeds)
    return Trajectory(initial=init.copy(), events=events, horizon=horizon,
                      final=Configuration(v),
                      meta={"scheme": "null", "kernel": "hard_sphere"})


def simulate_perturbed(init: Configuration, kernel: PerturbedKernel,
                       horizon: float = 1.0,
                       rng: np.random.Generator = None) -> Trajectory:
    """Time-inhomogeneous dynamics for a bounded perturbed kernel.

    Candidates arrive at the constant per-pair bound; each candidate's
    true total rate is evaluated at the candidate time and accepted with
    probability rate/bound, after which the scattering direction is drawn
    by rejection against the pointwise kernel bound.
    """
    if rng is None:
        raise ValueError("an explicit seeded generator is required")
    v = init.velocities.copy()
    n, dim = v.shape
    bound = float(kernel.lambda_bound)
    majorant = 0.5 * (n - 1) * bound
    events = []
    t = 0.0
    while majorant > 0.0:
        t = t + rng.exponential(1.0 / majorant)
        if t > horizon:
            break
        i, j = (int(k) for k in rng.choice(n, size=2, replace=False))
        lam = kernel.rate_total(t, v[i], v[j])
        if lam > bound * (1.0 + 1e-9):
            raise RateBoundViolated(
                f"pair rate {lam} exceeds the declared bound {bound}")
        if rng.random() * bound >= lam:
            continue
        omega = _sample_omega_rejection(kernel, t, v[i], v[j], rng)
        vi_old, vj_old = v[i].copy(), v[j].copy()
        vi_new, vj_new = collision_map(vi_old, vj_old, omega)
        events.append(CollisionEvent(t, i, j, vi_old, vj_old,
                                     vi_new.copy(), vj_new.copy(), omega))
        v[i], v[j] = vi_new, vj_new
    return Trajectory(initial=init.copy(), events=events, horizon=horizon,
                      final=Configuration(v),
                      meta={"scheme": "perturbed", "kernel": "perturbed"})


def _sample_omega_rejection(kernel, t, vi, vj, rng, max_tries=100_000):
    env = float(kernel.omega_bound(t, vi, vj))
    if env <= 0.0:
        raise RateBoundViolated("accepted a candidate with vanishing kernel envelope")
    dim = vi.size
    for _ in range(max_tries):
        w = rng.normal(size=dim)
        w /= np.linalg.norm(w)
        val = float(np.asarray(kernel.evaluate(t, vi, vj, w[None, :])).ravel()[0])
        if val > env * (1.0 + 1e-9):
            raise RateBoundViolated(
                f"kernel value {val} exceeds its pointwise envelope {env}")
        if rng.random() * env < val:
            return w
    raise RateBoundViolated("rejection sampling of the direction did not terminate")


# ---------------------------------------------------------------------------
# tilted rates and the exponential martingale
# ---------------------------------------------------------------------------

def _resolve_flow_function(F):
    fn = getattr(F, "fn", F)
    time_dependent = bool(getattr(F, "time_dependent", False))
    return fn, time_dependent


def lambda_F(F, t, v, vstar, n_omega=DEFAULT_N_OMEGA) -> float:
    """Total tilted rate of one pair: sphere quadrature of B exp(F)."""
    fn, _ = _resolve_flow_function(F)
    v = np.asarray(v, dtype=float)
    vstar = np.asarray(vstar, dtype=float)
    nodes, weights = scatter_quadrature(v, vstar, n_omega)
    a = nodes @ (vstar - v)
    vout = v[None, :] + a[:, None] * nodes
    vsout = vstar[None, :] - a[:, None] * nodes
    shape = vout.shape
    fv = fn(t, np.broadcast_to(v, shape), np.broadcast_to(vstar, shape),
            vout, vsout)
    return float(weights @ (0.5 * np.abs(a) * np.exp(np.asarray(fv, dtype=float))))


def _lambda_f_rows(fn, t, v_all, idx, nodes, weights):
    """Tilted rates between particle ``idx`` and every other particle,
    vectorized over (partner, direction node); d = 2 only, where the
    quadrature nodes are shared by all pairs."""
    v = v_all[idx]
    a = np.einsum("nd,kd->nk", v_all - v, nodes)
    vout = v[None, None, :] + a[:, :, None] * nodes[None, :, :]
    vsout = v_all[:, None, :] - a[:, :, None] * nodes[None, :, :]
    shape = vout.shape
    fv = np.asarray(
        fn(t, np.broadcast_to(v, shape),
           np.broadcast_to(v_all[:, None, :], shape), vout, vsout),
        dtype=float,
    )
    rows = (0.5 * np.abs(a) * np.exp(fv)) @ weights
    rows[idx] = 0.0
    return rows


def _lambda_f_block(fn, t, v_rows, v_all, nodes, weights):
    """Tilted rates between each of ``v_rows`` (r, d) and all of ``v_all``
    (N, d), vectorized over (row, partner, direction node)."""
    a = np.einsum("nd,kd->nk", v_all, nodes)[None, :, :] \
        - np.einsum("rd,kd->rk", v_rows, nodes)[:, None, :]
    vout = v_rows[:, None, None, :] + a[..., None] * nodes[None, None, :, :]
    vsout = v_all[None, :, None, :] - a[..., None] * nodes[None, None, :, :]
    shape = vout.shape[:-1] + (v_rows.shape[1],)
    fv = np.asarray(
        fn(t, np.broadcast_to(v_rows[:, None, None, :], vout.shape),
           np.broadcast_to(v_all[None, :, None, :], vout.shape), vout, vsout),
        dtype=float,
    )
    return np.einsum("rnk,k->rn", 0.5 * np.abs(a) * np.exp(fv), weights)


def girsanov_log_weights(traj: Trajectory, fs, n_omega=DEFAULT_N_OMEGA,
                         time_quad_nodes: int = 8) -> list:
    """Log exponential-martingale weights of several test functions along
    one trajectory, sharing the pair geometry across the family.

    See ``girsanov_log_weight`` for the definition of one weight.
    """
    resolved = [_resolve_flow_function(F) for F in fs]
    jump_sums = []
    for fn, _ in resolved:
        total = 0.0
        for ev in traj.events:
            total += float(np.asarray(fn(
                ev.t, ev.v_in[None, :], ev.vstar_in[None, :],
                ev.v_out[None, :], ev.vstar_out[None, :])).ravel()[0])
        jump_sums.append(total)

    if traj.dim != 2 or any(td for _, td in resolved):
        out = []
        for (fn, td), jump in zip(resolved, jump_sums):
            comp = _compensator_generic(traj, fn, td, n_omega, time_quad_nodes) \
                if traj.dim != 2 else _compensator_time_dependent(
                    traj, fn, n_omega, time_quad_nodes)
            out.append(jump - comp / traj.n)
        return out

    nodes, weights = circle_rule(n_omega)
    n = traj.n
    n_f = len(resolved)

    # matrices of pair differences lambda^F - lambda, one per F; both
    # rates are integrated by the same circle rule, so its kink error
    # cancels in the difference.  Only two rows change per event.
    def diff_rows(v_rows, proj_rows, v_all, proj_all):
        a = proj_all[None, :, :] - proj_rows[:, None, :]   # (r, N, k)
        scaled = a[..., None] * nodes[None, None, :, :]
        vout = v_rows[:, None, None, :] + scaled
        vsout = v_all[None, :, None, :] - scaled
        shape = vout.shape
        babs = 0.5 * np.abs(a)
        v_b = np.broadcast_to(v_rows[:, None, None, :], shape)
        vs_b = np.broadcast_to(v_all[None, :, None, :], shape)
        return [
            (babs * np.expm1(np.asarray(fn(0.0, v_b, vs_b, vout, vsout),
                                        dtype=float))) @ weights
            for fn, _ in resolved
        ]

    v = traj.initial.velocities.copy()
    proj = v @ nodes.T                                     # (N, k)
    diffs = diff_rows(v, proj, v, proj)
    for d in diffs:
        np.fill_diagonal(d, 0.0)
    m_sums = [0.5 * float(d.sum()) for d in diffs]
    compensators = [0.0] * n_f
    t0 = 0.0
    for ev in traj.events:
        for q in range(n_f):
            compensators[q] += (ev.t - t0) * m_sums[q]
        t0 = ev.t
        v[ev.i] = ev.v_out
        v[ev.j] = ev.vstar_out
        pair = [ev.i, ev.j]
        proj[pair] = v[pair] @ nodes.T
        rows_list = diff_rows(v[pair], proj[pair], v, proj)
        for q, rows in enumerate(rows_list):
            rows[0, ev.i] = 0.0
            rows[1, ev.j] = 0.0
            for r, idx in enumerate(pair):
                diffs[q][idx] = rows[r]
                diffs[q][:, idx] = rows[r]
            m_sums[q] = 0.5 * float(diffs[q].sum())
    for q in range(n_f):
        compensators[q] += (traj.horizon - t0) * m_sums[q]
    return [jump - comp / n for jump, comp in zip(jump_sums, compensators)]


def _compensator_time_dependent(traj, fn, n_omega, time_quad_nodes):
    nodes, weights = circle_rule(n_omega)
    kap = kappa(2)
    xs, ws = roots_legendre(time_quad_nodes)
    compensator = 0.0
    for t0, t1, v in traj.intervals():
        mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
        for x, w in zip(xs, ws):
            tq = mid + half * x
            lam_f = _lambda_f_block(fn, tq, v, v, nodes, weights)
            np.fill_diagonal(lam_f, 0.0)
            dist = kap * np.sqrt(
                np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=2))
            compensator += half * w * 0.5 * float((lam_f - dist).sum())
    return compensator


def girsanov_log_weight(traj: Trajectory, F, n_omega=DEFAULT_N_OMEGA,
                        time_quad_nodes: int = 8) -> float:
    """Log of the exponential martingale of F along a trajectory.

    Returns N * [Q^N(F) - (1/2) int pi x pi (lambda^F - lambda) dt]: the
    sum of F over collision events minus the compensator, the latter
    summed exactly over the constancy intervals of the configuration.
    For F carrying ``time_dependent=True`` the within-interval time
    integral uses Gauss-Legendre nodes instead of the exact constant.
    exp of the result is the likelihood ratio between the kernel tilted
    by exp(F) and the hard-sphere dynamics on the same path.
    """
    return girsanov_log_weights(traj, [F], n_omega=n_omega,
                                time_quad_nodes=time_quad_nodes)[0]


def _compensator_generic(traj, fn, time_dependent, n_omega, time_quad_nodes):
    """Plain per-interval pair loop; used for d = 3."""
    def pair_sum_at(v, t):
        total = 0.0
        n = v.shape[0]
        for i in range(n):
            for j in range(i + 1, n):
                total += lambda_F(fn, t, v[i], v[j], n_omega) - pair_rate(v[i], v[j])
        return total

    compensator = 0.0
    xs, ws = roots_legendre(time_quad_nodes)
    for t0, t1, v in traj.intervals():
        if time_dependent:
            mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
            for x, w in zip(xs, ws):
                compensator += half * w * pair_sum_at(v, mid + half * x)
        else:
            compensator += (t1 - t0) * pair_sum_at(v, t0)
    return compensator


def event_conservation_residuals(ev: CollisionEvent):
    """Relative energy and momentum conservation errors of one event."""
    e_in = float(ev.v_in @ ev.v_in + ev.vstar_in @ ev.vstar_in)
    e_out = float(ev.v_out @ ev.v_out + ev.vstar_out @ ev.vstar_out)
    p_in = ev.v_in + ev.vstar_in
    p_out = ev.v_out + ev.vstar_out
    scale_e = max(e_in, 1e-300)
    scale_p = max(float(np.linalg.norm(p_in)), 1.0)
    return abs(e_out - e_in) / scale_e, float(np.linalg.norm(p_out - p_in)) / scale_p
