"""Command-line front end: experiment drivers with reproducible outputs.

Configuration files are flat ``key = value`` text (lines starting with
``#`` are comments); no sections, no nesting.  Every command is a pure
function of (config, seed): reruns produce byte-identical output files.
Wall-clock timings go to standard error only.

Common keys: ``seed``, ``out`` (both overridable by the --seed/--out
flags), ``sigma`` (base Gaussian width), ``grid_half_width``,
``grid_points``.  Per-command keys are documented in the handlers below.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import KacflowError
from .experiments import (
    DeficitEvent,
    energy_deficit_infimum,
    kac_ldp_scan,
    sanov_scan,
)
from .grid import GridDensity, VelocityGrid
from .kac import Trajectory, simulate, simulate_null_collision
from .luw import EnergyProfile, luw_canonical_cost, luw_rate_convergence
from .measures import BaseMeasure, MacroState
from .microcanonical import Configuration, sample_gaussian_micro
from .observables import EmpiricalPath, FlowBinning, empirical_flow
from .rates import DiscretizedPair, canonical_rate, dynamical_rate, micro_rate
from .seeding import replica_rng


class ConfigError(Exception):
    pass


def parse_config(path) -> dict:
    """Flat key = value parser; raises ConfigError on malformed lines."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _floats(cfg, key, default):
    raw = cfg.get(key)
    if raw is None:
        return list(default)
    try:
        return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad float list for {key}: {raw!r}") from exc


def _ints(cfg, key, default):
    return [int(x) for x in _floats(cfg, key, default)]


def _float(cfg, key, default):
    try:
        return float(cfg.get(key, default))
    except ValueError as exc:
        raise ConfigError(f"bad float for {key}") from exc


def _int(cfg, key, default):
    try:
        return int(cfg.get(key, default))
    except ValueError as exc:
        raise ConfigError(f"bad integer for {key}") from exc


def _measure_from(cfg) -> BaseMeasure:
    grid = VelocityGrid(
        dim=2,
        half_width=_float(cfg, "grid_half_width", 8.0),
        points=_int(cfg, "grid_points", 128),
    )
    return BaseMeasure.gaussian(dim=2, sigma=_float(cfg, "sigma", 1.0), grid=grid)


def _macro_from(cfg) -> MacroState:
    return MacroState(_float(cfg, "e", 1.0),
                      (_float(cfg, "u1", 0.0), _float(cfg, "u2", 0.0)))


def _profile_from(cfg) -> EnergyProfile:
    jumps = []
    raw = cfg.get("profile_jumps", "")
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            t, de = part.split(":")
            jumps.append((float(t), float(de)))
        except ValueError as exc:
            raise ConfigError(f"bad profile jump {part!r}; expected t:dE") from exc
    return EnergyProfile(base=_float(cfg, "profile_base", 1.0), jumps=tuple(jumps))


def _write_csv(path, header_fields, rows, provenance):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in provenance.items():
            fh.write(f"# {key}={value}\n")
        fh.write(",".join(header_fields) + "\n")
        for row in rows:
            fh.write(",".join(repr(x) if isinstance(x, float) else str(x)
                              for x in row) + "\n")


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _simulate_replica(task):
    """Worker for one replica: writes its own files, returns the summary."""
    (out_dir, cfg, seed, k) = task
    n = int(cfg["n"])
    horizon = _float(cfg, "horizon", 1.0)
    scheme = cfg.get("scheme", "exact")
    x = _macro_from(cfg)
    if cfg.get("init", "micro") == "canonical":
        sigma = _float(cfg, "sigma", 1.0)
        init = Configuration(sigma * replica_rng(seed, 2 * k).normal(size=(n, 2)))
    else:
        init = sample_gaussian_micro(n, x, replica_rng(seed, 2 * k))
    rng = replica_rng(seed, 2 * k + 1)
    if scheme == "null":
        traj = simulate_null_collision(init, horizon=horizon, rng=rng)
    elif scheme == "exact":
        traj = simulate(init, horizon=horizon, rng=rng)
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")
    traj.meta.update({"seed": seed, "replica": k})
    out = Path(out_dir)
    traj.write_jsonl(out / f"events_r{k:04d}.jsonl")
    init.write_binary(out / f"init_r{k:04d}.bin")
    for t in _floats(cfg, "snapshots", []):
        traj.configuration_at(t).write_binary(out / f"snapshot_r{k:04d}_t{t:g}.bin")
    x0 = init.macro_state()
    de = abs(traj.final.mean_energy() - x0.e)
    du = float(np.linalg.norm(traj.final.mean_momentum() - x0.u))
    return {"replica": k, "events": traj.event_count,
            "energy_drift": de, "momentum_drift": du}


def cmd_simulate(cfg, out_dir, seed, threads, provenance) -> int:
    if "n" not in cfg:
        raise ConfigError("simulate needs n")
    replicas = _int(cfg, "replicas", 1)
    tasks = [(str(out_dir), cfg, seed, k) for k in range(replicas)]
    t0 = time.perf_counter()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            summaries = list(pool.map(_simulate_replica, tasks))
    else:
        summaries = [_simulate_replica(t) for t in tasks]
    elapsed = time.perf_counter() - t0
    summaries.sort(key=lambda s: s["replica"])
    counts = [s["events"] for s in summaries]
    payload = {
        "command": "simulate",
        "replicas": replicas,
        "event_count_total": int(np.sum(counts)),
        "event_count_mean": float(np.mean(counts)),
        "max_energy_drift": max(s["energy_drift"] for s in summaries),
        "max_momentum_drift": max(s["momentum_drift"] for s in summaries),
        "per_replica": summaries,
    }
    payload.update(provenance)
    _write_json(Path(out_dir) / "summary.json", payload)
    print(f"simulate: {replicas} replicas, {payload['event_count_total']} events "
          f"({elapsed:.1f}s)", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# sanov-scan
# ---------------------------------------------------------------------------

def cmd_sanov_scan(cfg, out_dir, seed, threads, provenance) -> int:
    m = _measure_from(cfg)
    x = _macro_from(cfg)
    event = DeficitEvent(x, radius=_float(cfg, "radius", 6.0),
                         deficit=_float(cfg, "deficit", 0.5))
    proxy, beta, _ = energy_deficit_infimum(m, event)
    results = sanov_scan(
        m, event, _ints(cfg, "n_list", [20, 40, 80]), seed=seed,
        direct_samples=_int(cfg, "direct_samples", 100_000),
        chains=_int(cfg, "chains", 8),
        sweeps=_int(cfg, "sweeps", 1600),
        thin=_int(cfg, "thin", 4),
        use_tilting=cfg.get("tilting", "on") != "off",
    )
    rows = [(r.n, r.direct_estimate, r.direct_hits, r.direct_samples,
             r.is_estimate, r.is_se, r.ess) for r in results]
    _write_csv(Path(out_dir) / "sanov_scan.csv",
               ["n", "direct_estimate", "direct_hits", "direct_samples",
                "is_estimate", "is_se", "min_ess"],
               rows, provenance)
    payload = {"command": "sanov-scan", "proxy_rate": proxy, "beta": beta,
               "radius": event.radius, "deficit": event.deficit}
    payload.update(provenance)
    _write_json(Path(out_dir) / "manifest.json", payload)
    return 0


# ---------------------------------------------------------------------------
# kac-ldp
# ---------------------------------------------------------------------------

def cmd_kac_ldp(cfg, out_dir, seed, threads, provenance) -> int:
    x = _macro_from(cfg)
    rows = kac_ldp_scan(
        x, _ints(cfg, "n_list", [50]), epsilon=_float(cfg, "epsilon", 0.15),
        horizon=_float(cfg, "horizon", 0.4), seed=seed,
        replicas=_int(cfg, "replicas", 400),
        calibration=_int(cfg, "calibration", 100),
    )
    table = [(r.n, r.estimate, r.se, r.ess, r.target_rate, r.tube_hits,
              r.replicas) for r in rows]
    _write_csv(Path(out_dir) / "kac_ldp.csv",
               ["n", "estimate", "se", "ess", "target_rate", "tube_hits",
                "replicas"], table, provenance)
    payload = {"command": "kac-ldp", "epsilon": _float(cfg, "epsilon", 0.15)}
    payload.update(provenance)
    _write_json(Path(out_dir) / "manifest.json", payload)
    return 0


# ---------------------------------------------------------------------------
# luw
# ---------------------------------------------------------------------------

def cmd_luw(cfg, out_dir, seed, threads, provenance) -> int:
    m = _measure_from(cfg)
    prof = _profile_from(cfg)
    x = _macro_from(cfg)
    n_list = _ints(cfg, "n_list", [])
    if not n_list:
        raise ConfigError("luw needs a nonempty n_list")
    f0 = m.as_grid_density()
    rows, target, paths = luw_rate_convergence(
        f0, prof, m, x, n_list, horizon=_float(cfg, "horizon", 1.0),
        n_mf=_int(cfg, "n_mf", 4000), replicas=_int(cfg, "replicas", 25),
        rng_seed=seed,
        snapshots_per_segment=_int(cfg, "snapshots_per_segment", 21),
        stride=_int(cfg, "stride", 4))
    closed, numeric = luw_canonical_cost(m, prof)
    _write_csv(Path(out_dir) / "luw_convergence.csv",
               ["n", "dynamical_rate", "static_rate"],
               [(int(n), j, h) for n, j, h in rows], provenance)
    out = Path(out_dir)
    for n, path in paths.items():
        sub = out / f"path_n{int(n):03d}"
        sub.mkdir(exist_ok=True)
        for t, d in zip(path.times, path.f_path.densities):
            d.write_csv(sub / f"f_t{t:.6f}.csv")
        _write_json(sub / "manifest.json", {
            "n": int(n),
            "profile_base": prof.base,
            "profile_jumps": list(prof.jumps),
            "energies": [float(v) for v in path.energies()],
            "times": [float(t) for t in path.times],
            "tilt_tail_masses": [float(v) for v in path.tilt_tails],
            "continuity_defect": path.continuity_defect(),
        })
    payload = {"command": "luw", "static_rate_target": target,
               "cost_closed_form": closed, "cost_numeric": numeric}
    payload.update(provenance)
    _write_json(out / "manifest.json", payload)
    return 0


# ---------------------------------------------------------------------------
# rate
# ---------------------------------------------------------------------------

def cmd_rate(cfg, out_dir, seed, threads, provenance) -> int:
    events_path = cfg.get("events")
    init_path = cfg.get("init")
    if not events_path or not init_path:
        raise ConfigError("rate needs events=<jsonl> and init=<binary>")
    init = Configuration.read_binary(init_path)
    traj = Trajectory.read_jsonl(events_path, init)
    m = _measure_from(cfg)
    x = _macro_from(cfg)
    binning = FlowBinning(
        horizon=traj.horizon,
        n_time=_int(cfg, "binning_time", 20),
        n_v=_int(cfg, "binning_v", 16),
        n_omega=_int(cfg, "binning_omega", 16),
        half_width=_float(cfg, "grid_half_width", 8.0))
    path = EmpiricalPath(traj)
    q = empirical_flow(traj).histogram(binning)
    from .microcanonical import histogram_velocities

    pi0 = histogram_velocities(init.velocities, m.grid)
    pair = DiscretizedPair(path, q, pi0=pi0)
    tol = _float(cfg, "tol_moment", 0.05)
    from .measures import micro_sanov_rate
    from .observables import reference_flow

    j = dynamical_rate(pair)
    h = micro_sanov_rate(pi0, m, x, tol_moment=tol)
    i_eu = micro_rate(pair, m, x, tol_moment=tol)
    lo, hi, steps = (cfg.get("e_scan", "1.0:3.0:21").split(":") + ["21"])[:3]
    scan = np.linspace(float(lo), float(hi), int(steps))
    try:
        state, i_can = canonical_rate(pair, m, scan)
        argmin_e = state.e
    except KacflowError:
        i_can, argmin_e = math.inf, math.nan
    ref_mass = reference_flow(path, binning).total_mass()
    fin = lambda v: v if math.isfinite(v) else "inf"
    payload = {
        "command": "rate",
        "J": fin(j),
        "H": fin(h),
        "I_eu": fin(i_eu),
        "I_can": fin(i_can),
        "argmin_e": argmin_e,
        "diagnostics": {
            "flow_bins_occupied": len(q.bins),
            "event_count": traj.event_count,
            "binning": {"n_time": binning.n_time, "n_v": binning.n_v,
                        "n_omega": binning.n_omega},
            "slack_estimates": {
                "events_per_occupied_bin": traj.event_count / max(len(q.bins), 1),
                "flow_mass_minus_reference_mass": q.total_mass - ref_mass,
            },
        },
    }
    payload.update(provenance)
    _write_json(Path(out_dir) / "rate_report.json", payload)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_HANDLERS = {
    "simulate": cmd_simulate,
    "sanov-scan": cmd_sanov_scan,
    "kac-ldp": cmd_kac_ldp,
    "luw": cmd_luw,
    "rate": cmd_rate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kacflow",
        description="binary-collision particle simulator and rate-functional toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--scheme", choices=["exact", "null"], default=None)
        p.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(args.config)
        if args.scheme:
            cfg["scheme"] = args.scheme
        seed = args.seed if args.seed is not None else _int(cfg, "seed", 0)
        out_dir = Path(args.out if args.out is not None else cfg.get("out", "."))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = {
        "config_sha256": config_hash(args.config),
        "kacflow_version": __version__,
        "seed": seed,
    }
    try:
        return _HANDLERS[args.command](cfg, out_dir, seed, args.threads, provenance)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (KacflowError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
