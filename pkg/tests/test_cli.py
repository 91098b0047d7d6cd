import json
import math
from pathlib import Path

import numpy as np
import pytest

from kacflow.cli import main, parse_config


def write_config(path, **kv):
    path.write_text("# test config\n" + "".join(f"{k} = {v}\n" for k, v in kv.items()))
    return path


def test_parse_config_round_trip(tmp_path):
    p = write_config(tmp_path / "c.ini", n=4, horizon=0.5, scheme="null")
    cfg = parse_config(p)
    assert cfg == {"n": "4", "horizon": "0.5", "scheme": "null"}


def test_malformed_config_exits_2(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("this line has no equals sign\n")
    assert main(["simulate", "--config", str(bad)]) == 2


def test_missing_required_key_exits_2(tmp_path):
    p = write_config(tmp_path / "c.ini", horizon=0.5)
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(p), "--out", str(out)]) == 2


def test_luw_empty_n_list_exits_2(tmp_path):
    p = write_config(tmp_path / "c.ini", profile_base=1.0,
                     profile_jumps="0.4:0.5", n_list="")
    assert main(["luw", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_simulate_reruns_are_byte_identical(tmp_path):
    p = write_config(tmp_path / "c.ini", n=8, horizon=0.5, e=1.0,
                     replicas=3, snapshots="0.25", seed=42)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(p), "--out", str(out1)]) == 0
    assert main(["simulate", "--config", str(p), "--out", str(out2)]) == 0
    for name in sorted(f.name for f in out1.iterdir()):
        b1 = (out1 / name).read_bytes()
        b2 = (out2 / name).read_bytes()
        assert b1 == b2, f"{name} differs between reruns"


def test_simulate_two_particle_poisson_summary(tmp_path):
    p = write_config(tmp_path / "c.ini", n=2, horizon=1.0, e=0.5,
                     replicas=400, seed=3, scheme="null")
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(p), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    # |v1 - v2| = 2 on this manifold: event count is Poisson(2) per replica
    mean = summary["event_count_mean"]
    se = math.sqrt(2.0 / 400)
    assert abs(mean - 2.0) <= 4 * se
    assert summary["max_energy_drift"] <= 1e-10
    assert summary["config_sha256"]
    assert summary["kacflow_version"]


def test_rate_command_on_simulated_run(tmp_path):
    p = write_config(tmp_path / "c.ini", n=300, horizon=1.0, e=1.0,
                     replicas=1, seed=11, scheme="null")
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(p), "--out", str(out)]) == 0
    rate_cfg = write_config(
        tmp_path / "rate.ini",
        events=str(out / "events_r0000.jsonl"),
        init=str(out / "init_r0000.bin"),
        e=1.0, e_scan="1.0:2.0:11", binning_v=16, binning_omega=16)
    assert main(["rate", "--config", str(rate_cfg), "--out", str(out)]) == 0
    report = json.loads((out / "rate_report.json").read_text())
    assert report["J"] >= 0
    assert math.isfinite(report["J"])
    assert report["diagnostics"]["event_count"] > 0
    assert "slack_estimates" in report["diagnostics"]


def test_sanov_scan_command_writes_table(tmp_path):
    p = write_config(tmp_path / "c.ini", e=2.0, radius=6.0, deficit=0.5,
                     n_list="20", direct_samples=20000, chains=4,
                     sweeps=1400, thin=4, seed=5)
    out = tmp_path / "out"
    assert main(["sanov-scan", "--config", str(p), "--out", str(out)]) == 0
    lines = (out / "sanov_scan.csv").read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    header = [l for l in lines if not l.startswith("#")][0]
    assert header.split(",")[0] == "n"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["proxy_rate"] > 0


def test_luw_command_exports_paths(tmp_path):
    p = write_config(tmp_path / "c.ini", profile_base=1.0, profile_jumps="0.4:0.5",
                     n_list="2", e=2.0, horizon=1.0, n_mf=400, replicas=2,
                     snapshots_per_segment=5, stride=8, seed=6)
    out = tmp_path / "out"
    assert main(["luw", "--config", str(p), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert abs(manifest["cost_closed_form"] - 0.5) < 1e-12
    assert abs(manifest["cost_numeric"] - 0.5) < 1e-3
    sub = out / "path_n002"
    assert (sub / "manifest.json").exists()
    assert len(list(sub.glob("f_t*.csv"))) >= 5
