import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml
from pydantic import ValidationError

from secinfer.harness import analysis
from secinfer.harness.cli import main
from secinfer.harness.config import deep_merge, expand, load_config
from secinfer.harness.simulate import rows_from_csv, run_config

ROOT = Path(__file__).resolve().parents[1]

BASE = {
    "name": "t",
    "seed": 1,
    "profiles": {"p": {"model_mb": 17, "buffer_mb": 30, "exec_ms": 60, "runtime_init_ratio": 0.4}},
    "models": {"a": "p", "b": "p"},
    "deployment": {"mode": "all_in_one"},
    "workload": [{"kind": "poisson", "rate_rps": 2, "duration_s": 10, "model": "a"},
                 {"kind": "sessions", "models": ["a", "b"], "session_times_s": [3]}],
}


def test_unknown_fields_rejected():
    for bad in ({**BASE, "bogus": 1}, deep_merge(BASE, {"policy": {"tcs": 2}}),
                deep_merge(BASE, {"cluster": {"nodes": 0}})):
        with pytest.raises(ValidationError):
            expand(bad)


def test_semantic_validation():
    with pytest.raises(ValidationError):
        expand(deep_merge(BASE, {"policy": {"kind": "iso_reuse", "tcs_count": 2}}))
    with pytest.raises(ValidationError):
        expand(deep_merge(BASE, {"policy": {"memory_budget_mb": 200}}))
    with pytest.raises(ValidationError):
        expand({**BASE, "workload": [{"kind": "poisson", "rate_rps": 1, "duration_s": 1, "model": "zz"}]})
    with pytest.raises(ValueError):
        expand({**BASE, "runs": [{"name": "x"}, {"name": "x"}]})


def test_runs_deep_merge_and_seed_override():
    runs = expand({**BASE, "runs": [{"name": "one"}, {"name": "four", "policy": {"tcs_count": 4}}]}, seed=9)
    assert [n for n, _ in runs] == ["one", "four"]
    assert runs[1][1].policy.tcs_count == 4 and runs[1][1].models == BASE["models"]
    assert all(c.seed == 9 for _, c in runs)


def test_shipped_configs_validate():
    for p in sorted((ROOT / "configs").glob("*.yaml")):
        assert load_config(p)


def test_run_config_outputs(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(BASE))
    (out,) = run_config(cfg, out_dir=tmp_path / "o")
    rows = rows_from_csv((tmp_path / "o" / "t.csv").read_text())
    assert len(rows) == out.summary["requests"] > 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["runs"]["t"]["by_group"]["session1"]["paths"]["cold"] + \
        summary["runs"]["t"]["by_group"]["session1"]["paths"]["hot"] + \
        summary["runs"]["t"]["by_group"]["session1"]["paths"]["warm"] == 2


def test_burst_recovery_definition():
    def rows(lat_of):
        return [{"submit_ms": t * 100.0, "latency_ms": lat_of(t * 100.0), "path": "hot"} for t in range(1200)]

    flat = analysis.burst_recovery(rows(lambda t: 100.0), 60_000, 120_000)
    assert flat["recovered"] and flat["recovery_s"] == 0
    spike = analysis.burst_recovery(rows(lambda t: 500.0 if 60_000 <= t < 70_000 else 100.0), 60_000, 120_000)
    assert spike["recovered"] and spike["recovery_s"] == pytest.approx(10.0)
    never = analysis.burst_recovery(rows(lambda t: 100.0 if t < 60_000 else 1000.0), 60_000, 120_000)
    assert not never["recovered"]
    unfinished = rows(lambda t: 100.0)
    for r in unfinished[-10:]:
        r["latency_ms"] = None  # counts as unbounded
    assert not analysis.burst_recovery(unfinished, 60_000, 120_000, limit_ms=60_000)["recovered"]


def test_cli_invalid_config_exits_nonzero(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump({**BASE, "unexpected": True}))
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert "unexpected" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_cli_simulate_and_report(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({**BASE, "runs": [{"name": "r1"}, {"name": "r2", "policy": {"kind": "native"}}]}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert main(["report", str(tmp_path / "o"), "--out", str(tmp_path / "plot.csv")]) == 0
    out = capsys.readouterr().out
    assert "r1" in out and "r2" in out
    assert (tmp_path / "plot.csv").read_text().startswith("source,run")


def test_cli_replay_sim(tmp_path):
    trace = tmp_path / "t.csv"
    trace.write_text("t_ms,user_id,model_id,group\n0,u,a,\n10000,u,b,\n")
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({k: v for k, v in BASE.items() if k != "workload"}))
    assert main(["replay", "--trace", str(trace), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = rows_from_csv((tmp_path / "o" / "t.csv").read_text())
    assert [r["path"] for r in rows] == ["cold", "warm"]


def test_cli_encrypt_model_keyfile_private(tmp_path):
    kf = tmp_path / "owner.json"
    assert main(["owner", "--keyfile", str(kf), "encrypt-model", "--model-id", "m", "--random", "3", "4",
                 "--out", str(tmp_path / "m.ssmi")]) == 0
    assert (kf.stat().st_mode & 0o777) == 0o600
    assert (tmp_path / "m.ssmi").read_bytes()[:4] == b"SSMI"


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "secinfer", "measure", "keyservice"], capture_output=True, text=True)
    assert r.returncode == 0 and len(r.stdout.strip()) == 64
