import json
import subprocess
import sys

import pytest

from noisereg import harness as H


def run_cli(*argv):
    return H.main([str(a) for a in argv])


def test_defaults_are_filled():
    cfg = H.resolve(H.ScenarioConfig(kind="scaling", seed=1))
    assert cfg.p == 3.0 and cfg.lam == [0.25, 0.5, 2.0, 4.0]
    assert cfg.out.endswith("scaling")


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("LAB_SEED", "41")
    assert H.resolve(H.ScenarioConfig(kind="sde")).seed == 41


@pytest.mark.parametrize("data,key", [
    ({"kind": "sde", "T": -1.0}, "T"),
    ({"kind": "duality", "epsilons": [0.1, 0.2]}, "epsilons"),
    ({"kind": "sde", "field": "nope"}, "field"),
    ({"kind": "flow", "alpha": 1.5}, "alpha"),
    ({"kind": "demo", "demo": "other"}, "demo"),
    ({"kind": "moments", "m": 5}, "m"),
])
def test_invalid_values_name_the_key(data, key):
    with pytest.raises(H.ConfigError) as exc:
        H.resolve(H.ScenarioConfig.from_dict(data))
    assert exc.value.key == key
    assert str(exc.value).startswith(f"{key}:")


def test_unknown_key_rejected():
    with pytest.raises(H.ConfigError):
        H.ScenarioConfig.from_dict({"kind": "sde", "bogus": 1})


def test_aliases():
    cfg = H.ScenarioConfig.from_dict({"kind": "scaling", "lambda": [2.0], "n_paths": 3})
    assert cfg.lam == [2.0] and cfg.paths == 3


def test_hash_is_stable_and_ignores_out_and_workers():
    a = H.resolve(H.ScenarioConfig(kind="sde", seed=3, out="x"))
    b = H.resolve(H.ScenarioConfig(kind="sde", seed=3, out="y", workers=4))
    c = H.resolve(H.ScenarioConfig(kind="sde", seed=4))
    assert H.config_hash(a) == H.config_hash(b) != H.config_hash(c)
    assert len(H.config_hash(a)) == 40


def test_hash_matches_git_blob_format():
    import hashlib

    cfg = H.resolve(H.ScenarioConfig(kind="sde", seed=0))
    data = {k: v for k, v in cfg.to_dict().items() if k not in ("out", "workers")}
    body = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    assert H.config_hash(cfg) == hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def test_metric_comparators():
    assert H.Metric("a", 1.0, "", "", 2.0, "<").passed
    assert not H.Metric("a", 2.0, "", "", 2.0, "<").passed
    assert H.Metric("a", 2.0, "", "", 2.0, "<=").passed
    assert not H.Metric("a", None, "", "", 2.0, ">=").passed
    assert H.Metric("a", 1.0, "", "").passed is None


def test_sde_run_writes_report(tmp_path):
    out = tmp_path / "sde"
    assert run_cli("sde", "--seed", 0, "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["passed"] is True
    assert rep["metrics"][0]["name"] == "sup_error"
    assert rep["metrics"][0]["value"] < 1e-5
    assert (out / "data" / "trajectory.csv").exists()
    assert rep["config_hash"] == H.config_hash(H.ScenarioConfig.from_dict(rep["config"]))


def test_tolerance_failure_exit_code(tmp_path):
    assert run_cli("sde", "--seed", 0, "--tolerance", 1e-16, "--out", tmp_path / "o") == 1


def test_invalid_config_exit_code(tmp_path, capsys):
    assert run_cli("sde", "--T", -1, "--out", tmp_path / "o") == 2
    assert "T:" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert run_cli("sde", "--config", bad, "--out", tmp_path / "o") == 2


def test_flags_override_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"lambda": [0.5], "p": 4, "q": 4, "seed": 2}))
    args = H.build_parser().parse_args(["scaling", "--config", str(f), "--lambda", "2", "3"])
    cfg = H.resolve(H.config_from_args(args))
    assert cfg.lam == [2.0, 3.0]
    assert cfg.p == 4


def test_list_filters(capsys):
    assert run_cli("list", "--filter", "supercritical", "--json") == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows and all(r["supercritical"] for r in rows)
    assert run_cli("list", "--filter", "admissible", "--json") == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows and not any(r["supercritical"] for r in rows)
    assert run_cli("list", "--filter", "ex2", "--json") == 0
    assert [r["id"] for r in json.loads(capsys.readouterr().out)] == ["ex2-inward"]


def test_workers_do_not_change_results(tmp_path):
    reps = []
    for w in (1, 2):
        cfg = H.ScenarioConfig(kind="counterexample", seed=0, paths=1000, dt=1e-2, workers=w,
                               out=str(tmp_path / f"w{w}"))
        reps.append(H.run_scenario(cfg))
    assert reps[0].config_hash == reps[1].config_hash
    assert reps[0].results == reps[1].results
    assert [m["value"] for m in reps[0].metrics] == [m["value"] for m in reps[1].metrics]


def test_scaling_and_lps_scenarios(tmp_path):
    assert H.run_scenario(H.ScenarioConfig(kind="scaling", seed=0, out=str(tmp_path / "s"))).passed
    rep = H.run_scenario(H.ScenarioConfig(kind="lps-check", seed=0, out=str(tmp_path / "l")))
    assert rep.results["lps"]["classification"] == "critical"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "noisereg", "list"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "ex1-outward" in proc.stdout
