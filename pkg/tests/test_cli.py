import csv
import json

import pytest

from pvfeeder.cli import main

SMALL = {
    "network": {"kind": "synthetic", "n_nodes": 5, "impedance_scale": 2.5},
    "fleet": {"penetration_steps": [0.5, 1.0], "n_placements": 2},
    "run": {"step_seconds": 90},
}


def write(tmp_path, doc, name="c.json"):
    p = tmp_path / name
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return str(p)


def run_dir(out):
    (d,) = list(out.iterdir())
    return d


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate_small(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    assert main(["simulate", cfg, str(tmp_path / "out")]) == 0
    d = run_dir(tmp_path / "out")
    rows = read_csv(d / "metrics.csv")
    assert len(rows) == 3 * 2  # growth kinds x penetrations, one placement
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["config_hash"] == d.name
    assert manifest["seeds"]["run"] == 0 and "numpy" in manifest["versions"]
    assert manifest["config"]["network"]["n_nodes"] == 5
    traces = sorted((d / "traces").iterdir())
    assert len(traces) == 6
    first = json.loads(traces[0].read_text().splitlines()[0])
    assert "v_max_v" in first


def test_simulate_rerun_identical(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["simulate", cfg, str(tmp_path / "a")]) == 0
    assert main(["simulate", cfg, str(tmp_path / "b")]) == 0
    a = (run_dir(tmp_path / "a") / "metrics.csv").read_bytes()
    b = (run_dir(tmp_path / "b") / "metrics.csv").read_bytes()
    assert a == b


def test_seed_flag_changes_hash(tmp_path):
    cfg = write(tmp_path, SMALL)
    main(["simulate", cfg, str(tmp_path / "a"), "--seed", "3"])
    d = run_dir(tmp_path / "a")
    assert json.loads((d / "manifest.json").read_text())["seeds"]["run"] == 3


def test_malformed_json_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, '{"run": {"seed": 1,}}')
    assert main(["simulate", cfg, str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert "c.json:1:" in err and "parse error" in err


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, '{\n"run": {\n"speed": 1}}')
    assert main(["sweep", cfg, str(tmp_path / "out")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_runtime_failure_exit_1(tmp_path, capsys):
    doc = json.loads(json.dumps(SMALL))
    doc["run"]["simulate_placement"] = 0
    doc["network"]["impedance_scale"] = 1e6  # power flow cannot converge
    cfg = write(tmp_path, doc)
    assert main(["simulate", cfg, str(tmp_path / "out")]) == 1
    assert "error" in capsys.readouterr().err


def test_sweep_outputs(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["sweep", cfg, str(tmp_path / "out")]) == 0
    d = run_dir(tmp_path / "out")
    rows = read_csv(d / "metrics.csv")
    keys = {(r["growth_kind"], r["penetration"], r["placement"]) for r in rows}
    assert len(rows) == len(keys) == 3 * 2 * 2
    for name in (
        "max_voltage_vs_penetration.csv",
        "overvoltage_vs_penetration.csv",
        "disconnections_curtailment_by_kind.csv",
        "reactive_demand_utilization.csv",
    ):
        fig = read_csv(d / name)
        assert len(fig) == 3 * 2 and all(r["n_placements"] == "2" for r in fig)
    manifest = json.loads((d / "manifest.json").read_text())
    assert set(manifest["seeds"]) == {"run", "profiles", "placement", "network"}


def test_gss_outputs(tmp_path):
    doc = {"gss": {"levels": [0.4, 1.0], "n_requests": 4}, "run": {"step_seconds": 60}}
    cfg = write(tmp_path, doc)
    assert main(["gss", cfg, str(tmp_path / "out")]) == 0
    rows = read_csv(run_dir(tmp_path / "out") / "gss_response.csv")
    assert {r["direction"] for r in rows} == {"UR", "DR"}
    assert {r["level"] for r in rows} == {"0.4", "1"}


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2
