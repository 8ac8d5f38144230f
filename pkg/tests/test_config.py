import json

import pytest

from pvfeeder import config as cfg
from pvfeeder.errors import ConfigError
from pvfeeder.inverters import DroopSettings
from pvfeeder.network import desk_feeder, network_to_dict, save_network


def write(tmp_path, text, name="c.json"):
    p = tmp_path / name
    p.write_text(text if isinstance(text, str) else json.dumps(text, indent=2))
    return p


def test_defaults_match_reference_settings():
    run = cfg.build({})
    assert run.scenario.droop == DroopSettings()
    assert run.scenario.cic.v_cic == pytest.approx(255.85 / 230)
    assert run.gss.gamma == 0.2 and len(run.gss.levels) == 13
    assert network_to_dict(run.scenario.network) == network_to_dict(desk_feeder())
    assert run.scenario.sim_step == 30.0 and run.jobs == 1


def test_overrides_and_volts(tmp_path):
    p = write(tmp_path, {"droop": {"v_trip": 256.0}, "profiles": {"season": "winter"}, "run": {"seed": 4}})
    run = cfg.load(p, jobs=3, step_seconds=60)
    assert run.scenario.droop.v_trip == pytest.approx(256 / 230)
    assert run.scenario.cic.v_trip == run.scenario.droop.v_trip
    assert run.scenario.profile.pv_peak_kw == 3.5
    assert run.scenario.seed == 4 and run.jobs == 3 and run.scenario.sim_step == 60.0
    assert cfg.load(p, seed=9).scenario.seed == 9


def test_hash_is_stable_and_sensitive(tmp_path):
    a = cfg.load(write(tmp_path, {"run": {"seed": 1}}))
    b = cfg.load(write(tmp_path, '{"run":   {"seed": 1}}', "d.json"))
    c = cfg.load(write(tmp_path, {"run": {"seed": 2}}, "e.json"))
    assert a.hash == b.hash != c.hash and len(a.hash) == 12


def test_malformed_json_reports_position(tmp_path):
    p = write(tmp_path, '{\n  "run": {"seed": 1,}\n}')
    with pytest.raises(ConfigError, match=r"c\.json:2:\d+: JSON parse error"):
        cfg.load(p)


def test_unknown_key_reports_line(tmp_path):
    p = write(tmp_path, '{\n  "fleet": {\n    "penetration": 0.3\n  }\n}')
    with pytest.raises(ConfigError, match=r"unknown key 'fleet.penetration' \(line 3\)"):
        cfg.load(p)
    with pytest.raises(ConfigError, match="unknown section"):
        cfg.build({"plots": {}})


@pytest.mark.parametrize(
    "doc",
    [
        {"run": {"jobs": "two"}},
        {"run": {"jobs": 1.5}},
        {"run": {"trace": 1}},
        {"fleet": {"penetration_steps": 0.5}},
        {"network": {"kind": "mesh"}},
        {"network": {"kind": "file"}},
        {"profiles": {"season": "spring"}},
        {"droop": {"v_db": 254.0}},
        {"run": {"jobs": 0}},
        {"run": {"seed": None}},
        {"network": []},
    ],
)
def test_bad_values_are_config_errors(doc):
    with pytest.raises(ConfigError):
        cfg.build(doc)


def test_file_network(tmp_path):
    save_network(desk_feeder(8), tmp_path / "net.json")
    p = write(tmp_path, {"network": {"kind": "file", "path": "net.json"}})
    assert cfg.load(p).scenario.network.n_buses == 8


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        cfg.load("/nonexistent/config.json")
