"""JSON run configuration: parsing, validation with located diagnostics, and hashing.

The document has the sections ``network``, ``profiles``, ``fleet``, ``droop``,
``cic``, ``gss`` and ``run``; every key is optional and falls back to the
defaults in :data:`DEFAULTS`. Voltages are given in volts, times in seconds
unless the key says otherwise.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .cic import CicSettings
from .errors import ConfigError, PvFeederError
from .gss import GssSettings
from .inverters import DroopSettings
from .network import FeederSpec, desk_feeder, generate_synthetic_feeder, load_network, scale_feeder
from .profiles import DayProfileSpec, load_ami_csv
from .scenario import ScenarioConfig

DEFAULTS = {
    "network": {
        "kind": "desk",  # desk | synthetic | file
        "n_nodes": 20,
        "seed": 0,
        "impedance_scale": 2.5,
        "path": None,
        "n_laterals": 3,
        "segment_length_m": 30.0,
        "r_ohm_per_km": 0.641,
        "rx_ratio": 6.0,
    },
    "profiles": {
        "season": "summer",
        "mean_load_kw": None,
        "std_load_kw": None,
        "pv_peak_kw": None,
        "seed": 0,
        "power_factor": 0.95,
        "leading": True,
        "ami_csv": None,
    },
    "fleet": {
        "base_penetration": 0.3,
        "base_mix": {"legacy": 0.5, "autonomous": 0.5},
        "growth_kinds": ["autonomous", "non_exporting", "coordinated"],
        "penetration_steps": [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        "n_placements": 40,
        "placement_seed": 0,
        "s_rating_kva": 6.0,
        "p_ac_max_kw": 5.0,
    },
    "droop": {
        "v_nom": 230.0,
        "v_db": 248.0,
        "v_qmin": 253.0,
        "v_trip": 257.0,
        "v_max_l": 260.0,
        "v_max_a": 265.0,
        "q_min_pu": 0.44,
        "p_min_pu": 0.2,
        "tau_v_min": 1.5,
        "tau_w_min": 3.5,
        "min_offline_s": 120.0,
        "trip_window_s": 600.0,
    },
    "cic": {
        "v_cic": 255.85,
        "big_m": 1e4,
        "self_sufficiency": "penalty",
        "tolerance": 1e-6,
        "max_iter": 200,
    },
    "gss": {
        "gamma": 0.2,
        "levels": [round(0.40 + 0.05 * k, 2) for k in range(13)],
        "n_requests": 320,
        "hold_s": 300.0,
        "warmup_s": 3600.0,
        "passive_penetration": 0.3,
        "coordinated_penetration": 0.3,
        "placement": 6,
    },
    "run": {
        "seed": 0,
        "step_seconds": 30.0,
        "jobs": 1,
        "overvoltage_v": 257.0,
        "simulate_placement": 0,
        "trace": True,
    },
}

_NULLABLE = {("network", "path"), ("profiles", "ami_csv")} | {
    ("profiles", k) for k in ("mean_load_kw", "std_load_kw", "pv_peak_kw")
}


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    gss: GssSettings
    jobs: int
    trace: bool
    simulate_placement: int
    document: dict  # normalised document, the input to the hash

    @property
    def hash(self) -> str:
        return config_hash(self.document)


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    if not m:
        return ""
    return f" (line {text.count(chr(10), 0, m.start()) + 1})"


def _merge(defaults: dict, given: dict, text: str | None) -> dict:
    out = copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ConfigError("configuration root must be a JSON object")
    for section, values in given.items():
        if section not in defaults:
            raise ConfigError(f"unknown section '{section}'{_line_of(text, section)}")
        if not isinstance(values, dict):
            raise ConfigError(f"section '{section}' must be an object{_line_of(text, section)}")
        for key, val in values.items():
            if key not in defaults[section]:
                raise ConfigError(f"unknown key '{section}.{key}'{_line_of(text, key)}")
            ref = defaults[section][key]
            where = f"'{section}.{key}'{_line_of(text, key)}"
            if val is None:
                if (section, key) not in _NULLABLE:
                    raise ConfigError(f"{where} may not be null")
            elif isinstance(ref, bool):
                if not isinstance(val, bool):
                    raise ConfigError(f"{where} must be true or false")
            elif isinstance(ref, (int, float)) and not isinstance(ref, bool):
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise ConfigError(f"{where} must be a number")
                if isinstance(ref, int) and not isinstance(ref, bool) and float(val) != int(val):
                    raise ConfigError(f"{where} must be an integer")
            elif isinstance(ref, list) and not isinstance(val, list):
                raise ConfigError(f"{where} must be a list")
            elif isinstance(ref, dict) and not isinstance(val, dict):
                raise ConfigError(f"{where} must be an object")
            elif isinstance(ref, str) and not isinstance(val, str):
                raise ConfigError(f"{where} must be a string")
            out[section][key] = val
    return out


def config_hash(document: dict) -> str:
    canon = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _network(sec: dict, base_dir: Path):
    kind = sec["kind"]
    if kind == "desk":
        return desk_feeder(int(sec["n_nodes"]), int(sec["seed"]), float(sec["impedance_scale"]))
    if kind == "synthetic":
        spec = FeederSpec(
            int(sec["n_nodes"]),
            seed=int(sec["seed"]),
            n_laterals=int(sec["n_laterals"]),
            segment_length_m=float(sec["segment_length_m"]),
            r_ohm_per_km=float(sec["r_ohm_per_km"]),
            rx_ratio=float(sec["rx_ratio"]),
        )
        return scale_feeder(generate_synthetic_feeder(spec), float(sec["impedance_scale"]))
    if kind == "file":
        if not sec["path"]:
            raise ConfigError("'network.path' is required when network.kind is 'file'")
        return load_network(base_dir / sec["path"])
    raise ConfigError(f"'network.kind' must be desk, synthetic or file, got {kind!r}")


def build(document: dict, base_dir: Path | str = ".", text: str | None = None) -> RunConfig:
    """Validate a (partial) document and build the run objects."""
    doc = _merge(DEFAULTS, document, text)
    base_dir = Path(base_dir)
    net_s, prof_s, fleet_s, droop_s, cic_s, gss_s, run_s = (
        doc[k] for k in ("network", "profiles", "fleet", "droop", "cic", "gss", "run")
    )
    try:
        network = _network(net_s, base_dir)
        season = prof_s["season"]
        if season not in ("summer", "winter"):
            raise ConfigError(f"'profiles.season' must be summer or winter{_line_of(text, 'season')}")
        profile = DayProfileSpec.summer() if season == "summer" else DayProfileSpec.winter()
        over = {k: prof_s[k] for k in ("mean_load_kw", "std_load_kw", "pv_peak_kw") if prof_s[k] is not None}
        if over:
            profile = DayProfileSpec(**{**profile.__dict__, **over})
        step = float(run_s["step_seconds"])
        ami = load_ami_csv(base_dir / prof_s["ami_csv"], step) if prof_s["ami_csv"] else None
        vn = float(droop_s["v_nom"])
        droop = DroopSettings(
            v_nom=1.0,
            v_db=droop_s["v_db"] / vn,
            v_qmin=droop_s["v_qmin"] / vn,
            v_trip=droop_s["v_trip"] / vn,
            v_max_l=droop_s["v_max_l"] / vn,
            v_max_a=droop_s["v_max_a"] / vn,
            q_min_pu=float(droop_s["q_min_pu"]),
            p_min_pu=float(droop_s["p_min_pu"]),
            tau_v=float(droop_s["tau_v_min"]),
            tau_w=float(droop_s["tau_w_min"]),
        )
        cic = CicSettings(
            v_cic=cic_s["v_cic"] / vn,
            v_trip=droop.v_trip,
            big_m=float(cic_s["big_m"]),
            q_min_pu=droop.q_min_pu,
            re_breakpoints=(207 / vn, droop.v_qmin, droop.v_max_a),
            self_sufficiency=cic_s["self_sufficiency"],
            tolerance=float(cic_s["tolerance"]),
            max_iter=int(cic_s["max_iter"]),
        )
        scenario = ScenarioConfig(
            network=network,
            profile=profile,
            droop=droop,
            cic=cic,
            base_penetration=float(fleet_s["base_penetration"]),
            base_mix=tuple(fleet_s["base_mix"].items()),
            growth_kinds=tuple(fleet_s["growth_kinds"]),
            penetration_steps=tuple(fleet_s["penetration_steps"]),
            n_placements=int(fleet_s["n_placements"]),
            placement_seed=int(fleet_s["placement_seed"]),
            seed=int(run_s["seed"]),
            profile_seed=int(prof_s["seed"]),
            sim_step=step,
            s_rating=float(fleet_s["s_rating_kva"]),
            p_ac_max=float(fleet_s["p_ac_max_kw"]),
            power_factor=float(prof_s["power_factor"]),
            leading_pf=bool(prof_s["leading"]),
            overvoltage_v=float(run_s["overvoltage_v"]),
            min_offline_s=float(droop_s["min_offline_s"]),
            trip_window_s=float(droop_s["trip_window_s"]),
            ami_profiles=ami,
        )
        gss = GssSettings(
            gamma=float(gss_s["gamma"]),
            levels=tuple(float(v) for v in gss_s["levels"]),
            n_requests=int(gss_s["n_requests"]),
            hold_s=float(gss_s["hold_s"]),
            warmup_s=float(gss_s["warmup_s"]),
            passive_penetration=float(gss_s["passive_penetration"]),
            coordinated_penetration=float(gss_s["coordinated_penetration"]),
            placement=int(gss_s["placement"]),
        )
    except ConfigError:
        raise
    except (PvFeederError, ValueError, TypeError, KeyError, OSError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    jobs = int(run_s["jobs"])
    if jobs < 1:
        raise ConfigError(f"'run.jobs' must be at least 1{_line_of(text, 'jobs')}")
    return RunConfig(scenario, gss, jobs, bool(run_s["trace"]), int(run_s["simulate_placement"]), doc)


def load(path, seed: int | None = None, jobs: int | None = None, step_seconds: float | None = None) -> RunConfig:
    """Read a configuration file, apply command-line overrides and build the run objects."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration: {exc.strerror}") from exc
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: JSON parse error: {exc.msg}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: configuration root must be a JSON object")
    document = copy.deepcopy(document)
    run = document.setdefault("run", {}) if isinstance(document.get("run", {}), dict) else document["run"]
    if isinstance(run, dict):
        if seed is not None:
            run["seed"] = seed
        if jobs is not None:
            run["jobs"] = jobs
        if step_seconds is not None:
            run["step_seconds"] = step_seconds
    try:
        return build(document, path.parent, text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
