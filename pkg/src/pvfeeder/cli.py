"""Batch command-line entry point.

    pvfeeder simulate CONFIG OUT_DIR   one placement, every growth kind and penetration, with traces
    pvfeeder sweep    CONFIG OUT_DIR   the full penetration x placement grid plus per-figure CSVs
    pvfeeder gss      CONFIG OUT_DIR   grid-support response sweep

Results go to ``OUT_DIR/<config hash>/``. Exit status is 0 on success, 1 on a
runtime failure and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from collections import defaultdict
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import config as cfg
from .errors import ConfigError
from .gss import response_sweep, write_response_csv
from .network import network_to_dict
from .scenario import KINDS, PASSIVE_KINDS, run_scenario

CELL_COLUMNS = ("growth_kind", "penetration", "placement")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return v


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__, "pvfeeder": pkg}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(run_dir: Path, run: cfg.RunConfig, command: str, config_path: Path, outputs) -> None:
    doc = run.document
    manifest = {
        "command": command,
        "config_hash": run.hash,
        "seeds": {
            "run": doc["run"]["seed"],
            "profiles": doc["profiles"]["seed"],
            "placement": doc["fleet"]["placement_seed"],
            "network": doc["network"]["seed"],
        },
        "versions": _versions(),
        "config": doc,
        "outputs": sorted(outputs),
    }
    # external inputs are embedded or fingerprinted so the manifest alone reproduces the run
    if doc["network"]["kind"] == "file":
        manifest["network"] = network_to_dict(run.scenario.network)
    if doc["profiles"]["ami_csv"]:
        manifest["ami_csv_sha256"] = _sha256(config_path.parent / doc["profiles"]["ami_csv"])
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_metrics(path: Path, results) -> None:
    results = sorted(results, key=lambda r: (r.cell.growth_kind, r.cell.penetration, r.cell.placement))
    metric_cols = list(results[0].report.row()) if results else []
    rows = [
        [r.cell.growth_kind, r.cell.penetration, r.cell.placement] + [r.report.row()[k] for k in metric_cols]
        for r in results
    ]
    _write_csv(path, list(CELL_COLUMNS) + metric_cols, rows)


def _grouped(results):
    groups = defaultdict(list)
    for r in results:
        groups[(r.cell.growth_kind, r.cell.penetration)].append(r.report.row())
    return sorted(groups.items())


def _stats(rows, key):
    vals = np.array([r[key] for r in rows], dtype=float)
    return [vals.min(), vals.mean(), vals.max()]


def write_figure_csvs(run_dir: Path, results) -> list[str]:
    """Aggregate cell metrics over placements into one file per figure."""
    groups = _grouped(results)
    written = []

    def emit(name, header, rows):
        _write_csv(run_dir / name, header, rows)
        written.append(name)

    def mmm(key):
        return [f"{key}_min", f"{key}_mean", f"{key}_max"]

    head = ["growth_kind", "penetration", "n_placements"]
    emit(
        "max_voltage_vs_penetration.csv",
        head + mmm("max_voltage_v"),
        [[k, p, len(rows)] + _stats(rows, "max_voltage_v") for (k, p), rows in groups],
    )
    emit(
        "overvoltage_vs_penetration.csv",
        head + mmm("customers_overvoltage") + mmm("overvoltage_duration_min"),
        [
            [k, p, len(rows)] + _stats(rows, "customers_overvoltage") + _stats(rows, "overvoltage_duration_min")
            for (k, p), rows in groups
        ],
    )
    disc = [f"disconnections_per_inverter_{k}" for k in PASSIVE_KINDS]
    curt = [f"curtailment_kwh_{k}" for k in KINDS]
    emit(
        "disconnections_curtailment_by_kind.csv",
        head + [f"{c}_mean" for c in disc + curt],
        [[k, p, len(rows)] + [_stats(rows, c)[1] for c in disc + curt] for (k, p), rows in groups],
    )
    emit(
        "reactive_demand_utilization.csv",
        head + mmm("head_reactive_demand_kvarh") + mmm("pv_utilization"),
        [
            [k, p, len(rows)] + _stats(rows, "head_reactive_demand_kvarh") + _stats(rows, "pv_utilization")
            for (k, p), rows in groups
        ],
    )
    return written


def write_traces(run_dir: Path, results) -> list[str]:
    tdir = run_dir / "traces"
    tdir.mkdir(exist_ok=True)
    names = []
    for r in results:
        c = r.cell
        name = f"traces/{c.growth_kind}_p{round(c.penetration * 100):03d}_pl{c.placement:03d}.jsonl"
        with open(run_dir / name, "w") as fh:
            for rec in r.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        names.append(name)
    return names


def _prepare(config_path, out_dir, args) -> tuple[cfg.RunConfig, Path]:
    run = cfg.load(config_path, seed=args.seed, jobs=args.jobs, step_seconds=args.step_seconds)
    run_dir = Path(out_dir) / run.hash
    run_dir.mkdir(parents=True, exist_ok=True)
    return run, run_dir


def cmd_simulate(config_path, out_dir, args) -> int:
    run, run_dir = _prepare(config_path, out_dir, args)
    sc = run.scenario
    placement = run.simulate_placement
    if not 0 <= placement < sc.n_placements:
        raise ConfigError(f"'run.simulate_placement' must lie in [0, {sc.n_placements})")
    results = run_scenario(sc, placements=[placement], jobs=run.jobs, trace=run.trace)
    write_metrics(run_dir / "metrics.csv", results)
    outputs = ["metrics.csv"] + (write_traces(run_dir, results) if run.trace else [])
    write_manifest(run_dir, run, "simulate", Path(config_path), outputs)
    print(run_dir)
    return 0


def cmd_sweep(config_path, out_dir, args) -> int:
    run, run_dir = _prepare(config_path, out_dir, args)
    results = run_scenario(run.scenario, jobs=run.jobs)
    write_metrics(run_dir / "metrics.csv", results)
    outputs = ["metrics.csv"] + write_figure_csvs(run_dir, results)
    write_manifest(run_dir, run, "sweep", Path(config_path), outputs)
    print(run_dir)
    return 0


def cmd_gss(config_path, out_dir, args) -> int:
    run, run_dir = _prepare(config_path, out_dir, args)
    rows = response_sweep(run.scenario, run.gss, seed=run.scenario.seed)
    write_response_csv(rows, run_dir / "gss_response.csv")
    write_manifest(run_dir, run, "gss", Path(config_path), ["gss_response.csv"])
    print(run_dir)
    return 0


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "gss": cmd_gss}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvfeeder", description="LV feeder PV hosting simulations.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "run one placement over all growth kinds and penetrations, with traces"),
        ("sweep", "run the full penetration x placement grid and emit figure data"),
        ("gss", "run the grid-support response sweep"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="JSON configuration file")
        p.add_argument("out_dir", help="output directory; results go to OUT_DIR/<config hash>/")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--jobs", type=int, default=None, help="maximum parallel scenario cells")
        p.add_argument("--step-seconds", type=float, default=None, help="override the simulation step")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args.config, args.out_dir, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
