"""Quasi-static daytime simulation of a PV fleet on a LV feeder, and penetration sweeps."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .cic import CicProblem, CicSettings, CicSolution, run_controller
from .errors import ParameterError, PowerFlowError
from .inverters import (
    DroopSettings,
    InverterKind,
    InverterState,
    InverterUnit,
    autonomous_output,
    legacy_output,
    non_exporting_output,
    reconnect_step,
    trip_step,
    update_droop,
    window_length,
)
from .network import NetworkModel
from .powerflow import InjectionSet, line_losses, slack_injection, solve_ac
from .profiles import DayProfileSpec, allocate_households, reactive_demand, synth_load_day, synth_pv_day

KINDS = tuple(k.value for k in InverterKind)
PASSIVE_KINDS = ("legacy", "autonomous", "non_exporting")


@dataclass(frozen=True)
class ScenarioConfig:
    network: NetworkModel
    profile: DayProfileSpec = field(default_factory=DayProfileSpec.summer)
    droop: DroopSettings = field(default_factory=DroopSettings)
    cic: CicSettings = field(default_factory=CicSettings)
    base_penetration: float = 0.3
    base_mix: tuple = (("legacy", 0.5), ("autonomous", 0.5))
    growth_kinds: tuple = ("autonomous", "non_exporting", "coordinated")
    penetration_steps: tuple = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    n_placements: int = 40
    placement_seed: int = 0
    seed: int = 0
    profile_seed: int = 0
    sim_step: float = 30.0
    s_rating: float = 6.0
    p_ac_max: float = 5.0
    power_factor: float = 0.95
    leading_pf: bool = True
    overvoltage_v: float = 257.0
    min_offline_s: float = 120.0
    trip_window_s: float = 600.0
    ami_profiles: dict | None = None  # household id -> TimeSeries, replaces synthetic demand

    def __post_init__(self):
        object.__setattr__(self, "base_mix", tuple((str(k), float(v)) for k, v in dict(self.base_mix).items()))
        object.__setattr__(self, "penetration_steps", tuple(float(p) for p in self.penetration_steps))
        object.__setattr__(self, "growth_kinds", tuple(self.growth_kinds))
        for p in (self.base_penetration,) + self.penetration_steps:
            if not (0 < p <= 1):
                raise ParameterError(f"penetration {p} must lie in (0, 1]")
        mix = dict(self.base_mix)
        if abs(sum(mix.values()) - 1.0) > 1e-9 or any(v < 0 for v in mix.values()):
            raise ParameterError("base mix fractions must be non-negative and sum to 1")
        if not set(mix) <= set(PASSIVE_KINDS):
            raise ParameterError("base mix may only contain passive inverter kinds")
        for k in self.growth_kinds:
            InverterKind(k)
        if self.n_placements < 1:
            raise ParameterError("n_placements must be at least 1")
        if not (0 < self.sim_step / 60 <= min(self.droop.tau_v, self.droop.tau_w)):
            raise ParameterError("simulation step must be positive and no longer than the droop filter constants")
        if not 0 < self.p_ac_max <= self.s_rating:
            raise ParameterError("p_ac_max must lie in (0, s_rating]")

    @property
    def min_offline_periods(self) -> int:
        return max(1, math.ceil(self.min_offline_s / self.sim_step - 1e-9))

    @property
    def households(self) -> np.ndarray:
        return np.asarray(self.network.load_buses)


@dataclass
class Profiles:
    """Demand per non-slack bus (kW, consumption) and available PV per unit (kW)."""

    times: list
    demand: np.ndarray  # (T, n_non_slack)
    pv: np.ndarray  # (T,)

    def __post_init__(self):
        if self.demand.shape[0] != len(self.pv):
            raise ParameterError("demand and PV series must have the same length")

    @property
    def n_steps(self) -> int:
        return len(self.pv)


def build_profiles(config: ScenarioConfig) -> Profiles:
    net = config.network
    spec, step = config.profile, config.sim_step
    if config.ami_profiles:
        series = [config.ami_profiles[k] for k in sorted(config.ami_profiles)]
    else:
        series = [synth_load_day(spec, i, config.profile_seed, step) for i in range(30)]
    pv = synth_pv_day(spec, step=step)
    n = len(pv)
    alloc = allocate_households(series, config.households)
    demand = np.zeros((n, len(net.non_slack)))
    for node, ts in alloc.items():
        if len(ts) < n:
            raise ParameterError("household demand series is shorter than the PV day")
        demand[:, net.position[node]] = ts.values[:n]
    return Profiles(pv.times(), demand, np.minimum(pv.values, config.p_ac_max))


def constant_profiles(config: ScenarioConfig, demand_row: np.ndarray, pv_kw: float, n_steps: int) -> Profiles:
    demand = np.tile(np.asarray(demand_row, dtype=float), (n_steps, 1))
    return Profiles(list(range(n_steps)), demand, np.full(n_steps, min(pv_kw, config.p_ac_max)))


def placement_orderings(network: NetworkModel, households, n: int, seed: int) -> list[np.ndarray]:
    """One node ordering per placement.

    Ordering 0 sorts by electric distance from the transformer (nearest first),
    the last ordering is the reverse, and the rest are seeded random
    permutations. Placement sets are prefixes of an ordering, so higher
    penetrations always contain the lower ones.
    """
    households = np.asarray(households, dtype=int)
    dist = network.electric_distance[network.pos(households)]
    near = households[np.lexsort((households, dist))]
    if n == 1:
        return [near]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x504C]))
    middle = [rng.permutation(households) for _ in range(n - 2)]
    return [near] + middle + [near[::-1].copy()]


def n_systems(penetration: float, n_households: int) -> int:
    k = int(math.floor(penetration * n_households + 0.5))
    if k < 1:
        raise ParameterError("penetration times households must be at least 1")
    return k


def sample_placements(network: NetworkModel, penetration: float, n: int, seed: int, households=None) -> list:
    households = network.load_buses if households is None else households
    k = n_systems(penetration, len(households))
    return [np.sort(o[:k]) for o in placement_orderings(network, households, n, seed)]


def base_kinds(config: ScenarioConfig, ordering: np.ndarray, placement: int) -> dict:
    """Kind of each base-case system, assigned by a seeded shuffle of the base mix."""
    nb = n_systems(config.base_penetration, len(ordering))
    base = ordering[:nb]
    counts, left = [], nb
    mix = list(config.base_mix)
    for i, (kind, frac) in enumerate(mix):
        c = left if i == len(mix) - 1 else int(math.floor(frac * nb + 0.5))
        c = min(c, left)
        counts.append((kind, c))
        left -= c
    labels = [k for k, c in counts for _ in range(c)]
    rng = np.random.default_rng(np.random.SeedSequence([config.placement_seed, placement, 0x4D4958]))
    labels = [labels[i] for i in rng.permutation(nb)]
    return {int(node): kind for node, kind in zip(base, labels)}


def build_fleet(config: ScenarioConfig, ordering, placement: int, penetration: float, growth_kind: str) -> list:
    kinds = base_kinds(config, ordering, placement)
    k = n_systems(penetration, len(ordering))
    for node in ordering[len(kinds) : k]:
        kinds[int(node)] = growth_kind
    return [InverterUnit(node, InverterKind(kind), config.s_rating, config.p_ac_max) for node, kind in sorted(kinds.items())]


@dataclass
class SimState:
    t: int
    v: np.ndarray  # complex pu, non-slack order, from the latest power flow
    states: list
    rng: np.random.Generator
    ami_p: np.ndarray  # non-coordinated injection snapshot (kW) from the previous step
    ami_q: np.ndarray
    ami_demand_coord: np.ndarray
    p_unit: np.ndarray
    q_unit: np.ndarray


@dataclass
class StepRecord:
    t: int
    v: np.ndarray  # |V| pu per non-slack bus
    p_unit: np.ndarray
    q_unit: np.ndarray
    p_av: float
    demand: np.ndarray
    losses_kw: float
    slack_kva: complex
    instant_trips: list
    average_trip: int | None
    reconnect: int | None
    cic: CicSolution | None = None
    online: int = 0  # connected units after this step's trips and reconnection


Controller = Callable[[CicProblem, SimState], CicSolution]


def default_controller(problem: CicProblem, state: SimState) -> CicSolution:
    return run_controller(problem)


class Simulation:
    """Per-step pipeline for one fleet on one feeder.

    Each step reads the profiles, moves the droop filters using the previous
    step's voltages, asks the controller for coordinated setpoints using the
    previous step's metering snapshot, solves the AC power flow and finally
    applies the protection logic, whose effect shows in the next step.
    """

    def __init__(self, config: ScenarioConfig, units, profiles: Profiles, seed_key=(0,)):
        self.config = config
        self.net = config.network
        self.units = list(units)
        self.profiles = profiles
        self.seed_key = tuple(int(s) for s in seed_key)
        pos = self.net.position
        self.unit_pos = np.array([pos[u.node] for u in self.units], dtype=int)
        kinds = np.array([u.kind.value for u in self.units])
        self.masks = {k: kinds == k for k in KINDS}
        self.coord_idx = np.flatnonzero(self.masks["coordinated"])
        self.s_rating = np.array([u.s_rating for u in self.units])
        self.monitored = np.array(sorted(u.node for u in self.units), dtype=int)
        self.dt_min = config.sim_step / 60.0
        self.window = window_length(config.sim_step, config.trip_window_s)
        self.min_off = config.min_offline_periods

    def _load_q(self, demand):
        return reactive_demand(demand, self.config.power_factor, self.config.leading_pf)

    def initial_state(self) -> SimState:
        n = len(self.net.non_slack)
        d0 = self.profiles.demand[0]
        return SimState(
            t=0,
            v=np.ones(n, dtype=complex),
            states=[InverterState.fresh(self.window) for _ in self.units],
            rng=np.random.default_rng(np.random.SeedSequence(list(self.seed_key))),
            ami_p=-d0.copy(),
            ami_q=-self._load_q(d0),
            ami_demand_coord=d0[self.unit_pos[self.coord_idx]].copy(),
            p_unit=np.zeros(len(self.units)),
            q_unit=np.zeros(len(self.units)),
        )

    def step(self, state: SimState, controller: Controller | None = None) -> tuple[SimState, StepRecord]:
        t = state.t
        if t >= self.profiles.n_steps:
            raise ParameterError("simulation ran past the end of the profiles")
        net = self.net
        demand = self.profiles.demand[t]
        p_av = float(self.profiles.pv[t])
        v_prev = np.abs(state.v)[self.unit_pos]
        droop = self.config.droop

        p_unit = np.zeros(len(self.units))
        q_unit = np.zeros(len(self.units))
        for i, (unit, st) in enumerate(zip(self.units, state.states)):
            kind = unit.kind
            if kind is InverterKind.AUTONOMOUS:
                update_droop(st, v_prev[i], droop, self.dt_min)
                p_unit[i], q_unit[i] = autonomous_output(st, p_av, unit)
            elif kind is InverterKind.LEGACY:
                p_unit[i], q_unit[i] = legacy_output(st, p_av)
            elif kind is InverterKind.NON_EXPORTING:
                p_unit[i], q_unit[i] = non_exporting_output(st, p_av, demand[self.unit_pos[i]])

        sol = None
        if len(self.coord_idx):
            problem = CicProblem(
                net,
                state.ami_p,
                state.ami_q,
                self.monitored_coord_nodes,
                p_av,
                state.ami_demand_coord,
                self.s_rating[self.coord_idx],
                self.monitored,
                self.config.cic,
            )
            sol = (controller or default_controller)(problem, state)
            p_unit[self.coord_idx] = sol.p_inj
            q_unit[self.coord_idx] = sol.q

        p = -demand.copy()
        q = -self._load_q(demand)
        np.add.at(p, self.unit_pos, p_unit)
        np.add.at(q, self.unit_pos, q_unit)
        pf = solve_ac(net, InjectionSet(p, q), v0=state.v)
        if not pf.converged:
            raise PowerFlowError(f"power flow failed at step {t} (residual {pf.residual:.3g})")
        vm = pf.magnitude
        v_units = vm[self.unit_pos]
        events = trip_step(self.units, state.states, v_units, droop, state.rng)
        back = reconnect_step(self.units, state.states, v_units, droop, self.min_off, state.rng)

        coord_p = np.zeros_like(p)
        coord_q = np.zeros_like(q)
        np.add.at(coord_p, self.unit_pos[self.coord_idx], p_unit[self.coord_idx])
        np.add.at(coord_q, self.unit_pos[self.coord_idx], q_unit[self.coord_idx])
        state.ami_p = p - coord_p
        state.ami_q = q - coord_q
        state.ami_demand_coord = demand[self.unit_pos[self.coord_idx]].copy()
        state.v = pf.v
        state.p_unit, state.q_unit = p_unit, q_unit
        state.t = t + 1
        record = StepRecord(
            t,
            vm,
            p_unit,
            q_unit,
            p_av,
            demand,
            line_losses(net, pf.v),
            slack_injection(net, pf.v),
            events.instant,
            events.average,
            back,
            sol,
            int(sum(st.u for st in state.states)),
        )
        return state, record

    @property
    def monitored_coord_nodes(self) -> np.ndarray:
        return np.array([self.units[i].node for i in self.coord_idx], dtype=int)


@dataclass
class MetricsReport:
    customers_overvoltage: int
    customers_overvoltage_pv: int
    customers_overvoltage_non_pv: int
    overvoltage_duration: float  # minutes
    max_voltage: float  # V
    max_step_voltage_delta: float  # V
    max_voltage_spread: float  # V
    pv_utilization: float
    disconnections_per_inverter_by_kind: dict
    curtailment_by_kind: dict  # kWh
    total_line_losses: float  # kWh
    head_reactive_demand: float  # kvarh
    total_export: float  # kWh, net export at the feeder head
    customer_export: float  # kWh, summed over customer meters
    cic_fallbacks: int = 0

    def row(self) -> dict:
        out = {
            "customers_overvoltage": self.customers_overvoltage,
            "customers_overvoltage_pv": self.customers_overvoltage_pv,
            "customers_overvoltage_non_pv": self.customers_overvoltage_non_pv,
            "overvoltage_duration_min": self.overvoltage_duration,
            "max_voltage_v": self.max_voltage,
            "max_step_voltage_delta_v": self.max_step_voltage_delta,
            "max_voltage_spread_v": self.max_voltage_spread,
            "pv_utilization": self.pv_utilization,
        }
        for k in PASSIVE_KINDS:
            out[f"disconnections_per_inverter_{k}"] = self.disconnections_per_inverter_by_kind.get(k, 0.0)
        for k in KINDS:
            out[f"curtailment_kwh_{k}"] = self.curtailment_by_kind.get(k, 0.0)
        out["total_line_losses_kwh"] = self.total_line_losses
        out["head_reactive_demand_kvarh"] = self.head_reactive_demand
        out["total_export_kwh"] = self.total_export
        out["customer_export_kwh"] = self.customer_export
        out["cic_fallbacks"] = self.cic_fallbacks
        return out


class MetricsRecorder:
    def __init__(self, sim: Simulation, overvoltage_v: float):
        self.sim = sim
        net = sim.net
        self.base_v = net.base_voltage
        self.cust = net.pos(net.load_buses)
        pv_nodes = {u.node for u in sim.units}
        self.cust_pv = np.array([int(b) in pv_nodes for b in net.load_buses], dtype=bool)
        self.thr = overvoltage_v / self.base_v
        self.hours = sim.config.sim_step / 3600.0
        self.over = np.zeros(len(self.cust), dtype=bool)
        self.n_over_steps = 0
        self.max_v = 0.0
        self.max_delta = 0.0
        self.max_spread = 0.0
        self.prev = None
        self.used = 0.0
        self.available = 0.0
        self.trips = {k: 0 for k in KINDS}
        self.curtail = {k: 0.0 for k in KINDS}
        self.losses = 0.0
        self.reactive = 0.0
        self.export = 0.0
        self.cust_export = 0.0
        self.fallbacks = 0

    def add(self, rec: StepRecord) -> None:
        sim = self.sim
        vc = rec.v[self.cust]
        if len(vc):
            above = vc > self.thr
            self.over |= above
            self.n_over_steps += int(above.any())
            self.max_v = max(self.max_v, float(vc.max()))
            self.max_spread = max(self.max_spread, float(vc.max() - vc.min()))
            if self.prev is not None:
                self.max_delta = max(self.max_delta, float(np.max(np.abs(vc - self.prev))))
            self.prev = vc
        pv_out = float(rec.p_unit.sum())
        load = float(rec.demand.sum())
        export = max(-rec.slack_kva.real, 0.0)
        self.used += (min(pv_out, load) + export) * self.hours
        self.available += rec.p_av * len(sim.units) * self.hours
        self.export += export * self.hours
        self.cust_export += float(np.sum(np.maximum(rec.p_unit - rec.demand[sim.unit_pos], 0.0))) * self.hours
        self.losses += rec.losses_kw * self.hours
        self.reactive += max(rec.slack_kva.imag, 0.0) * self.hours
        for i in rec.instant_trips + ([rec.average_trip] if rec.average_trip is not None else []):
            self.trips[sim.units[i].kind.value] += 1
        for k, mask in sim.masks.items():
            if mask.any():
                self.curtail[k] += float(np.sum(rec.p_av - rec.p_unit[mask])) * self.hours
        if rec.cic is not None and rec.cic.status == "fallback":
            self.fallbacks += 1

    def report(self) -> MetricsReport:
        counts = {k: int(m.sum()) for k, m in self.sim.masks.items()}
        disc = {k: (self.trips[k] / counts[k] if counts[k] else 0.0) for k in PASSIVE_KINDS}
        return MetricsReport(
            customers_overvoltage=int(self.over.sum()),
            customers_overvoltage_pv=int((self.over & self.cust_pv).sum()),
            customers_overvoltage_non_pv=int((self.over & ~self.cust_pv).sum()),
            overvoltage_duration=self.n_over_steps * self.sim.config.sim_step / 60.0,
            max_voltage=self.max_v * self.base_v,
            max_step_voltage_delta=self.max_delta * self.base_v,
            max_voltage_spread=self.max_spread * self.base_v,
            pv_utilization=(self.used / self.available) if self.available > 0 else 1.0,
            disconnections_per_inverter_by_kind=disc,
            curtailment_by_kind={k: max(v, 0.0) for k, v in self.curtail.items()},
            total_line_losses=self.losses,
            head_reactive_demand=self.reactive,
            total_export=self.export,
            customer_export=self.cust_export,
            cic_fallbacks=self.fallbacks,
        )


def trace_record(sim: Simulation, rec: StepRecord) -> dict:
    base = sim.net.base_voltage
    out = {
        "t": rec.t,
        "v_max_v": float(rec.v.max() * base),
        "v_min_v": float(rec.v.min() * base),
        "pv_available_kw": rec.p_av,
        "pv_injected_kw": float(rec.p_unit.sum()),
        "online": rec.online,
        "instant_trips": [sim.units[i].node for i in rec.instant_trips],
        "average_trip": None if rec.average_trip is None else sim.units[rec.average_trip].node,
        "reconnect": None if rec.reconnect is None else sim.units[rec.reconnect].node,
        "losses_kw": rec.losses_kw,
    }
    if rec.cic is not None:
        cic = rec.cic.to_dict()
        mon = sim.net.pos(sim.monitored)
        cic["v_predicted_pu"] = [float(v) for v in rec.cic.v_predicted[mon]]
        cic["v_truth_pu"] = [float(v) for v in rec.v[mon]]
        cic["monitored"] = [int(b) for b in sim.monitored]
        out["cic"] = cic
    return out


def run_day(sim: Simulation, controller: Controller | None = None, trace: bool = False, on_step=None):
    """Simulate every step of the profiles; return the metrics and optional per-step trace."""
    state = sim.initial_state()
    recorder = MetricsRecorder(sim, sim.config.overvoltage_v)
    records = []
    for _ in range(sim.profiles.n_steps):
        state, rec = sim.step(state, controller)
        recorder.add(rec)
        if on_step is not None:
            on_step(rec)
        if trace:
            records.append(trace_record(sim, rec))
    return recorder.report(), records


@dataclass(frozen=True)
class Cell:
    growth_kind: str
    penetration: float
    placement: int


@dataclass
class CellResult:
    cell: Cell
    report: MetricsReport
    trace: list = field(default_factory=list)


def cells(config: ScenarioConfig, placements=None) -> list[Cell]:
    placements = range(config.n_placements) if placements is None else placements
    return [
        Cell(kind, pen, int(pl))
        for kind in config.growth_kinds
        for pen in config.penetration_steps
        for pl in placements
    ]


def cell_simulation(config: ScenarioConfig, cell: Cell, profiles: Profiles | None = None, orderings=None) -> Simulation:
    if orderings is None:
        orderings = placement_orderings(config.network, config.households, config.n_placements, config.placement_seed)
    units = build_fleet(config, orderings[cell.placement], cell.placement, cell.penetration, cell.growth_kind)
    profiles = build_profiles(config) if profiles is None else profiles
    # common random numbers: the trip stream depends on placement and penetration only
    key = (config.seed, cell.placement, int(round(cell.penetration * 1000)))
    return Simulation(config, units, profiles, key)


def _fleet_signature(config, cell, orderings):
    units = build_fleet(config, orderings[cell.placement], cell.placement, cell.penetration, cell.growth_kind)
    return (cell.placement, cell.penetration, tuple((u.node, u.kind.value) for u in units))


def _run_cell(args) -> CellResult:
    config, cell, trace = args
    report, records = run_day(cell_simulation(config, cell), trace=trace)
    return CellResult(cell, report, records)


def run_scenario(config: ScenarioConfig, placements=None, jobs: int = 1, trace: bool = False) -> list[CellResult]:
    """Run every (growth kind, penetration, placement) cell; identical fleets are simulated once."""
    todo = cells(config, placements)
    orderings = placement_orderings(config.network, config.households, config.n_placements, config.placement_seed)
    unique, index = {}, []
    for c in todo:
        sig = _fleet_signature(config, c, orderings)
        if sig not in unique:
            unique[sig] = c
        index.append(sig)
    keys = list(unique)
    payload = [(config, unique[k], trace) for k in keys]
    if jobs > 1 and len(payload) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, payload))
    else:
        results = [_run_cell(p) for p in payload]
    by_sig = dict(zip(keys, results))
    return [CellResult(c, by_sig[sig].report, by_sig[sig].trace) for c, sig in zip(todo, index)]


def with_step(config: ScenarioConfig, step: float) -> ScenarioConfig:
    return replace(config, sim_step=float(step))
