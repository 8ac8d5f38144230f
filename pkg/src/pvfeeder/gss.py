"""Grid-support services from the coordinated fleet operated as a virtual power plant.

The aggregator runs the fleet below its maximum feasible output (reserve mode),
offers up- and down-regulation from that headroom, and on a request holds the
fleet total at the reference output plus or minus the requested amount. The
reaction of the autonomous inverters to the resulting voltage change is
measured, not compensated.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .cic import CicProblem, CicSolution, project_setpoints, run_controller
from .errors import ParameterError
from .scenario import (
    ScenarioConfig,
    Simulation,
    build_fleet,
    build_profiles,
    constant_profiles,
    placement_orderings,
)

CSV_COLUMNS = (
    "level",
    "direction",
    "request_kw",
    "offer_kw",
    "delivered_kw",
    "autonomous_offset_kw",
    "rate_per_unit",
)


class Direction(str, Enum):
    UR = "UR"
    DR = "DR"

    @property
    def sign(self) -> float:
        return 1.0 if self is Direction.UR else -1.0


@dataclass(frozen=True)
class GssSettings:
    gamma: float = 0.2
    levels: tuple = tuple(round(0.40 + 0.05 * k, 2) for k in range(13))
    n_requests: int = 320
    hold_s: float = 300.0
    warmup_s: float = 3600.0
    passive_penetration: float = 0.3
    coordinated_penetration: float = 0.3
    placement: int = 6  # index into the placement orderings (0 nearest cluster, -1 farthest)

    def __post_init__(self):
        if not (0 <= self.gamma < 1):
            raise ParameterError("gamma must lie in [0, 1)")
        if any(not (0 <= lv <= 1) for lv in self.levels) or not self.levels:
            raise ParameterError("output levels must lie in [0, 1]")
        if self.n_requests < 1 or self.hold_s <= 0 or self.warmup_s < 0:
            raise ParameterError("invalid request count, hold or warm-up duration")
        if not (0 < self.passive_penetration and 0 <= self.coordinated_penetration):
            raise ParameterError("penetrations must be positive")
        if self.passive_penetration + self.coordinated_penetration > 1 + 1e-12:
            raise ParameterError("passive plus coordinated penetration exceeds 1")


@dataclass
class GssRequest:
    direction: Direction
    magnitude: float  # kW
    issue_step: int = 0
    hold_steps: int = 10

    def __post_init__(self):
        self.direction = Direction(self.direction)
        if not self.magnitude >= 0:
            raise ParameterError("request magnitude must be non-negative")
        if self.hold_steps < 1:
            raise ParameterError("a request must be held for at least one step")


@dataclass
class GssOutcome:
    request: GssRequest
    status: str  # fulfilled | rejected
    reference_kw: float
    offer_kw: float
    delivered: list = field(default_factory=list)  # kW per held step
    autonomous_offset: list = field(default_factory=list)  # kW per held step
    autonomous_curtailment_before: float = 0.0
    per_inverter_gss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_feasible_kw: float | None = None

    @property
    def net_seen_by_operator(self) -> list:
        return [d + a for d, a in zip(self.delivered, self.autonomous_offset)]

    @property
    def rates(self) -> list:
        """Share of each step's delivery cancelled by the autonomous fleet."""
        return [(-a / d + 0.0 if d != 0 else 0.0) for d, a in zip(self.delivered, self.autonomous_offset)]


def reserve_setpoints(problem: CicProblem, gamma: float) -> tuple[CicSolution, float]:
    """Maximum-feasible setpoints derated to ``(1 - gamma)`` of their total and re-optimised.

    Returns the derated solution and the maximum feasible total (kW).
    """
    if not (0 <= gamma < 1):
        raise ParameterError("gamma must lie in [0, 1)")
    full = run_controller(problem)
    max_total = float(full.p_inj.sum())
    if gamma == 0 or problem.n_coord == 0:
        return full, max_total
    derated = run_controller(replace(problem, output_cap=(1.0 - gamma) * max_total))
    return derated, max_total


def offer_bounds(total_kw: float, gamma: float) -> tuple[float, float]:
    """Up- and down-regulation offers (kW) from the current injected total."""
    if total_kw < 0:
        raise ParameterError("injected total must be non-negative")
    return gamma * total_kw, (1.0 - gamma) * total_kw


def _rebalance(p, target, p_hi):
    """Shift ``p`` within ``[0, p_hi]`` so that it sums to ``target`` exactly when possible."""
    p = p.copy()
    for _ in range(4):
        gap = target - p.sum()
        if gap == 0:
            break
        room = (p_hi - p) if gap > 0 else p
        total = room.sum()
        if total <= 0:
            break
        p = np.clip(p + gap * room / total, 0.0, p_hi)
    return p


def dispatch_setpoints(problem: CicProblem, target_kw: float) -> CicSolution:
    """Re-optimised setpoints with the fleet total pinned to ``target_kw``."""
    sol = run_controller(replace(problem, output_target=float(target_kw)))
    st = problem.settings
    p_hi = np.minimum(problem.p_av, np.sqrt(np.maximum(problem.s_rating**2 - sol.q**2, 0.0)))
    p = _rebalance(sol.p_inj, float(target_kw), p_hi)
    p, q = project_setpoints(p, sol.q, problem.p_av, problem.s_rating, st.q_min_pu)
    sol.p_inj, sol.q, sol.curtail = p, q, problem.p_av - p
    return sol


def feasible_range(problem: CicProblem) -> tuple[float, float]:
    """Box-feasible range of the fleet total (kW), ignoring voltages."""
    return 0.0, float(np.minimum(problem.p_av, problem.s_rating).sum())


def dispatch(request: GssRequest, problem: CicProblem, reference_kw: float, offer_kw: float):
    """Check a request against its offer and the fleet limits, then solve for the new setpoints.

    Returns ``(solution or None, status, max_feasible_kw)``.
    """
    lo, hi = feasible_range(problem)
    target = reference_kw + request.direction.sign * request.magnitude
    room = (hi - reference_kw) if request.direction is Direction.UR else (reference_kw - lo)
    max_feasible = max(min(offer_kw, room), 0.0)
    if request.magnitude > offer_kw + 1e-12 or not (lo - 1e-9 <= target <= hi + 1e-9):
        return None, "rejected", max_feasible
    return dispatch_setpoints(problem, min(max(target, lo), hi)), "fulfilled", max_feasible


def measure_autonomous_response(p_before, p_after) -> float:
    """Signed change of the autonomous fleet's total output (kW)."""
    p_before, p_after = np.asarray(p_before, dtype=float), np.asarray(p_after, dtype=float)
    if p_before.shape != p_after.shape:
        raise ParameterError("before and after outputs must describe the same fleet")
    return float(np.sum(p_after - p_before))


@dataclass
class GssRow:
    level: float
    direction: str
    request_kw: float
    offer_kw: float
    delivered_kw: float
    autonomous_offset_kw: float
    rate_per_unit: float
    outcome: GssOutcome | None = None

    def values(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


def request_plan(n_requests: int, n_levels: int) -> list[list[int]]:
    """Requests per (level, direction) pair; the total is split as evenly as possible."""
    pairs = n_levels * 2
    base, extra = divmod(n_requests, pairs)
    counts = [base + (1 if k < extra else 0) for k in range(pairs)]
    return [counts[2 * i : 2 * i + 2] for i in range(n_levels)]


def _reserve_controller(gamma):
    def controller(problem, state):
        return reserve_setpoints(problem, gamma)[0]

    return controller


def _dispatch_controller(target):
    def controller(problem, state):
        return dispatch_setpoints(problem, target)

    return controller


def gss_simulation(config: ScenarioConfig, settings: GssSettings, level: float, seed: int, n_steps: int):
    orderings = placement_orderings(config.network, config.households, config.n_placements, config.placement_seed)
    placement = settings.placement % len(orderings)
    cfg = replace(config, base_penetration=settings.passive_penetration)
    units = build_fleet(
        cfg,
        orderings[placement],
        placement,
        settings.passive_penetration + settings.coordinated_penetration,
        "coordinated",
    )
    demand = build_profiles(config).demand.mean(axis=0)
    profiles = constant_profiles(config, demand, level * config.p_ac_max, n_steps)
    return Simulation(cfg, units, profiles, (seed, int(round(level * 1000)), 0x475353))


def run_request(sim: Simulation, state, request: GssRequest, gamma: float) -> GssOutcome:
    """Issue ``request`` on a copy of ``state`` and hold it, measuring every step against the truth model."""
    state = copy.deepcopy(state)
    coord = sim.coord_idx
    auto = sim.masks["autonomous"]
    ref = float(state.p_unit[coord].sum())
    auto_before = state.p_unit[auto].copy()
    p_av = float(sim.profiles.pv[min(state.t, sim.profiles.n_steps - 1)])
    curtail_before = float(np.sum(p_av - auto_before))
    ur, dr = offer_bounds(ref, gamma)
    offer = ur if request.direction is Direction.UR else dr
    outcome = GssOutcome(request, "rejected", ref, offer, autonomous_curtailment_before=curtail_before)
    # feasibility pre-check on the step the request is issued
    probe = _probe_problem(sim, state)
    _, status, max_feasible = dispatch(request, probe, ref, offer)
    outcome.max_feasible_kw = max_feasible
    if status != "fulfilled":
        return outcome
    target = ref + request.direction.sign * request.magnitude
    p_ref = state.p_unit[coord].copy()
    controller = _dispatch_controller(target)
    for _ in range(request.hold_steps):
        state, rec = sim.step(state, controller)
        outcome.delivered.append(float(rec.p_unit[coord].sum()) - ref)
        outcome.autonomous_offset.append(measure_autonomous_response(auto_before, rec.p_unit[auto]))
    outcome.per_inverter_gss = state.p_unit[coord] - p_ref
    outcome.status = "fulfilled"
    return outcome


def _probe_problem(sim: Simulation, state) -> CicProblem:
    t = min(state.t, sim.profiles.n_steps - 1)
    return CicProblem(
        sim.net,
        state.ami_p,
        state.ami_q,
        sim.monitored_coord_nodes,
        float(sim.profiles.pv[t]),
        state.ami_demand_coord,
        sim.s_rating[sim.coord_idx],
        sim.monitored,
        sim.config.cic,
    )


def response_sweep(config: ScenarioConfig, settings: GssSettings | None = None, seed: int = 0) -> list[GssRow]:
    """Offer, delivery and autonomous offset for a grid of requests at each PV output level.

    Load is held at each household's daytime mean and PV at ``level`` of the
    inverter AC limit. Each level is first run in reserve mode for the warm-up
    period so the droop filters settle; every request then starts from a copy of
    that settled state. Magnitudes are evenly spaced fractions of the offer.
    """
    settings = settings or GssSettings()
    step = config.sim_step
    hold = max(1, math.ceil(settings.hold_s / step - 1e-9))
    warm = max(1, math.ceil(settings.warmup_s / step - 1e-9))
    rows = []
    plan = request_plan(settings.n_requests, len(settings.levels))
    for level, counts in zip(settings.levels, plan):
        sim = gss_simulation(config, settings, level, seed, warm + hold + 1)
        state = sim.initial_state()
        reserve = _reserve_controller(settings.gamma)
        for _ in range(warm):
            state, _rec = sim.step(state, reserve)
        ref = float(state.p_unit[sim.coord_idx].sum())
        offers = offer_bounds(ref, settings.gamma)
        for direction, k, offer in zip((Direction.UR, Direction.DR), counts, offers):
            for i in range(k):
                req = GssRequest(direction, offer * (i + 1) / k, state.t, hold)
                out = run_request(sim, state, req, settings.gamma)
                if out.status == "fulfilled":
                    d, a = out.delivered[-1], out.autonomous_offset[-1]
                    rate = out.rates[-1]
                else:
                    d = a = rate = float("nan")
                rows.append(GssRow(level, direction.value, req.magnitude, offer, d, a, rate, out))
    return rows


def write_response_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()])


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return v
