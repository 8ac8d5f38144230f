"""Coordinated inverter control: a convex curtailment program solved every step.

The controller sees the linearised voltage model. Coordinated inverter ``c`` is
described by its curtailment ``P_c`` (kW, injected = available - curtailed) and
reactive output ``q_c`` (kvar, absorption only). Squared voltage magnitudes at
monitored buses are over-estimated by piecewise-linear chords of v^2 and kept
under the chord value at the controller ceiling, with a heavily penalised
slack so the program is always feasible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import AssemblyError, ParameterError
from .network import NetworkModel
from .qp import ConvexProgram, QuadraticConstraint, interior_point

V_BASE = 230.0
CURTAIL_SNAP_KW = 1e-4


@dataclass(frozen=True)
class PwlSegment:
    lo: float
    hi: float
    m: float
    c: float

    def __call__(self, v):
        return self.m * v + self.c


def pwl_square_coefficients(breakpoints) -> list[PwlSegment]:
    """Chords of v^2 between consecutive breakpoints."""
    bp = np.asarray(breakpoints, dtype=float)
    if bp.ndim != 1 or len(bp) < 2 or np.any(np.diff(bp) <= 0):
        raise ParameterError("breakpoints must be a strictly increasing sequence of at least two values")
    return [PwlSegment(float(lo), float(hi), float(lo + hi), float(-lo * hi)) for lo, hi in zip(bp[:-1], bp[1:])]


def chord_value(segments, v: float) -> float:
    """Piecewise-linear interpolant of v^2 (the max over all chords)."""
    return max(seg(v) for seg in segments)


@dataclass(frozen=True)
class CicSettings:
    v_cic: float = 255.85 / V_BASE
    v_trip: float = 257 / V_BASE
    big_m: float = 1e4
    q_min_pu: float = 0.44
    re_breakpoints: tuple = (207 / V_BASE, 253 / V_BASE, 265 / V_BASE)
    im_breakpoints: tuple = (0.0, 0.1, 0.2)
    symmetric_im: bool = True
    self_sufficiency: str = "penalty"  # penalty | reward
    tolerance: float = 1e-6
    max_iter: int = 200

    def __post_init__(self):
        if not self.v_cic < self.v_trip:
            raise ParameterError("v_cic must be below v_trip")
        if self.big_m <= 0:
            raise ParameterError("big_m must be positive")
        if self.self_sufficiency not in ("penalty", "reward"):
            raise ParameterError("self_sufficiency must be 'penalty' or 'reward'")
        if not (0 < self.q_min_pu < 1):
            raise ParameterError("q_min_pu must lie in (0, 1)")

    @cached_property
    def re_segments(self) -> list[PwlSegment]:
        return pwl_square_coefficients(self.re_breakpoints)

    @cached_property
    def im_segments(self) -> list[PwlSegment]:
        segs = pwl_square_coefficients(self.im_breakpoints)
        if self.symmetric_im and self.im_breakpoints[0] == 0.0:
            # mirror to negative imaginary parts: chord of v^2 over [-hi, -lo]
            segs = segs + [PwlSegment(-s.hi, -s.lo, -s.m, s.c) for s in segs]
        return segs

    @cached_property
    def bound(self) -> float:
        """Chord value of v_cic^2 on the real-part segments."""
        return chord_value(self.re_segments, self.v_cic)


@dataclass
class CicProblem:
    """One controller step.

    ``net_p``/``net_q`` are signed injections (kW/kvar) per non-slack bus, for
    everything except coordinated PV output. Coordinated inverters are listed by
    bus id with their available power, household demand and kVA rating.
    """

    network: NetworkModel
    net_p: np.ndarray
    net_q: np.ndarray
    coord_nodes: np.ndarray
    p_av: np.ndarray
    p_demand: np.ndarray
    s_rating: np.ndarray
    monitored: np.ndarray
    settings: CicSettings = field(default_factory=CicSettings)
    output_cap: float | None = None  # total injected kW ceiling
    output_target: float | None = None  # total injected kW equality

    def __post_init__(self):
        self.net_p = np.asarray(self.net_p, dtype=float)
        self.net_q = np.asarray(self.net_q, dtype=float)
        self.coord_nodes = np.asarray(self.coord_nodes, dtype=int).reshape(-1)
        nc = len(self.coord_nodes)
        self.p_av = np.broadcast_to(np.asarray(self.p_av, dtype=float), (nc,)).copy()
        self.p_demand = np.broadcast_to(np.asarray(self.p_demand, dtype=float), (nc,)).copy()
        self.s_rating = np.broadcast_to(np.asarray(self.s_rating, dtype=float), (nc,)).copy()
        self.monitored = np.asarray(self.monitored, dtype=int).reshape(-1)

    @property
    def n_coord(self) -> int:
        return len(self.coord_nodes)


@dataclass
class CicProgram:
    problem: CicProblem
    qp: ConvexProgram
    re0: np.ndarray  # affine voltage maps over all non-slack buses: re = re0 + re_x @ x
    re_x: np.ndarray
    im0: np.ndarray
    im_x: np.ndarray
    n_aux: int
    n_slack: int

    @property
    def nc(self) -> int:
        return self.problem.n_coord


@dataclass
class CicSolution:
    curtail: np.ndarray
    p_inj: np.ndarray
    q: np.ndarray
    v_re: np.ndarray
    v_im: np.ndarray
    phi: float
    rho: float
    kappa: float
    nu: float
    status: str
    iterations: int
    slack: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def objective(self) -> float:
        return self.phi + self.rho + self.kappa + self.nu

    @property
    def v_predicted(self) -> np.ndarray:
        return np.hypot(self.v_re, self.v_im)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "p_inj_kw": self.p_inj.tolist(),
            "q_kvar": self.q.tolist(),
            "curtail_kw": self.curtail.tolist(),
            "objective": {"phi": self.phi, "rho": self.rho, "kappa": self.kappa, "nu": self.nu},
            "v_predicted_pu": self.v_predicted.tolist(),
        }


def self_sufficiency_term(curtail, p_av, p_demand, big_m: float) -> float:
    """Reward for curtailment that stays within each household's export excess.

    Evaluates -sqrt(M) * sum(min(P_c, max(p_av - p_demand, 0))).
    """
    curtail, p_av, p_demand = (np.asarray(a, dtype=float) for a in (curtail, p_av, p_demand))
    if np.any(curtail < 0) or np.any(p_av < 0) or np.any(p_demand < 0):
        raise ParameterError("inputs must be non-negative")
    excess = np.maximum(p_av - p_demand, 0.0)
    return float(-math.sqrt(big_m) * np.sum(np.minimum(curtail, excess)))


def self_sufficiency_penalty(curtail, p_av, p_demand, big_m: float) -> float:
    """Penalty on curtailment that eats into local self-consumption.

    Evaluates sqrt(M) * sum(max(P_c - max(p_av - p_demand, 0), 0)).
    """
    curtail, p_av, p_demand = (np.asarray(a, dtype=float) for a in (curtail, p_av, p_demand))
    excess = np.maximum(p_av - p_demand, 0.0)
    return float(math.sqrt(big_m) * np.sum(np.maximum(curtail - excess, 0.0)))


def _validate(problem: CicProblem) -> None:
    net = problem.network
    n = len(net.non_slack)
    if problem.net_p.shape != (n,) or problem.net_q.shape != (n,):
        raise AssemblyError(f"net injections must have length {n}")
    nc = problem.n_coord
    for name in ("p_av", "p_demand", "s_rating"):
        if getattr(problem, name).shape != (nc,):
            raise AssemblyError(f"{name} must have one entry per coordinated inverter")
    if np.any(problem.p_av < 0) or np.any(problem.p_demand < 0) or np.any(problem.s_rating <= 0):
        raise AssemblyError("available power and demand must be non-negative and ratings positive")
    if np.any(problem.p_av > problem.s_rating):
        raise AssemblyError("available power exceeds the inverter rating")
    known = set(int(b) for b in net.non_slack)
    for b in list(problem.coord_nodes) + list(problem.monitored):
        if int(b) not in known:
            raise AssemblyError(f"bus {b} is not a non-slack bus of the network")
    if len(set(problem.coord_nodes.tolist())) != nc:
        raise AssemblyError("at most one coordinated inverter per bus")


def assemble(problem: CicProblem) -> CicProgram:
    """Build the convex program.

    Variable layout: ``[P (nc), q (nc), aux (nc), slack (nd)]``. ``aux`` carries
    the self-sufficiency term: in penalty mode it is the curtailment beyond the
    export excess, in reward mode the rewarded curtailment.
    """
    _validate(problem)
    st = problem.settings
    net = problem.network
    nc, nd = problem.n_coord, len(problem.monitored)
    nv = 3 * nc + nd
    base = net.base_kva
    r, x = net.r_pu, net.x_pu
    cpos = net.pos(problem.coord_nodes)
    dpos = net.pos(problem.monitored)

    p_net = problem.net_p / base
    q_net = problem.net_q / base
    p_net = p_net.copy()
    np.add.at(p_net, cpos, problem.p_av / base)
    re0 = 1.0 + r @ p_net + x @ q_net
    im0 = x @ p_net - r @ q_net
    nb = len(re0)
    re_x = np.zeros((nb, nv))
    im_x = np.zeros((nb, nv))
    re_x[:, :nc] = -r[:, cpos] / base
    re_x[:, nc : 2 * nc] = x[:, cpos] / base
    im_x[:, :nc] = -x[:, cpos] / base
    im_x[:, nc : 2 * nc] = -r[:, cpos] / base

    # objective: phi + rho + kappa + nu
    c = np.zeros(nv)
    c[:nc] = 1.0
    c[3 * nc :] = st.big_m
    sq = math.sqrt(st.big_m)
    c[2 * nc : 3 * nc] = sq if st.self_sufficiency == "penalty" else -sq

    frm, to, gl = net.line_arrays
    inc = np.zeros((len(frm), net.n_buses))
    inc[np.arange(len(frm)), frm] = 1.0
    inc[np.arange(len(frm)), to] = -1.0
    inc = inc[:, net.non_slack]  # slack voltage is the constant 1 + 0j
    slack_col = np.zeros(len(frm))
    slack_col[frm == net.slack_id] = 1.0
    slack_col[to == net.slack_id] = -1.0
    hmat = np.zeros((nv, nv))
    const = 0.0
    for v0, vx, vslack in ((re0, re_x, 1.0), (im0, im_x, 0.0)):
        d0 = inc @ v0 + slack_col * vslack
        dx = inc @ vx
        hmat += 2.0 * base * dx.T @ (gl[:, None] * dx)
        c += 2.0 * base * dx.T @ (gl * d0)
        const += base * d0 @ (gl * d0)

    # voltage rows: chord(Re) + chord(Im) - slack <= bound
    pairs = [(sr, si) for sr in st.re_segments for si in st.im_segments]
    mr = np.array([sr.m for sr, _ in pairs])
    mi = np.array([si.m for _, si in pairs])
    cc = np.array([sr.c + si.c for sr, si in pairs])
    npair = len(pairs)
    volt = (mr[None, :, None] * re_x[dpos][:, None, :] + mi[None, :, None] * im_x[dpos][:, None, :]).reshape(-1, nv)
    volt[np.arange(nd * npair), 3 * nc + np.repeat(np.arange(nd), npair)] -= 1.0
    volt_rhs = (st.bound - cc[None, :] - mr[None, :] * re0[dpos][:, None] - mi[None, :] * im0[dpos][:, None]).ravel()
    rows, rhs = list(volt), list(volt_rhs)

    excess = np.maximum(problem.p_av - problem.p_demand, 0.0)
    for i in range(nc):
        row = np.zeros(nv)
        if st.self_sufficiency == "penalty":
            row[i], row[2 * nc + i] = 1.0, -1.0  # P - w <= excess
            rows.append(row)
            rhs.append(excess[i])
        else:
            row[i], row[2 * nc + i] = -1.0, 1.0  # r <= P
            rows.append(row)
            rhs.append(0.0)
    if problem.output_cap is not None:
        row = np.zeros(nv)
        row[:nc] = -1.0  # sum(p_av - P) <= cap
        rows.append(row)
        rhs.append(problem.output_cap - problem.p_av.sum())

    a_eq = b_eq = None
    if problem.output_target is not None:
        a_eq = np.zeros((1, nv))
        a_eq[0, :nc] = -1.0
        b_eq = np.array([problem.output_target - problem.p_av.sum()])

    s = problem.s_rating
    lb = np.concatenate([np.zeros(nc), -st.q_min_pu * s, np.zeros(nc), np.zeros(nd)])
    ub = np.concatenate([problem.p_av, np.zeros(nc), np.full(nc, np.inf), np.full(nd, np.inf)])
    if st.self_sufficiency == "reward":
        lb[2 * nc : 3 * nc] = -np.inf
        ub[2 * nc : 3 * nc] = excess

    quad = []
    for i in range(nc):
        # ((p_av - P)^2 + q^2) / S^2 - 1 <= 0
        qm = np.zeros((nv, nv))
        qm[i, i] = qm[nc + i, nc + i] = 2.0 / s[i] ** 2
        g = np.zeros(nv)
        g[i] = -2.0 * problem.p_av[i] / s[i] ** 2
        quad.append(QuadraticConstraint(qm, g, problem.p_av[i] ** 2 / s[i] ** 2 - 1.0))

    qp = ConvexProgram(
        hmat,
        c,
        a_eq,
        b_eq,
        np.array(rows).reshape(-1, nv),
        np.array(rhs),
        lb,
        ub,
        quad,
        const,
    )
    return CicProgram(problem, qp, re0, re_x, im0, im_x, nc, nd)


def evaluate(program: CicProgram, curtail, q) -> dict:
    """Objective terms for given setpoints, with the slack and auxiliaries at their optimal values."""
    pr = program.problem
    st = pr.settings
    nc = program.nc
    x = np.zeros(program.qp.n)
    x[:nc], x[nc : 2 * nc] = curtail, q
    re = program.re0 + program.re_x @ x
    im = program.im0 + program.im_x @ x
    dpos = pr.network.pos(pr.monitored)
    z = np.array([chord_value(st.re_segments, re[d]) + chord_value(st.im_segments, im[d]) for d in dpos])
    slack = np.maximum(z - st.bound, 0.0)
    x[3 * nc :] = slack
    if st.self_sufficiency == "penalty":
        nu = self_sufficiency_penalty(curtail, pr.p_av, pr.p_demand, st.big_m)
    else:
        nu = self_sufficiency_term(curtail, pr.p_av, pr.p_demand, st.big_m)
    full = program.qp.objective(x)  # aux entries are zero here, so nu is excluded
    phi = float(np.sum(curtail))
    kappa = float(st.big_m * slack.sum())
    rho = full - phi - kappa
    return {"phi": phi, "rho": rho, "kappa": kappa, "nu": nu, "total": phi + rho + kappa + nu, "re": re, "im": im}


def solve(program: CicProgram, tolerance: float | None = None, max_iter: int | None = None) -> CicSolution:
    st = program.problem.settings
    res = interior_point(
        program.qp,
        tol=st.tolerance if tolerance is None else tolerance,
        max_iter=st.max_iter if max_iter is None else max_iter,
    )
    nc = program.nc
    pr = program.problem
    x = res.x.copy()
    # interior iterates stop just inside the bounds; sub-0.1 W curtailment is snapped to zero
    x[:nc] = np.where(x[:nc] < CURTAIL_SNAP_KW, 0.0, np.minimum(x[:nc], pr.p_av))
    curtail = x[:nc].copy()
    q = x[nc : 2 * nc]
    re = program.re0 + program.re_x @ x
    im = program.im0 + program.im_x @ x
    slack = x[3 * nc :]
    aux = x[2 * nc : 3 * nc]
    sq = math.sqrt(st.big_m)
    nu = float(sq * aux.sum()) if st.self_sufficiency == "penalty" else float(-sq * aux.sum())
    phi = float(x[:nc].sum())
    kappa = float(st.big_m * slack.sum())
    rho = float(program.qp.objective(x) - phi - kappa - nu)
    return CicSolution(curtail, pr.p_av - curtail, q, re, im, phi, rho, kappa, nu, res.status, res.iterations, slack)


def project_setpoints(p_inj, q, p_av, s_rating, q_min_pu: float = 0.44):
    """Clip setpoints onto the inverter limits: 0 <= p <= p_av, -q_min*S <= q <= 0, p^2 + q^2 <= S^2."""
    s_rating = np.asarray(s_rating, dtype=float)
    q = np.clip(np.asarray(q, dtype=float), -q_min_pu * s_rating, 0.0)
    p = np.clip(np.asarray(p_inj, dtype=float), 0.0, p_av)
    p = np.minimum(p, np.sqrt(np.maximum(s_rating**2 - q**2, 0.0)))
    return p, q


def fallback(problem: CicProblem) -> CicSolution:
    """Full curtailment with maximum reactive absorption, used when the program fails."""
    nc = problem.n_coord
    q = -problem.settings.q_min_pu * problem.s_rating
    net = problem.network
    extra_q = np.zeros(len(net.non_slack))
    np.add.at(extra_q, net.pos(problem.coord_nodes), q)
    p = problem.net_p / net.base_kva
    qq = (problem.net_q + extra_q) / net.base_kva
    re = 1.0 + net.r_pu @ p + net.x_pu @ qq
    im = net.x_pu @ p - net.r_pu @ qq
    return CicSolution(
        problem.p_av.copy(), np.zeros(nc), q, re, im, float(problem.p_av.sum()), 0.0, 0.0, 0.0, "fallback", 0
    )


def run_controller(problem: CicProblem) -> CicSolution:
    """Assemble, solve, fall back on infeasibility, then project onto the inverter limits."""
    sol = solve(assemble(problem))
    if sol.status == "infeasible":
        sol = fallback(problem)
    p, q = project_setpoints(sol.p_inj, sol.q, problem.p_av, problem.s_rating, problem.settings.q_min_pu)
    sol.p_inj, sol.q = p, q
    sol.curtail = problem.p_av - p
    return sol


def dump_solutions(path, records) -> None:
    """Write one JSON object per step: setpoints, objective terms, predicted and truth voltages."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
