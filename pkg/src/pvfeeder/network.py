"""Feeder topology, admittance assembly and the reduced impedance matrices.

Line parameters are stored in ohms. The power-flow and optimisation code work
in per-unit on a phase-voltage base (default 230 V) and a power base (default
1 kVA, so that 1 pu of power equals 1 kW).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ParameterError, TopologyError


class BusKind(str, Enum):
    SLACK = "slack"
    LOAD = "load"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind = BusKind.LOAD
    has_load: bool = True


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    resistance: float
    reactance: float

    def __post_init__(self):
        if not (self.resistance > 0 and self.reactance > 0):
            raise ParameterError(
                f"line {self.from_bus}-{self.to_bus}: resistance and reactance must be "
                f"positive, got r={self.resistance}, x={self.reactance}"
            )
        if self.from_bus == self.to_bus:
            raise ParameterError(f"line connects bus {self.from_bus} to itself")

    @property
    def impedance(self) -> complex:
        return complex(self.resistance, self.reactance)


def _check_buses(buses) -> int:
    ids = [b.id for b in buses]
    if sorted(ids) != list(range(len(ids))):
        raise ParameterError("bus ids must be contiguous 0..N")
    slacks = [b.id for b in buses if b.kind == BusKind.SLACK]
    if len(slacks) != 1:
        raise TopologyError(f"exactly one slack bus required, found {len(slacks)}")
    return slacks[0]


def _check_connected(n_buses: int, lines, root: int) -> None:
    adj = [[] for _ in range(n_buses)]
    for ln in lines:
        if not (0 <= ln.from_bus < n_buses and 0 <= ln.to_bus < n_buses):
            raise TopologyError(f"line {ln.from_bus}-{ln.to_bus} references an unknown bus")
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen = {root}
    queue = deque([root])
    while queue:
        k = queue.popleft()
        for j in adj[k]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    if len(seen) != n_buses:
        missing = sorted(set(range(n_buses)) - seen)
        raise TopologyError(f"network is disconnected; unreachable buses {missing[:10]}")


def build_admittance(buses, lines) -> np.ndarray:
    """Nodal admittance matrix in siemens, indexed by bus id."""
    buses = list(buses)
    lines = list(lines)
    slack = _check_buses(buses)
    for ln in lines:
        if abs(complex(ln.resistance, ln.reactance)) == 0.0:
            raise ParameterError(f"line {ln.from_bus}-{ln.to_bus} has zero impedance")
    _check_connected(len(buses), lines, slack)
    n = len(buses)
    y = np.zeros((n, n), dtype=complex)
    for ln in lines:
        y_line = 1.0 / complex(ln.resistance, ln.reactance)
        i, j = ln.from_bus, ln.to_bus
        y[i, i] += y_line
        y[j, j] += y_line
        y[i, j] -= y_line
        y[j, i] -= y_line
    return y


def _reduced_inverse(admittance: np.ndarray, slack: int) -> np.ndarray:
    keep = [k for k in range(admittance.shape[0]) if k != slack]
    y_red = admittance[np.ix_(keep, keep)]
    try:
        z = np.linalg.solve(y_red, np.eye(len(keep)))
    except np.linalg.LinAlgError as exc:
        raise TopologyError("slack-reduced admittance matrix is singular") from exc
    if not np.all(np.isfinite(z)):
        raise TopologyError("slack-reduced admittance matrix is singular")
    # symmetrise away round-off; Z is symmetric for reciprocal networks
    return 0.5 * (z + z.T)


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Immutable feeder model.

    ``admittance`` is indexed by bus id and expressed in siemens. ``r_matrix`` and
    ``x_matrix`` are in ohms and indexed by position in :attr:`non_slack`.
    """

    buses: tuple
    lines: tuple
    base_voltage: float = 230.0
    base_power: float = 1000.0
    admittance: np.ndarray = field(init=False, repr=False)
    r_matrix: np.ndarray = field(init=False, repr=False)
    x_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        if self.base_voltage <= 0 or self.base_power <= 0:
            raise ParameterError("base voltage and base power must be positive")
        y = build_admittance(self.buses, self.lines)
        z = _reduced_inverse(y, self.slack_id)
        for arr in (y, z):
            arr.setflags(write=False)
        r, x = z.real.copy(), z.imag.copy()
        r.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "admittance", y)
        object.__setattr__(self, "r_matrix", r)
        object.__setattr__(self, "x_matrix", x)

    @cached_property
    def slack_id(self) -> int:
        return _check_buses(self.buses)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @cached_property
    def non_slack(self) -> np.ndarray:
        ids = np.array([b.id for b in self.buses if b.kind != BusKind.SLACK], dtype=int)
        ids.setflags(write=False)
        return ids

    @cached_property
    def position(self) -> dict:
        """Map bus id -> row of the reduced matrices."""
        return {int(b): k for k, b in enumerate(self.non_slack)}

    @cached_property
    def load_buses(self) -> np.ndarray:
        ids = np.array([b.id for b in self.buses if b.has_load and b.kind != BusKind.SLACK], dtype=int)
        ids.setflags(write=False)
        return ids

    @property
    def z_base(self) -> float:
        return self.base_voltage**2 / self.base_power

    @property
    def base_kva(self) -> float:
        return self.base_power / 1000.0

    @cached_property
    def y_pu(self) -> np.ndarray:
        return self.admittance * self.z_base

    @cached_property
    def r_pu(self) -> np.ndarray:
        return self.r_matrix / self.z_base

    @cached_property
    def x_pu(self) -> np.ndarray:
        return self.x_matrix / self.z_base

    @cached_property
    def electric_distance(self) -> np.ndarray:
        """Resistance from the slack bus to each non-slack bus (ohms)."""
        return np.diag(self.r_matrix).copy()

    @cached_property
    def line_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(from ids, to ids, series conductance in pu) for every line."""
        frm = np.array([ln.from_bus for ln in self.lines], dtype=int)
        to = np.array([ln.to_bus for ln in self.lines], dtype=int)
        z = np.array([ln.impedance for ln in self.lines]) / self.z_base
        return frm, to, (1.0 / z).real

    @cached_property
    def is_radial(self) -> bool:
        return len(self.lines) == self.n_buses - 1

    @cached_property
    def tree(self) -> "RadialTree":
        if not self.is_radial:
            raise TopologyError("network is not radial")
        return RadialTree.from_network(self)

    def pos(self, bus_ids) -> np.ndarray:
        return np.array([self.position[int(b)] for b in np.atleast_1d(bus_ids)], dtype=int)


@dataclass(frozen=True)
class RadialTree:
    """Parent pointers and subtree incidence for a radial network.

    ``subtree[i, j]`` is 1 when reduced bus ``j`` lies in the subtree rooted at
    reduced bus ``i`` (inclusive), so branch currents are ``subtree @ nodal``.
    ``branch_z_pu[i]`` is the impedance of the line feeding reduced bus ``i``.
    """

    parent: np.ndarray
    branch_z_pu: np.ndarray
    subtree: np.ndarray

    @classmethod
    def from_network(cls, net: NetworkModel) -> "RadialTree":
        n = net.n_buses
        adj = [[] for _ in range(n)]
        for ln in net.lines:
            adj[ln.from_bus].append((ln.to_bus, ln.impedance))
            adj[ln.to_bus].append((ln.from_bus, ln.impedance))
        parent_bus = np.full(n, -1)
        z_feed = np.zeros(n, dtype=complex)
        order = [net.slack_id]
        seen = {net.slack_id}
        queue = deque([net.slack_id])
        while queue:
            k = queue.popleft()
            for j, z in adj[k]:
                if j not in seen:
                    seen.add(j)
                    parent_bus[j] = k
                    z_feed[j] = z
                    order.append(j)
                    queue.append(j)
        pos = net.position
        m = len(net.non_slack)
        parent = np.array(
            [-1 if parent_bus[b] == net.slack_id else pos[int(parent_bus[b])] for b in net.non_slack]
        )
        branch_z = np.array([z_feed[b] for b in net.non_slack]) / net.z_base
        subtree = np.eye(m)
        # walk buses from the leaves up, adding each subtree to its parent
        for b in reversed(order[1:]):
            k = pos[b]
            if parent[k] >= 0:
                subtree[parent[k]] += subtree[k]
        return cls(parent=parent, branch_z_pu=branch_z, subtree=subtree)


def reduce_and_invert(network: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of the inverse of the slack-reduced admittance matrix."""
    z = _reduced_inverse(network.admittance, network.slack_id)
    return z.real, z.imag


@dataclass(frozen=True)
class FeederSpec:
    """Recipe for a synthetic radial LV feeder.

    A backbone chain leaves the slack bus and ``n_laterals`` chains branch off it
    at random backbone buses. Every segment has resistance drawn around
    ``segment_length_m * r_ohm_per_km`` and reactance ``r / rx_ratio``.
    """

    n_nodes: int
    seed: int = 0
    n_laterals: int = 3
    backbone_fraction: float = 0.5
    segment_length_m: float = 30.0
    length_jitter: float = 0.3
    r_ohm_per_km: float = 0.641
    rx_ratio: float = 6.0
    n_households: int | None = None
    base_voltage: float = 230.0
    base_power: float = 1000.0


def generate_synthetic_feeder(spec: FeederSpec) -> NetworkModel:
    if spec.n_nodes < 2:
        raise ParameterError("a feeder needs at least 2 nodes")
    if not (0 < spec.backbone_fraction <= 1) or spec.rx_ratio <= 0 or spec.r_ohm_per_km <= 0:
        raise ParameterError("invalid feeder spec")
    if not (0 <= spec.length_jitter < 1):
        raise ParameterError("length_jitter must lie in [0, 1)")
    rng = np.random.default_rng(spec.seed)
    n_rest = spec.n_nodes - 1
    n_backbone = max(1, int(round(n_rest * spec.backbone_fraction)))
    n_lateral_nodes = n_rest - n_backbone
    n_lat = min(spec.n_laterals, n_lateral_nodes)

    parents = {}
    for k in range(1, n_backbone + 1):
        parents[k] = k - 1
    next_id = n_backbone + 1
    if n_lat > 0:
        sizes = 1 + rng.multinomial(n_lateral_nodes - n_lat, np.full(n_lat, 1.0 / n_lat))
        taps = rng.integers(1, n_backbone + 1, size=n_lat)
        for size, tap in zip(sizes, taps):
            prev = int(tap)
            for _ in range(size):
                parents[next_id] = prev
                prev = next_id
                next_id += 1

    lengths = spec.segment_length_m * rng.uniform(
        1 - spec.length_jitter, 1 + spec.length_jitter, size=n_rest
    )
    lines = []
    for k, length in zip(range(1, spec.n_nodes), lengths):
        r = spec.r_ohm_per_km * length / 1000.0
        lines.append(Line(parents[k], k, r, r / spec.rx_ratio))

    n_hh = n_rest if spec.n_households is None else spec.n_households
    if not (0 <= n_hh <= n_rest):
        raise ParameterError("n_households must lie in [0, n_nodes - 1]")
    with_load = set(range(1, spec.n_nodes))
    if n_hh < n_rest:
        with_load = set(int(b) for b in rng.choice(np.arange(1, spec.n_nodes), size=n_hh, replace=False))
    buses = [Bus(0, BusKind.SLACK, False)] + [
        Bus(k, BusKind.LOAD, k in with_load) for k in range(1, spec.n_nodes)
    ]
    return NetworkModel(buses, lines, spec.base_voltage, spec.base_power)


def scale_feeder(network: NetworkModel, factor: float) -> NetworkModel:
    """Multiply every line impedance by ``factor`` (uniform feeder lengthening)."""
    if not factor > 0:
        raise ParameterError(f"scale factor must be positive, got {factor}")
    lines = [Line(ln.from_bus, ln.to_bus, ln.resistance * factor, ln.reactance * factor) for ln in network.lines]
    return NetworkModel(network.buses, lines, network.base_voltage, network.base_power)


def network_to_dict(network: NetworkModel) -> dict:
    return {
        "buses": [{"id": b.id, "kind": b.kind.value, "has_load": b.has_load} for b in network.buses],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "r_ohm": ln.resistance, "x_ohm": ln.reactance}
            for ln in network.lines
        ],
        "slack_id": network.slack_id,
        "base_voltage_v": network.base_voltage,
        "base_power_va": network.base_power,
    }


def network_from_dict(data: dict) -> NetworkModel:
    try:
        slack_id = int(data["slack_id"])
        buses = []
        for b in data["buses"]:
            bid = int(b["id"])
            kind = BusKind.SLACK if bid == slack_id else BusKind(b.get("kind", "load"))
            buses.append(Bus(bid, kind, bool(b.get("has_load", kind != BusKind.SLACK))))
        lines = [Line(int(ln["from"]), int(ln["to"]), float(ln["r_ohm"]), float(ln["x_ohm"])) for ln in data["lines"]]
        base_v = float(data.get("base_voltage_v", 230.0))
        base_p = float(data.get("base_power_va", 1000.0))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParameterError):
            raise
        raise ParameterError(f"malformed network description: {exc!r}") from exc
    if sum(b.kind == BusKind.SLACK for b in buses) != 1:
        raise TopologyError("network file must mark exactly one slack bus (slack_id)")
    return NetworkModel(buses, lines, base_v, base_p)


def load_network(path) -> NetworkModel:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def save_network(network: NetworkModel, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(network), indent=2))


def desk_feeder(n_nodes: int = 20, seed: int = 0, impedance_scale: float = 2.5) -> NetworkModel:
    """Small reference feeder used by the examples and tests.

    The default 20-node instance is the synthetic feeder lengthened 2.5 times,
    which puts a 30% passive fleet at the far end of the feeder near the trip
    threshold on a clear summer day while winter days stay below it.
    """
    return scale_feeder(generate_synthetic_feeder(FeederSpec(n_nodes, seed=seed)), impedance_scale)
