"""Inverter output models, droop curves with low-pass filters, and trip/reconnect logic.

Voltages are per unit on the 230 V phase base; powers are kW / kvar; filter
time constants and steps are in minutes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ParameterError

V_BASE = 230.0


class InverterKind(str, Enum):
    LEGACY = "legacy"
    AUTONOMOUS = "autonomous"
    NON_EXPORTING = "non_exporting"
    COORDINATED = "coordinated"

    @property
    def passive(self) -> bool:
        return self is not InverterKind.COORDINATED


@dataclass(frozen=True)
class DroopSettings:
    """Voltage setpoints (pu) and filter constants; defaults are the Australian reference settings."""

    v_nom: float = 1.0
    v_db: float = 248 / V_BASE
    v_qmin: float = 253 / V_BASE
    v_trip: float = 257 / V_BASE
    v_max_l: float = 260 / V_BASE
    v_max_a: float = 265 / V_BASE
    q_min_pu: float = 0.44
    p_min_pu: float = 0.2
    tau_v: float = 1.5
    tau_w: float = 3.5

    def __post_init__(self):
        if not (self.v_db < self.v_qmin < self.v_trip < self.v_max_l < self.v_max_a):
            raise ParameterError("droop setpoints must satisfy v_db < v_qmin < v_trip < v_max_l < v_max_a")
        if not (0 < self.q_min_pu < 1) or not (0 <= self.p_min_pu < 1):
            raise ParameterError("q_min_pu must lie in (0,1) and p_min_pu in [0,1)")
        if self.tau_v <= 0 or self.tau_w <= 0:
            raise ParameterError("filter time constants must be positive")

    @classmethod
    def from_volts(cls, base: float = V_BASE, **volts) -> "DroopSettings":
        """Build from setpoints in volts (keys ``v_db``, ``v_qmin`` ...); other keys pass through."""
        kw = {k: (v / base if k.startswith("v_") else v) for k, v in volts.items()}
        return cls(**kw)

    def v_max(self, kind: InverterKind) -> float:
        return self.v_max_a if kind is InverterKind.AUTONOMOUS else self.v_max_l


@dataclass(frozen=True)
class InverterUnit:
    node: int
    kind: InverterKind
    s_rating: float = 6.0
    p_ac_max: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "kind", InverterKind(self.kind))
        if not (0 < self.p_ac_max <= self.s_rating):
            raise ParameterError("inverter AC limit must be positive and at most the kVA rating")


@dataclass
class InverterState:
    u: int = 1
    q_pu: float = 0.0
    p_pu: float = 1.0
    window: deque = field(default_factory=lambda: deque(maxlen=20))
    periods_offline: int = 0

    @classmethod
    def fresh(cls, window_len: int) -> "InverterState":
        return cls(window=deque(maxlen=window_len))

    def reset_droop(self) -> None:
        self.q_pu = 0.0
        self.p_pu = 1.0

    def rolling_average(self) -> float:
        return sum(self.window) / len(self.window) if self.window else 0.0


def window_length(step_seconds: float, horizon_seconds: float = 600.0) -> int:
    return max(1, math.ceil(horizon_seconds / step_seconds - 1e-9))


def volt_var_target(v: float, settings: DroopSettings) -> float:
    """Reactive setpoint (fraction of kVA, absorption negative) from the Volt/VAr curve."""
    if v <= settings.v_db:
        return 0.0
    if v >= settings.v_qmin:
        return -settings.q_min_pu
    slope = -settings.q_min_pu / (settings.v_qmin - settings.v_db)
    # point-slope through (v_qmin, -q_min_pu)
    return slope * (v - settings.v_qmin) - settings.q_min_pu


def volt_watt_target(v: float, settings: DroopSettings) -> float:
    """Active-power ceiling (fraction of available) from the Volt/Watt curve."""
    if v <= settings.v_qmin:
        return 1.0
    slope = (settings.p_min_pu - 1.0) / (settings.v_max_a - settings.v_qmin)
    return max(1.0 + slope * (v - settings.v_qmin), settings.p_min_pu)


def apply_filter(prev_pu: float, target_pu: float, dt_minutes: float, tau_minutes: float) -> float:
    if not (0 < dt_minutes <= tau_minutes):
        raise ParameterError(f"filter step {dt_minutes} min must lie in (0, tau={tau_minutes}]")
    a = dt_minutes / tau_minutes
    return (1.0 - a) * prev_pu + a * target_pu


def update_droop(state: InverterState, v: float, settings: DroopSettings, dt_minutes: float) -> None:
    """Move the filtered Volt/VAr and Volt/Watt setpoints toward the targets for local voltage ``v``.

    Reactive priority: the Volt/Watt target leaves 1.0 only once ``v`` has
    passed ``v_qmin``, where the reactive target is already saturated.
    """
    q_target = volt_var_target(v, settings)
    p_target = volt_watt_target(v, settings) if v > settings.v_qmin else 1.0
    state.q_pu = apply_filter(state.q_pu, q_target, dt_minutes, settings.tau_v)
    state.p_pu = apply_filter(state.p_pu, p_target, dt_minutes, settings.tau_w)


def autonomous_output(state: InverterState, p_av: float, unit: InverterUnit) -> tuple[float, float]:
    if p_av < 0:
        raise ParameterError("available power must be non-negative")
    if not state.u:
        return 0.0, 0.0
    s = unit.s_rating
    q = s * state.q_pu
    p = min(math.sqrt(max(s * s - q * q, 0.0)), p_av * state.p_pu)
    return p, q


def legacy_output(state: InverterState, p_av: float) -> tuple[float, float]:
    if p_av < 0:
        raise ParameterError("available power must be non-negative")
    return (p_av if state.u else 0.0), 0.0


def non_exporting_output(state: InverterState, p_av: float, p_demand: float) -> tuple[float, float]:
    if p_av < 0 or p_demand < 0:
        raise ParameterError("available power and demand must be non-negative")
    return (min(p_av, p_demand) if state.u else 0.0), 0.0


def weighted_choice(weights, rng: np.random.Generator) -> int:
    """Index drawn with probability proportional to ``weights`` by inverting the cumulative sum."""
    cum = np.cumsum(np.asarray(weights, dtype=float))
    if cum.size == 0 or not cum[-1] > 0:
        raise ParameterError("weights must contain a positive entry")
    r = rng.random() * cum[-1]
    return int(min(np.searchsorted(cum, r, side="right"), cum.size - 1))


def trip_weights(averages, v_max) -> np.ndarray:
    gap = np.maximum(np.asarray(v_max, dtype=float) - np.asarray(averages, dtype=float), 1e-9)
    return gap**-2.0


def reconnect_weights(voltages, v_nom: float = 1.0) -> np.ndarray:
    gap = np.maximum(np.abs(np.asarray(voltages, dtype=float) - v_nom), 1e-9)
    return gap**-2.0


@dataclass
class TripEvents:
    instant: list = field(default_factory=list)
    average: int | None = None

    @property
    def all(self) -> list:
        return self.instant + ([self.average] if self.average is not None else [])


def trip_step(units, states, voltages, settings: DroopSettings, rng: np.random.Generator) -> TripEvents:
    """Protection pass over the passive fleet.

    ``voltages[i]`` is the local voltage magnitude seen by ``units[i]``. The sample
    is appended to every passive inverter's 10-minute window first. Online
    inverters above their instantaneous limit disconnect unconditionally; among
    the remaining online inverters whose window average exceeds ``v_trip`` at
    most one is disconnected, drawn with weight ``(v_max - avg)^-2``.
    """
    events = TripEvents()
    candidates, cand_avg, cand_vmax = [], [], []
    for i, (unit, state, v) in enumerate(zip(units, states, voltages)):
        if not unit.kind.passive:
            continue
        state.window.append(float(v))
        if not state.u:
            continue
        v_max = settings.v_max(unit.kind)
        if v > v_max:
            events.instant.append(i)
            continue
        avg = state.rolling_average()
        if avg > settings.v_trip:
            candidates.append(i)
            cand_avg.append(avg)
            cand_vmax.append(v_max)
    if candidates:
        events.average = candidates[weighted_choice(trip_weights(cand_avg, cand_vmax), rng)]
    for i in events.all:
        states[i].u = 0
        states[i].periods_offline = 0
    return events


def reconnect_step(units, states, voltages, settings: DroopSettings, min_offline_periods: int, rng) -> int | None:
    """Reconnect at most one passive inverter that has waited long enough and sees ``v < v_trip``.

    The choice is weighted by ``(v - v_nom)^-2``. Inverters still offline afterwards
    have their offline counter advanced by one period.
    """
    eligible, volts = [], []
    for i, (unit, state, v) in enumerate(zip(units, states, voltages)):
        if unit.kind.passive and not state.u and state.periods_offline >= min_offline_periods and v < settings.v_trip:
            eligible.append(i)
            volts.append(v)
    chosen = None
    if eligible:
        chosen = eligible[weighted_choice(reconnect_weights(volts, settings.v_nom), rng)]
        states[chosen].u = 1
        states[chosen].periods_offline = 0
        states[chosen].reset_droop()
    for unit, state in zip(units, states):
        if unit.kind.passive and not state.u:
            state.periods_offline += 1
    return chosen
