"""AC power flow (truth model) and the linearised voltage model.

Injections are signed: positive means power flowing into the grid from the bus.
Arrays are aligned with ``network.non_slack``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .network import NetworkModel


@dataclass
class InjectionSet:
    p: np.ndarray  # kW
    q: np.ndarray  # kvar

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.p.shape != self.q.shape:
            raise ParameterError("p and q must have the same shape")

    @classmethod
    def zeros(cls, network: NetworkModel) -> "InjectionSet":
        n = len(network.non_slack)
        return cls(np.zeros(n), np.zeros(n))

    def complex_pu(self, network: NetworkModel) -> np.ndarray:
        if self.p.shape != (len(network.non_slack),):
            raise ParameterError(
                f"injection length {self.p.shape} does not match {len(network.non_slack)} non-slack buses"
            )
        return (self.p + 1j * self.q) / network.base_kva


@dataclass
class VoltageSolution:
    v: np.ndarray  # complex pu, non-slack order
    converged: bool
    iterations: int
    residual: float

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.v)


def full_voltage(network: NetworkModel, v: np.ndarray, v_slack: complex = 1.0) -> np.ndarray:
    """Voltage vector indexed by bus id, with the slack bus filled in."""
    out = np.empty(network.n_buses, dtype=complex)
    out[network.slack_id] = v_slack
    out[network.non_slack] = v
    return out


def power_mismatch(network: NetworkModel, v: np.ndarray, s_pu: np.ndarray) -> float:
    vf = full_voltage(network, v)
    s_calc = vf * np.conj(network.y_pu @ vf)
    return float(np.max(np.abs(s_calc[network.non_slack] - s_pu), initial=0.0))


def solve_ac(
    network: NetworkModel,
    injections: InjectionSet,
    tolerance: float = 1e-8,
    max_iter: int = 100,
    v0: np.ndarray | None = None,
) -> VoltageSolution:
    """Fixed-slack AC power flow.

    Radial feeders are solved with a backward-forward sweep; meshed networks fall
    back to the equivalent implicit Z-bus iteration. Non-convergence is reported
    through ``converged=False`` rather than raised.
    """
    if tolerance <= 0:
        raise ParameterError("tolerance must be positive")
    s = injections.complex_pu(network)
    n = len(s)
    v = np.ones(n, dtype=complex) if v0 is None else np.array(v0, dtype=complex)
    if network.is_radial:
        tree = network.tree
        subtree, z_branch = tree.subtree, tree.branch_z_pu

        def sweep(v):
            branch_current = subtree @ np.conj(s / v)  # backward: accumulate subtree currents
            return 1.0 + subtree.T @ (z_branch * branch_current)  # forward: add drops from the slack out

    else:
        z = network.r_pu + 1j * network.x_pu

        def sweep(v):
            return 1.0 + z @ np.conj(s / v)

    residual = power_mismatch(network, v, s)
    it = 0
    with np.errstate(all="ignore"):
        while residual >= tolerance and it < max_iter:
            v = sweep(v)
            it += 1
            if not np.all(np.isfinite(v)):
                return VoltageSolution(v, False, it, float("inf"))
            residual = power_mismatch(network, v, s)
    return VoltageSolution(v, bool(residual < tolerance), it, residual)


def linearized_voltages(
    network: NetworkModel,
    net_injections: InjectionSet,
    coordinated_p: np.ndarray | None = None,
    coordinated_q: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary voltage parts from the reduced impedance sensitivities.

    Re{V} = 1 + R p + X q and Im{V} = X p - R q with every injection (net demand
    and coordinated output alike) counted positive into the grid.
    """
    s = net_injections.complex_pu(network)
    p, q = s.real.copy(), s.imag.copy()
    for extra, target in ((coordinated_p, p), (coordinated_q, q)):
        if extra is not None:
            extra = np.asarray(extra, dtype=float)
            if extra.shape != target.shape:
                raise ParameterError("coordinated injection length does not match the network")
            target += extra / network.base_kva
    r, x = network.r_pu, network.x_pu
    return 1.0 + r @ p + x @ q, x @ p - r @ q


def line_losses(network: NetworkModel, voltages, formula: str = "difference") -> float:
    """Total active line losses in kW.

    ``formula="difference"`` is the Joule loss sum of g*|Vm - Vn|^2.
    ``formula="sum_form"`` evaluates g*|Vm + Vn|^2 instead, kept only for
    fidelity comparisons; it does not vanish on a flat profile.
    """
    v = voltages.v if isinstance(voltages, VoltageSolution) else np.asarray(voltages)
    vf = full_voltage(network, v)
    sign = {"difference": -1.0, "sum_form": 1.0}.get(formula)
    if sign is None:
        raise ParameterError(f"unknown loss formula {formula!r}")
    frm, to, g = network.line_arrays
    return float(g @ np.abs(vf[frm] + sign * vf[to]) ** 2) * network.base_kva


def slack_injection(network: NetworkModel, voltages) -> complex:
    """Complex power (kW + j kvar) drawn from the slack bus into the feeder."""
    v = voltages.v if isinstance(voltages, VoltageSolution) else np.asarray(voltages)
    vf = full_voltage(network, v)
    k = network.slack_id
    return complex(vf[k] * np.conj(network.y_pu[k] @ vf)) * network.base_kva
