import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import chain, random_radial
from pvfeeder.network import Bus, BusKind, Line, NetworkModel
from pvfeeder.powerflow import (
    InjectionSet,
    line_losses,
    linearized_voltages,
    power_mismatch,
    slack_injection,
    solve_ac,
)


def two_bus_closed_form(z: complex, s: complex) -> complex:
    """Bus-1 voltage of V1 = 1 + z conj(s / V1), solved as a quadratic in |V1|^2."""
    a = 1.0 + 2.0 * (z * np.conj(s)).real
    m2 = (a + np.sqrt(a * a - 4.0 * abs(z) ** 2 * abs(s) ** 2)) / 2.0
    # V = 1 + z conj(s) / conj(V)  ->  V conj(V) = conj(V) + z conj(s)
    vc = m2 - z * np.conj(s)  # = conj(V)
    return np.conj(vc)


def pu_two_bus(z_pu: complex):
    # base 230 V / 1 kVA; give the line in ohms so that it equals z_pu per unit
    zb = 230.0**2 / 1000.0
    return chain(1, z_pu.real * zb, z_pu.imag * zb)


def test_zero_injection_flat():
    net = random_radial(12, np.random.default_rng(0))
    sol = solve_ac(net, InjectionSet.zeros(net))
    assert sol.converged
    assert np.all(sol.v == 1.0)


def test_two_bus_closed_form():
    z = complex(0.012, 0.002)
    net = pu_two_bus(z)
    sol = solve_ac(net, InjectionSet(np.array([0.05]), np.array([0.0])))  # 0.05 pu = 0.05 kW on a 1 kVA base
    assert sol.converged and sol.residual < 1e-8
    assert abs(sol.v[0] - two_bus_closed_form(z, 0.05)) < 1e-9
    load = solve_ac(net, InjectionSet(np.array([-0.05]), np.array([0.0])))
    assert load.magnitude[0] < 1.0 < sol.magnitude[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 30), st.integers(0, 2**31))
def test_random_feeders_converge(n, seed):
    rng = np.random.default_rng(seed)
    net = random_radial(n, rng)
    inj = InjectionSet(rng.uniform(-3, 5, n - 1), rng.uniform(-1, 1, n - 1))
    sol = solve_ac(net, inj)
    assert sol.converged
    assert power_mismatch(net, sol.v, inj.complex_pu(net)) < 1e-8


def test_meshed_fallback_matches_mismatch():
    buses = [Bus(0, BusKind.SLACK, False)] + [Bus(k) for k in range(1, 4)]
    lines = [Line(0, 1, 0.1, 0.02), Line(1, 2, 0.1, 0.02), Line(2, 3, 0.1, 0.02), Line(3, 1, 0.2, 0.03)]
    net = NetworkModel(buses, lines)
    assert not net.is_radial
    inj = InjectionSet(np.array([2.0, 3.0, -1.0]), np.zeros(3))
    sol = solve_ac(net, inj)
    assert sol.converged and sol.residual < 1e-8


def test_linearized_trivial_cases():
    net = chain(4, 0.3, 0.05)
    re, im = linearized_voltages(net, InjectionSet.zeros(net))
    np.testing.assert_array_equal(re, 1.0)
    np.testing.assert_array_equal(im, 0.0)
    p = np.zeros(4)
    p[2] = 0.01  # 0.01 pu (kW) at the third non-slack bus
    re, im = linearized_voltages(net, InjectionSet(p, np.zeros(4)))
    np.testing.assert_allclose(re, 1.0 + net.r_pu[:, 2] * 0.01, rtol=1e-14)


def test_linearized_coordinated_terms_add():
    net = chain(3, 0.3, 0.05)
    base = InjectionSet(np.array([1.0, -2.0, 0.5]), np.array([0.1, 0.0, -0.3]))
    cp, cq = np.array([0.0, 3.0, 1.0]), np.array([0.0, -1.0, 0.0])
    a = linearized_voltages(net, base, cp, cq)
    b = linearized_voltages(net, InjectionSet(base.p + cp, base.q + cq))
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_linearized_close_to_ac_on_five_bus():
    rng = np.random.default_rng(5)
    net = random_radial(5, rng)
    for _ in range(20):
        s = rng.uniform(-0.02, 0.02, (2, 4))
        inj = InjectionSet(s[0], s[1])
        re, im = linearized_voltages(net, inj)
        ac = solve_ac(net, inj).v
        assert np.max(np.abs(re + 1j * im - ac)) < 0.005


def test_losses_flat_zero_and_ohmic():
    net = chain(1, 0.6, 0.1)
    assert line_losses(net, np.ones(1, dtype=complex)) == 0.0
    sol = solve_ac(net, InjectionSet(np.array([3.0]), np.array([0.5])))
    i_pu = (sol.v[0] - 1.0) / (complex(0.6, 0.1) / net.z_base)
    expected = abs(i_pu) ** 2 * 0.6 / net.z_base * net.base_kva
    assert line_losses(net, sol) == pytest.approx(expected, rel=1e-10)
    # energy balance: slack import + injections = losses
    assert (slack_injection(net, sol).real + 3.0) == pytest.approx(expected, abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 15), st.integers(0, 2**31))
def test_losses_non_negative(n, seed):
    rng = np.random.default_rng(seed)
    net = random_radial(n, rng)
    sol = solve_ac(net, InjectionSet(rng.uniform(-4, 4, n - 1), rng.uniform(-1, 1, n - 1)))
    assert line_losses(net, sol) >= 0.0


def test_sum_formula_nonzero_on_flat_profile():
    net = chain(2)
    assert line_losses(net, np.ones(2, dtype=complex), formula="sum_form") > 0
    with pytest.raises(ValueError):
        line_losses(net, np.ones(2, dtype=complex), formula="nope")
