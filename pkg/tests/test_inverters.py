import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvfeeder.errors import ParameterError
from pvfeeder.inverters import (
    DroopSettings,
    InverterKind,
    InverterState,
    InverterUnit,
    apply_filter,
    autonomous_output,
    legacy_output,
    non_exporting_output,
    reconnect_step,
    reconnect_weights,
    trip_step,
    trip_weights,
    update_droop,
    volt_var_target,
    volt_watt_target,
    weighted_choice,
    window_length,
)

S = DroopSettings()
V = 230.0


def test_volt_var_points():
    assert volt_var_target(248 / V, S) == 0.0
    assert abs(volt_var_target(253 / V, S) - (-0.44)) <= 1e-12
    assert volt_var_target(250.5 / V, S) == pytest.approx(-0.22, abs=1e-12)
    assert volt_var_target(270 / V, S) == -0.44


def test_volt_watt_points():
    assert volt_watt_target(253 / V, S) == 1.0
    assert abs(volt_watt_target(265 / V, S) - 0.2) <= 1e-12
    assert volt_watt_target(259 / V, S) == pytest.approx(0.6, abs=1e-12)
    assert volt_watt_target(280 / V, S) == 0.2


@given(st.floats(200 / V, 280 / V), st.floats(200 / V, 280 / V))
def test_droop_curves_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert volt_var_target(hi, S) <= volt_var_target(lo, S)
    assert volt_watt_target(hi, S) <= volt_watt_target(lo, S)
    assert -S.q_min_pu <= volt_var_target(lo, S) <= 0
    assert S.p_min_pu <= volt_watt_target(lo, S) <= 1


def test_settings_validation_and_volts():
    assert DroopSettings.from_volts(v_db=248, v_qmin=253, v_trip=257, v_max_l=260, v_max_a=265) == S
    with pytest.raises(ParameterError):
        DroopSettings(v_db=254 / V)
    assert S.v_max(InverterKind.AUTONOMOUS) == S.v_max_a
    assert S.v_max(InverterKind.LEGACY) == S.v_max_l


def test_filter_examples():
    assert apply_filter(0.3, 0.3, 0.5, 1.5) == 0.3
    assert apply_filter(0.0, 1.0, 0.5, 1.5) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(ParameterError):
        apply_filter(0.0, 1.0, 2.0, 1.5)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 1.5))
def test_filter_converges_monotonically(prev, target, dt):
    gaps = []
    x = prev
    for _ in range(30):
        x = apply_filter(x, target, dt, 1.5)
        gaps.append(abs(x - target))
    assert all(b <= a + 1e-15 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] <= abs(prev - target) * (1 - dt / 1.5) ** 30 + 1e-12


def test_reactive_priority_in_update():
    st_ = InverterState()
    update_droop(st_, 252 / V, S, 0.5)
    assert st_.p_pu == 1.0 and st_.q_pu < 0


def test_output_models():
    unit = InverterUnit(1, InverterKind.AUTONOMOUS)
    assert autonomous_output(InverterState(u=0), 5.0, unit) == (0.0, 0.0)
    assert autonomous_output(InverterState(), 5.0, unit) == (5.0, 0.0)
    p, q = autonomous_output(InverterState(q_pu=-0.44, p_pu=0.9), 5.0, unit)
    assert q == pytest.approx(-2.64)
    assert p == pytest.approx(min(math.sqrt(36 - 6.9696), 5 * 0.9))
    assert legacy_output(InverterState(), 5.0) == (5.0, 0.0)
    assert legacy_output(InverterState(u=0), 5.0) == (0.0, 0.0)
    assert non_exporting_output(InverterState(), 5.0, 1.0) == (1.0, 0.0)
    assert non_exporting_output(InverterState(), 0.5, 1.0) == (0.5, 0.0)
    assert non_exporting_output(InverterState(u=0), 5.0, 1.0) == (0.0, 0.0)
    with pytest.raises(ParameterError):
        legacy_output(InverterState(), -1.0)


@given(st.floats(0, 5), st.floats(-0.44, 0), st.floats(0.2, 1))
def test_autonomous_within_rating(p_av, q_pu, p_pu):
    unit = InverterUnit(1, InverterKind.AUTONOMOUS)
    p, q = autonomous_output(InverterState(q_pu=q_pu, p_pu=p_pu), p_av, unit)
    assert p * p + q * q <= 36 + 1e-9 and 0 <= p <= p_av


def test_window_length():
    assert window_length(30) == 20 and window_length(60) == 10 and window_length(7) == 86


def fleet(kinds, window=20):
    units = [InverterUnit(i, k) for i, k in enumerate(kinds)]
    return units, [InverterState.fresh(window) for _ in units]


def test_no_trip_below_threshold():
    units, states = fleet([InverterKind.LEGACY, InverterKind.AUTONOMOUS])
    ev = trip_step(units, states, [250 / V, 252 / V], S, np.random.default_rng(0))
    assert ev.all == [] and all(s.u == 1 for s in states)


def test_instant_trip_regardless_of_sampling():
    for seed in range(20):
        units, states = fleet([InverterKind.AUTONOMOUS, InverterKind.LEGACY])
        ev = trip_step(units, states, [266 / V, 240 / V], S, np.random.default_rng(seed))
        assert ev.instant == [0] and states[0].u == 0 and states[1].u == 1


def test_coordinated_units_ignored_by_protection():
    units, states = fleet([InverterKind.COORDINATED])
    ev = trip_step(units, states, [270 / V], S, np.random.default_rng(0))
    assert ev.all == [] and len(states[0].window) == 0


def test_trip_weight_ratio():
    w = trip_weights([257.5 / V, 259 / V], [265 / V, 265 / V])
    assert w[1] / w[0] == pytest.approx((7.5 / 6.0) ** 2)
    units, _ = fleet([InverterKind.AUTONOMOUS] * 2)
    counts = Counter()
    rng = np.random.default_rng(1)
    for _ in range(4000):
        _, states = fleet([InverterKind.AUTONOMOUS] * 2, window=1)
        ev = trip_step(units, states, [257.5 / V, 259 / V], S, rng)
        counts[ev.average] += 1
    share = counts[1] / 4000
    expected = w[1] / w.sum()
    assert abs(share - expected) < 0.03


def test_at_most_one_average_trip():
    units, states = fleet([InverterKind.LEGACY] * 5, window=1)
    ev = trip_step(units, states, [258 / V] * 5, S, np.random.default_rng(0))
    assert ev.instant == [] and ev.average is not None
    assert sum(s.u == 0 for s in states) == 1


def test_reconnect_examples():
    units, states = fleet([InverterKind.LEGACY] * 2)
    assert reconnect_step(units, states, [250 / V] * 2, S, 4, np.random.default_rng(0)) is None
    states[1].u, states[1].periods_offline, states[1].q_pu = 0, 4, -0.3
    assert reconnect_step(units, states, [250 / V] * 2, S, 4, np.random.default_rng(0)) == 1
    assert states[1].u == 1 and states[1].q_pu == 0.0


def test_reconnect_waits_and_counts():
    units, states = fleet([InverterKind.LEGACY])
    states[0].u = 0
    rng = np.random.default_rng(0)
    for k in range(4):
        assert reconnect_step(units, states, [250 / V], S, 4, rng) is None
        assert states[0].periods_offline == k + 1
    assert reconnect_step(units, states, [258 / V], S, 4, rng) is None  # too high
    assert reconnect_step(units, states, [250 / V], S, 4, rng) == 0


def test_reconnect_weight_ratio():
    w = reconnect_weights([240 / V, 250 / V])
    assert w[0] / w[1] == pytest.approx(4.0)


def test_weighted_choice():
    rng = np.random.default_rng(3)
    draws = Counter(weighted_choice([1.0, 0.0, 3.0], rng) for _ in range(8000))
    assert draws[1] == 0 and abs(draws[2] / 8000 - 0.75) < 0.03
    with pytest.raises(ParameterError):
        weighted_choice([0.0, 0.0], rng)
