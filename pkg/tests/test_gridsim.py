import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofoflex import gridsim
from ofoflex.gridsim import (
    ControlledDevice,
    DeviceSet,
    DroopCurve,
    EvProfile,
    GridError,
    GridModel,
    Line,
    PowerFlowError,
    UncontrolledDevice,
    compute_sensitivities,
    default_grid,
    droop_response,
    solve_power_flow,
    step_plant,
)

from oracles import two_bus_receiving_voltage, zbus_power_flow

# frozen from the biquadratic oracle: 400 V, R=0.17, X=0.08, +10 kW
TWO_BUS_V = 1.0105023308849954
TWO_BUS_P_PCC = -9.89594707345717


def two_bus(r=0.17, x=0.08):
    return GridModel(buses=[0, 1], lines=[Line(0, 1, r, x)])


def controlled():
    return DeviceSet(gridsim.default_controlled())


# --- power flow -------------------------------------------------------------


def test_flat_no_load():
    sol = solve_power_flow(default_grid(), {})
    assert np.allclose(sol.v, 1.0)
    assert sol.p_pcc == pytest.approx(0.0, abs=1e-12)
    assert sol.converged


def test_two_bus_matches_biquadratic():
    sol = solve_power_flow(two_bus(), {1: (10.0, 0.0)})
    oracle = two_bus_receiving_voltage(400.0, 0.17, 0.08, -10e3, 0.0) / 400.0
    assert oracle == pytest.approx(TWO_BUS_V, abs=1e-15)
    assert sol.v[1] == pytest.approx(TWO_BUS_V, abs=1e-10)
    assert sol.p_pcc == pytest.approx(TWO_BUS_P_PCC, abs=1e-8)
    # exporting, with positive losses on top
    assert -10.0 < sol.p_pcc < -9.8
    assert sol.losses == pytest.approx(sol.p_pcc + 10.0)


def test_default_feeder_with_pv2_rises_monotonically():
    grid = default_grid()
    sol = solve_power_flow(grid, {1: (5.0, 0.0)})
    v = dict(zip(grid.buses, sol.v))
    assert v[3] > 1.0 and v[1] > 1.0 and v[2] > 1.0
    # along the feeder PCC -> 3 -> 1 -> 2
    assert 1.0 < v[3] < v[1]
    assert v[2] == pytest.approx(v[1], abs=1e-12)
    ref, _ = zbus_power_flow(grid.buses, [(l.from_bus, l.to_bus, l.r_ohm, l.x_ohm) for l in grid.lines],
                             400.0, 1.0, {1: (5.0, 0.0)})
    assert np.allclose(sol.v, ref, atol=1e-10)


def radial_grids():
    @st.composite
    def build(draw):
        n = draw(st.integers(2, 7))
        lines = []
        for b in range(1, n):
            parent = draw(st.integers(0, b - 1))
            r = draw(st.floats(0.01, 0.5))
            x = draw(st.floats(0.005, 0.2))
            lines.append(Line(parent, b, r, x))
        inj = {
            b: (draw(st.floats(-15, 15)), draw(st.floats(-8, 8)))
            for b in range(1, n)
        }
        slack = draw(st.floats(0.97, 1.03))
        return GridModel(list(range(n)), lines, slack_voltage=slack), inj
    return build()


@settings(max_examples=60, deadline=None)
@given(radial_grids())
def test_sweep_matches_zbus_oracle_and_balances(case):
    grid, inj = case
    sol = solve_power_flow(grid, inj)
    ref_v, ref_s = zbus_power_flow(
        grid.buses, [(l.from_bus, l.to_bus, l.r_ohm, l.x_ohm) for l in grid.lines],
        grid.v_nominal, grid.slack_voltage, inj,
    )
    assert sol.converged and sol.residual <= 1e-8
    assert np.allclose(sol.v, ref_v, atol=1e-9)
    assert sol.p_pcc == pytest.approx(ref_s.real, abs=1e-6)
    total_inj = sum(p for p, _ in inj.values())
    assert sol.losses == pytest.approx(sol.p_pcc + total_inj, abs=1e-8)
    assert sol.losses >= 0.0


def test_non_convergence_is_explicit():
    with pytest.raises(PowerFlowError) as info:
        solve_power_flow(default_grid(), {2: (15.0, 0.0)}, max_iter=1)
    assert info.value.residual > 1e-8


def test_injection_at_pcc_rejected():
    with pytest.raises(GridError):
        solve_power_flow(default_grid(), {0: (1.0, 0.0)})


@pytest.mark.parametrize(
    "buses, lines, message",
    [
        ([0, 1, 2], [Line(0, 1, 0.1, 0.1), Line(1, 2, 0.1, 0.1), Line(2, 0, 0.1, 0.1)], "not radial"),
        ([0, 1, 2, 3], [Line(0, 1, 0.1, 0.1), Line(1, 0, 0.1, 0.1), Line(2, 3, 0.1, 0.1)], "not connected"),
        ([0, 1], [Line(0, 1, -0.1, 0.1)], "negative"),
        ([0, 1], [Line(0, 1, 0.0, 0.0)], "zero impedance"),
        ([0, 1], [Line(0, 5, 0.1, 0.1)], "unknown bus"),
        ([0, 0], [Line(0, 0, 0.1, 0.1)], "duplicate"),
    ],
)
def test_grid_invariants(buses, lines, message):
    with pytest.raises(GridError, match=message):
        GridModel(buses, lines)


# --- droop ------------------------------------------------------------------


def test_droop_examples():
    curve = DroopCurve(deadband=0.03, v_saturation=1.05, q_max=3.0)
    assert droop_response(curve, 1.02) == 0.0
    assert droop_response(curve, 1.00) == 0.0
    assert droop_response(curve, 1.05) == pytest.approx(-3.0)
    assert droop_response(curve, 1.04) == pytest.approx(-1.5)
    assert droop_response(curve, 1.10) == pytest.approx(-3.0)
    assert droop_response(curve, 0.95) == pytest.approx(3.0)


@given(st.floats(0.0, 0.3), st.floats(0.0, 0.04), st.floats(0.001, 0.06), st.floats(0.0, 20.0))
def test_droop_odd_symmetric_and_bounded(delta, deadband, extra, q_max):
    curve = DroopCurve(deadband=deadband, v_saturation=1.0 + deadband + extra, q_max=q_max)
    up = droop_response(curve, 1.0 + delta)
    assert up == pytest.approx(-droop_response(curve, 1.0 - delta), abs=1e-12)
    assert -q_max - 1e-12 <= up <= 1e-12
    if delta < deadband - 1e-12:
        assert up == 0.0


@given(st.lists(st.floats(0.8, 1.2), min_size=2, max_size=20))
def test_droop_nonincreasing(vs):
    curve = DroopCurve()
    vs = sorted(vs)
    q = [droop_response(curve, v) for v in vs]
    assert all(a >= b - 1e-12 for a, b in zip(q, q[1:]))


def test_droop_curve_validation():
    with pytest.raises(GridError):
        DroopCurve(deadband=0.06, v_saturation=1.05)
    with pytest.raises(GridError):
        DroopCurve(q_max=-1.0)


# --- plant ------------------------------------------------------------------


def test_step_plant_without_devices_is_flat():
    y = step_plant(default_grid(), controlled(), np.zeros(4), t=0.0)
    assert np.allclose(y.v, 1.0)
    assert y.p_pcc == pytest.approx(0.0, abs=1e-12)


@given(st.floats(0.0, 1e5))
@settings(max_examples=20, deadline=None)
def test_step_plant_idempotent_in_time(t):
    u = np.array([5.0, -3.0, 1.0, 2.0])
    a = step_plant(default_grid(), controlled(), u, t=0.0)
    b = step_plant(default_grid(), controlled(), u, t=t)
    assert np.array_equal(a.v, b.v) and a.p_pcc == b.p_pcc


def test_ev_plateau_shifts_pcc_by_draw():
    grid = default_grid()
    ev = UncontrolledDevice("ev", "profile_load", bus=1, profile=EvProfile(power=11.0, t_start=0.0))
    devices = DeviceSet(gridsim.default_controlled(), [ev])
    u = np.array([6.0, 4.0, 0.0, 0.0])
    t_plateau = 30.0 + 60.0
    y = step_plant(grid, devices, u, t=t_plateau)
    with_ev = solve_power_flow(grid, {3: (6.0, 0.0), 2: (4.0, 0.0), 1: (-11.0, 0.0)})
    without = solve_power_flow(grid, {3: (6.0, 0.0), 2: (4.0, 0.0)})
    assert y.p_pcc == pytest.approx(with_ev.p_pcc, abs=1e-9)
    # the draw plus the change in losses
    shift = y.p_pcc - without.p_pcc
    assert shift == pytest.approx(11.0 + with_ev.losses - without.losses, abs=1e-9)


def test_ev_profile_shape():
    ev = EvProfile(power=11.0, ramp_up=30.0, hold=120.0, ramp_down=30.0, t_start=10.0)
    assert ev(0.0) == 0.0 and ev(10.0) == 0.0
    assert ev(25.0) == pytest.approx(5.5)
    assert ev(40.0) == pytest.approx(11.0) and ev(160.0) == pytest.approx(11.0)
    assert ev(175.0) == pytest.approx(5.5)
    assert ev(190.0) == 0.0 and ev(1e4) == 0.0


def test_droop_lowers_voltage_at_its_bus():
    grid = default_grid()
    u = np.array([15.0, 10.0, 0.0, 0.0])
    pv2 = UncontrolledDevice("pv2", "droop_inverter", bus=1, p_injection=4.0, droop=DroopCurve(q_max=4.0))
    plain = UncontrolledDevice("pv2", "droop_inverter", bus=1, p_injection=4.0, droop=None)
    on = step_plant(grid, DeviceSet(gridsim.default_controlled(), [pv2]), u, 0.0)
    off = step_plant(grid, DeviceSet(gridsim.default_controlled(), [plain]), u, 0.0)
    k = grid.index(1)
    assert off.v[k] > 1.03
    assert on.v[k] < off.v[k]
    # fixed point: the droop output is consistent with the measured voltage
    q = droop_response(pv2.droop, on.v[k])
    ref = solve_power_flow(grid, {3: (15.0, 0.0), 2: (10.0, 0.0), 1: (4.0, q)})
    assert np.allclose(ref.v, on.v, atol=1e-6)


def test_noise_needs_rng_and_is_seeded():
    grid, devices, u = default_grid(), controlled(), np.zeros(4)
    with pytest.raises(ValueError):
        step_plant(grid, devices, u, 0.0, noise=0.01)
    a = step_plant(grid, devices, u, 0.0, noise=0.01, rng=np.random.default_rng(3))
    b = step_plant(grid, devices, u, 0.0, noise=0.01, rng=np.random.default_rng(3))
    assert np.array_equal(a.v, b.v) and a.p_pcc == b.p_pcc
    assert np.all(np.abs(a.v - 1.0) <= 0.01)


def test_device_validation():
    with pytest.raises(GridError):
        ControlledDevice("x", 1, (2.0, 1.0), (0.0, 0.0))
    with pytest.raises(GridError):
        DeviceSet([ControlledDevice("x", 1, (0, 1), (0, 1)), ControlledDevice("x", 2, (0, 1), (0, 1))])
    with pytest.raises(GridError):
        DeviceSet([ControlledDevice("x", 0, (0, 1), (0, 1))]).validate_against(default_grid())
    with pytest.raises(GridError):
        UncontrolledDevice("y", "wind", bus=1)


# --- sensitivities ----------------------------------------------------------


def test_lossless_line_has_unit_pcc_sensitivity():
    grid = two_bus(r=0.0, x=0.08)
    devices = DeviceSet([ControlledDevice("a", 1, (-10, 10), (-5, 5))])
    sens = compute_sensitivities(grid, devices, np.array([3.0, 1.0]))
    assert sens.H_p[0] == pytest.approx(-1.0, abs=1e-9)
    assert sens.H_p[1] == 0.0


def test_reactive_block_zeroed_only_when_asked():
    grid, devices = default_grid(), controlled()
    u0 = np.array([10.0, 5.0, -2.0, -3.0])
    approx = compute_sensitivities(grid, devices, u0)
    full = compute_sensitivities(grid, devices, u0, approximate_Hp_q_zero=False)
    assert np.all(approx.H_p[2:] == 0.0)
    assert np.all(full.H_p[2:] != 0.0)
    assert np.array_equal(approx.H_p[:2], full.H_p[:2])


def test_resistive_feeder_voltage_sensitivities_positive():
    grid, devices = default_grid(), controlled()
    sens = compute_sensitivities(grid, devices, np.zeros(4))
    rows = [grid.index(b) for b in (1, 2, 3)]
    assert np.all(sens.H_v[rows] > 0)
    assert np.all(sens.H_v[grid.index(0)] == 0)


def test_own_bus_dominates_farther_device():
    grid, devices = default_grid(), controlled()
    sens = compute_sensitivities(grid, devices, np.zeros(4))
    # pv1 (bus 3) is nearer the PCC than the battery (bus 2); at bus 3 both
    # act through the same segment, equal to first order
    i3, i2 = grid.index(3), grid.index(2)
    assert abs(sens.H_v[i3, 0]) >= abs(sens.H_v[i3, 1]) * (1 - 1e-5)
    assert abs(sens.H_v[i2, 1]) >= abs(sens.H_v[i2, 0])


def test_sensitivities_match_one_sided_oracle():
    grid, devices = default_grid(), controlled()
    u0 = np.array([8.0, 3.0, -1.0, -2.0])
    sens = compute_sensitivities(grid, devices, u0)
    base = step_plant(grid, devices, u0, 0.0)
    for j in range(4):
        du = np.zeros(4)
        du[j] = 1e-4
        diff = step_plant(grid, devices, u0 + du, 0.0)
        assert np.allclose((diff.v - base.v) / 1e-4, sens.H_v[:, j], atol=1e-7)
        if j < 2:
            assert (diff.p_pcc - base.p_pcc) / 1e-4 == pytest.approx(sens.H_p[j], abs=1e-5)


def richardson_ratio(grid, devices, u0, eps):
    d = [
        compute_sensitivities(grid, devices, u0, perturbation=e, approximate_Hp_q_zero=False, pf_tol=1e-13)
        for e in (eps, eps / 2, eps / 4)
    ]
    num = d[0].H_p - d[1].H_p
    den = d[1].H_p - d[2].H_p
    return num / den


def test_richardson_ratio_on_default_feeder():
    ratio = richardson_ratio(default_grid(), controlled(), np.array([8.0, 4.0, -2.0, -3.0]), 8.0)
    assert np.all((ratio > 3.5) & (ratio < 4.5))
