import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pehsim import (
    BiasFlipConfig,
    Excitation,
    RectifierModel,
    SimState,
    bf_phase,
    frequency_analysis,
    optimum_power,
    simulate_acml,
    simulate_dcrs,
)
from pehsim.optimize import optimal_v_rect
from pehsim.transient import (
    DISABLED_BF,
    DcrsCircuit,
    InvalidConfigError,
    NonConvergentError,
    advance_segment,
)

IDEAL = RectifierModel("ideal")
SMART = RectifierModel("smart")


def rk4_reference(cm, exc, x0, t0, t1, n, clamp=None):
    """Dense fixed-step RK4 on the open (or clamped-output) network."""
    w = 2 * math.pi * exc.frequency

    def rhs(t, x):
        i, vc, v = x
        di = (exc.source_amplitude * math.sin(w * t) - cm.R_m * i - vc - cm.A * v) / cm.L_m
        dv = 0.0 if clamp is not None else cm.A * i / cm.C_P
        return np.array([di, i / cm.C_m, dv])

    x = np.array(x0, dtype=float)
    h = (t1 - t0) / n
    t = t0
    for _ in range(n):
        k1 = rhs(t, x)
        k2 = rhs(t + h / 2, x + h / 2 * k1)
        k3 = rhs(t + h / 2, x + h / 2 * k2)
        k4 = rhs(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return x


def energy(cm, s):
    return 0.5 * cm.L_m * s.i_s**2 + 0.5 * cm.C_m * s.v_cm**2 + 0.5 * cm.C_P * s.v_out**2


# --- advance_segment ---------------------------------------------------------


def test_open_segment_matches_rk4(ref):
    exc = Excitation(680.0)
    circ = DcrsCircuit(ref, exc, IDEAL, DISABLED_BF, v_rect=1e6)
    x0 = SimState(1e-4, 0.3, -0.2, 0.0)
    T = 1 / exc.frequency
    s, ev = advance_segment(circ, x0, "open", T)
    assert ev == "none"
    assert s.t == pytest.approx(T, rel=1e-14)
    x_ref = rk4_reference(ref, exc, x0.as_array(), 0.0, T, 100_000)
    scale = np.abs(x_ref) + np.abs(x0.as_array())
    assert np.all(np.abs(s.as_array() - x_ref) <= 1e-6 * scale)


def test_conducting_segment_matches_rk4_until_turn_off(ref):
    exc = Excitation(690.0)
    v_rect = 0.5
    circ = DcrsCircuit(ref, exc, IDEAL, DISABLED_BF, v_rect)
    x0 = SimState(2e-3, 0.0, v_rect, 0.0)
    s, ev = advance_segment(circ, x0, "conduct_pos", 1 / exc.frequency)
    assert ev == "diode_off"
    assert abs(s.i_s) < 1e-9 * 2e-3
    x_ref = rk4_reference(ref, exc, x0.as_array(), 0.0, s.t, 100_000, clamp=v_rect)
    assert s.v_cm == pytest.approx(x_ref[1], rel=1e-6)
    assert s.v_out == v_rect


def test_diode_on_event_lands_on_threshold(ref):
    exc = Excitation(673.0)
    v_rect = 0.2
    circ = DcrsCircuit(ref, exc, RectifierModel("diode_bridge", 0.1), DISABLED_BF, v_rect)
    s, ev = advance_segment(circ, SimState(0.0, 0.0, 0.0, 0.0), "open", 0.05)
    assert ev == "diode_on"
    assert 0 < s.t < 0.05
    assert abs(abs(s.v_out) - circ.threshold) <= 1e-9 * v_rect
    assert circ.threshold == pytest.approx(v_rect + 0.2)


def test_unforced_segment_dissipates(ref):
    exc = Excitation(673.0, 0.0)
    circ = DcrsCircuit(ref, exc, IDEAL, DISABLED_BF, v_rect=1e6)
    s = SimState(1e-3, 0.5, 0.2, 0.0)
    e = [energy(ref, s)]
    for _ in range(200):
        s, ev = advance_segment(circ, s, "open", 2e-5)
        assert ev == "none"
        e.append(energy(ref, s))
    assert np.all(np.diff(e) <= 1e-15 * e[0])
    assert e[-1] < e[0]


def test_segment_stops_at_scheduled_flip(ref):
    exc = Excitation(690.0)
    bf = BiasFlipConfig(True, 0.82, bf_phase(ref, 690.0))
    circ = DcrsCircuit(ref, exc, IDEAL, bf, v_rect=1e6)
    s, ev = advance_segment(circ, SimState(0.0, 0.0, 0.0, 0.0), "open", 1 / 690.0)
    assert ev == "flip_due"
    assert s.t == pytest.approx(bf.flip_angle() / (2 * math.pi * 690.0), rel=1e-12)


def test_segment_rejects_inconsistent_topology(ref):
    circ = DcrsCircuit(ref, Excitation(673.0), IDEAL, DISABLED_BF, v_rect=1.0)
    with pytest.raises(InvalidConfigError):
        advance_segment(circ, SimState(0.0, 0.0, 0.2), "conduct_pos", 1e-4)
    with pytest.raises(InvalidConfigError):
        advance_segment(circ, SimState(0.0, 0.0, 2.0), "open", 1e-4)
    with pytest.raises(InvalidConfigError):
        advance_segment(circ, SimState(0.0, 0.0, 0.0), "sideways", 1e-4)


# --- configuration -----------------------------------------------------------


def test_rectifier_and_flip_config():
    assert RectifierModel("ideal", 0.7).drop == 0.0
    assert RectifierModel("smart", 0.7).drop == 0.0
    assert RectifierModel("diode_bridge", 0.7).drop == 0.7
    with pytest.raises(InvalidConfigError):
        RectifierModel("tube")
    with pytest.raises(InvalidConfigError):
        RectifierModel("diode_bridge", -0.1)
    with pytest.raises(InvalidConfigError):
        BiasFlipConfig(flip_ratio=1.2)
    assert BiasFlipConfig.from_efficiency(0.82).flip_ratio == 0.82
    assert BiasFlipConfig.from_efficiency(0.81, "energy").flip_ratio == pytest.approx(0.9)
    assert BiasFlipConfig(phase=0.3).flip_angle() == pytest.approx(math.pi - 0.3)
    assert BiasFlipConfig(phase=-0.3).flip_angle() == pytest.approx(0.3)


def test_negative_v_rect_rejected(ref, exc):
    with pytest.raises(InvalidConfigError):
        simulate_dcrs(ref, exc, IDEAL, DISABLED_BF, -1.0)


# --- DCRS steady state -------------------------------------------------------


def test_zero_v_rect_gives_zero_power(ref, exc):
    res = simulate_dcrs(ref, exc, IDEAL, BiasFlipConfig(True, 1.0, 0.0), 0.0)
    assert res.avg_power == 0.0
    assert res.converged


def test_no_flip_needed_at_zero_reactance(ref):
    # the plain bridge already delivers near-optimum power at f_zr1 and f_zr2
    fa = frequency_analysis(ref)
    for f in (fa.f_zr1, fa.f_zr2):
        exc = Excitation(f)
        _, p = optimal_v_rect(ref, exc, IDEAL, DISABLED_BF)
        assert p >= 0.95 * optimum_power(ref, exc)


def test_flip_voltage_small_near_upper_zero_reactance(ref):
    fa = frequency_analysis(ref)
    ratios = []
    for f in (fa.f_zr2, 1.5 * fa.f_oc):
        exc = Excitation(f)
        bf = BiasFlipConfig(True, 0.82, bf_phase(ref, f))
        v, _ = optimal_v_rect(ref, exc, IDEAL, bf)
        res = simulate_dcrs(ref, exc, IDEAL, bf, v)
        ratios.append(res.v_bf / res.v_peak)
    assert ratios[0] < 0.1 < 0.5 < ratios[1]


def test_near_optimum_at_fsc(ref):
    exc = Excitation(673.0)
    bf = BiasFlipConfig(True, 1.0, bf_phase(ref, 673.0))
    _, p = optimal_v_rect(ref, exc, IDEAL, bf)
    assert 0.95 * optimum_power(ref, exc) <= p <= optimum_power(ref, exc) * (1 + 1e-3)


@pytest.mark.parametrize(
    "f, rect, gamma, v_rect",
    [
        (673.0, IDEAL, 1.0, 0.5),
        (685.0, SMART, 0.82, 1.0),
        (660.0, RectifierModel("diode_bridge", 0.3), 0.82, 0.8),
        (720.0, RectifierModel("diode_bridge", 0.5), 0.9, 2.0),
        (600.0, IDEAL, 0.0, 0.1),
    ],
)
def test_energy_audit_balances(ref, f, rect, gamma, v_rect):
    bf = BiasFlipConfig(True, gamma, bf_phase(ref, f))
    res = simulate_dcrs(ref, Excitation(f), rect, bf, v_rect)
    a = res.audit
    assert a.relative_residual < 1e-3
    # each flip loses C_P (1 - gamma^2) v_bf^2 / 2
    assert a.flip == pytest.approx(2 * 0.5 * ref.C_P * (1 - gamma**2) * res.v_bf**2, rel=1e-6, abs=1e-18)
    assert a.storage == pytest.approx(res.avg_power / f, rel=1e-12)
    assert a.diode >= 0 and a.resistive > 0


@settings(max_examples=25)
@given(
    f=st.floats(600.0, 760.0),
    gamma=st.floats(0.5, 1.0),
    v_frac=st.floats(0.05, 3.0),
    drop=st.sampled_from([0.0, 0.2, 0.5]),
)
def test_energy_audit_property(ref, f, gamma, v_frac, drop):
    bf = BiasFlipConfig(True, gamma, bf_phase(ref, f))
    res = simulate_dcrs(ref, Excitation(f), RectifierModel("diode_bridge", drop), bf, v_frac)
    assert res.converged
    assert res.avg_power >= 0
    assert res.audit.relative_residual < 1e-3
    assert res.avg_power <= optimum_power(ref, Excitation(f)) * (1 + 1e-3)


def test_power_monotone_in_drop_and_gamma(ref):
    f, v = 680.0, 0.6
    bf = BiasFlipConfig(True, 0.82, bf_phase(ref, f))
    p_drop = [simulate_dcrs(ref, Excitation(f), RectifierModel("diode_bridge", d), bf, v).avg_power for d in (0, 0.1, 0.2, 0.4)]
    assert all(b <= a * (1 + 1e-6) for a, b in zip(p_drop, p_drop[1:]))
    p_gamma = [
        simulate_dcrs(ref, Excitation(f), IDEAL, BiasFlipConfig(True, g, bf.phase), v).avg_power for g in (0.5, 0.7, 0.82, 1.0)
    ]
    assert all(b >= a * (1 - 1e-6) for a, b in zip(p_gamma, p_gamma[1:]))


def test_time_resolution_converged(ref):
    for f in (650.0, 690.0):
        bf = BiasFlipConfig(True, 0.82, bf_phase(ref, f))
        p1 = simulate_dcrs(ref, Excitation(f), IDEAL, bf, 0.8).avg_power
        p2 = simulate_dcrs(ref, Excitation(f), IDEAL, bf, 0.8, samples_per_period=128).avg_power
        assert abs(p2 - p1) < 5e-4 * p1


def test_steady_state_independent_of_start(ref):
    f = 690.0
    bf = BiasFlipConfig(True, 0.82, bf_phase(ref, f))
    a = simulate_dcrs(ref, Excitation(f), SMART, bf, 1.0)
    b = simulate_dcrs(ref, Excitation(f), SMART, bf, 1.0, initial=[1e-3, -2.0, 0.7])
    assert b.avg_power == pytest.approx(a.avg_power, rel=1e-3)


def test_cycle_cap_reports_non_convergence(ref, exc):
    with pytest.raises(NonConvergentError):
        simulate_dcrs(ref, exc, IDEAL, DISABLED_BF, 0.5, max_cycles=4)
    res = simulate_dcrs(ref, exc, IDEAL, DISABLED_BF, 0.5, max_cycles=4, raise_on_failure=False)
    assert not res.converged


def test_waveform_trace(ref):
    f = 640.0
    bf = BiasFlipConfig(True, 0.82, bf_phase(ref, f))
    res = simulate_dcrs(ref, Excitation(f), IDEAL, bf, 0.7)
    rows = list(res.waveform.rows())
    assert len(rows) == 256 + 4
    t = [r[0] for r in rows]
    assert t == sorted(t) and t[-1] < 1 / f
    flips = [r for r in rows if r[3] == 1]
    assert len(flips) == 4
    for pre, post in zip(flips[::2], flips[1::2]):
        assert pre[0] == post[0]
        assert post[1] == pytest.approx(-0.82 * pre[1], rel=1e-12)
        assert abs(pre[1]) == pytest.approx(res.v_bf, rel=1e-3)


def test_flip_voltage_large_far_from_resonance(ref):
    for f in (0.5 * 673.0, 1.5 * 696.0):
        exc = Excitation(f)
        bf = BiasFlipConfig(True, 0.82, bf_phase(ref, f))
        v, _ = optimal_v_rect(ref, exc, IDEAL, bf)
        res = simulate_dcrs(ref, exc, IDEAL, bf, v)
        assert res.v_bf > 0.5 * res.v_peak


# --- ACML --------------------------------------------------------------------


@pytest.mark.parametrize("f", [610.0, 660.0, 673.0, 673.8, 685.0, 700.0, 760.0])
def test_acml_reaches_optimum(ref, f):
    exc = Excitation(f)
    res = simulate_acml(ref, exc)
    assert res.converged
    assert res.avg_power == pytest.approx(optimum_power(ref, exc), rel=5e-3)
    assert res.audit.relative_residual < 1e-3


@pytest.mark.parametrize("f", [620.0, 673.0, 690.0, 740.0])
def test_acml_phase_matches_flip_phase(ref, f):
    res = simulate_acml(ref, Excitation(f))
    assert abs(math.degrees(res.phase - bf_phase(ref, f))) < 1.0


def test_acml_without_drive(ref):
    assert simulate_acml(ref, Excitation(680.0, 0.0)).avg_power == 0.0
