import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pehsim import BiasFlipConfig, CompactModel, Excitation, RectifierModel, bf_phase, frequency_analysis, optimum_power, simulate_dcrs
from pehsim.model import open_circuit_amplitude
from pehsim.optimize import (
    NoHalfPowerCrossingError,
    PeakAtBoundaryError,
    BandwidthError,
    SweepPoint,
    bandwidth_3db,
    default_grid,
    frequency_sweep,
    golden_section_max,
    kappa_sweep,
    optimal_v_rect,
)
from pehsim.transient import DISABLED_BF

IDEAL = RectifierModel("ideal")
SMART = RectifierModel("smart")


def lorentzian(f, f0, hw, p0=1.0):
    return p0 / (1.0 + ((f - f0) / hw) ** 2)


# --- golden section ----------------------------------------------------------


def test_golden_section_finds_parabola_peak():
    x, fx = golden_section_max(lambda v: -((v - 1.234) ** 2) + 5.0, 0.0, 3.0, rel_tol=1e-6)
    assert x == pytest.approx(1.234, rel=1e-5)
    assert fx == pytest.approx(5.0, abs=1e-9)


@given(st.floats(0.1, 9.9), st.floats(0.1, 10.0))
def test_golden_section_property(x0, width):
    x, _ = golden_section_max(lambda v: -abs(v - x0) * width, 0.0, 10.0, rel_tol=1e-4)
    assert abs(x - x0) <= 1e-4 * x0 + 1e-9


# --- rectification voltage ---------------------------------------------------


def test_no_drive_gives_no_power(ref):
    bf = BiasFlipConfig(True, 0.82, 0.0)
    assert optimal_v_rect(ref, Excitation(673.0, 0.0), IDEAL, bf) == (0.0, 0.0)
    assert optimal_v_rect(ref.with_coupling_scaled(0.0), Excitation(673.0), IDEAL, bf) == (0.0, 0.0)


def test_optimum_at_lower_zero_reactance(ref):
    f = frequency_analysis(ref).f_zr1
    exc = Excitation(f)
    _, p = optimal_v_rect(ref, exc, IDEAL, BiasFlipConfig(True, 1.0, bf_phase(ref, f)))
    assert p == pytest.approx(optimum_power(ref, exc), rel=1e-2)


@pytest.mark.parametrize("f", [668.0, 690.0])
def test_refined_optimum_against_dense_grid(ref, f):
    exc = Excitation(f)
    bf = BiasFlipConfig(True, 0.82, bf_phase(ref, f))
    v_best, p_best = optimal_v_rect(ref, exc, SMART, bf)
    grid = np.linspace(0.0, 2.0 * open_circuit_amplitude(ref, exc), 1024)
    p_grid = np.array([simulate_dcrs(ref, exc, SMART, bf, v).avg_power for v in grid])
    assert p_best >= p_grid.max() * (1 - 1e-3)
    assert abs(p_best - p_grid.max()) < 0.02 * p_grid.max()
    assert v_best > 0


# --- sweeps ------------------------------------------------------------------


def test_sweep_points_are_order_independent(ref):
    grid = [660.0, 675.0, 690.0, 705.0]
    bf = BiasFlipConfig(True, 0.82)
    forward = frequency_sweep(ref, Excitation(1.0), SMART, bf, grid)
    backward = [frequency_sweep(ref, Excitation(1.0), SMART, bf, [f])[0] for f in reversed(grid)]
    assert forward == backward[::-1]
    for p in forward:
        assert p.ok and 0 <= p.normalized_power <= 1 + 1e-3
        assert p.best_v_rect > 0 and math.isfinite(p.best_v_rect)


def test_parallel_sweep_matches_serial(ref):
    grid = [665.0, 685.0, 700.0]
    bf = BiasFlipConfig(True, 0.82)
    serial = frequency_sweep(ref, Excitation(1.0), SMART, bf, grid)
    parallel = frequency_sweep(ref, Excitation(1.0), SMART, bf, grid, jobs=2)
    assert serial == parallel


def test_sweep_validates_grid(ref):
    with pytest.raises(ValueError, match="empty"):
        frequency_sweep(ref, Excitation(1.0), SMART, DISABLED_BF, [])
    with pytest.raises(ValueError):
        frequency_sweep(ref, Excitation(1.0), SMART, DISABLED_BF, [680.0, 670.0])
    with pytest.raises(ValueError):
        frequency_sweep(ref, Excitation(1.0), SMART, DISABLED_BF, [-5.0, 670.0])


def test_sweep_records_point_errors(ref):
    pts = frequency_sweep(ref, Excitation(1.0), SMART, BiasFlipConfig(True, 0.82), [670.0, 680.0], max_cycles=4)
    assert len(pts) == 2
    assert all(not p.ok and "non-convergent" in p.error for p in pts)
    assert all(math.isnan(p.best_power) for p in pts)


def test_plain_bridge_peaks_sit_on_zero_reactance():
    cm = CompactModel.from_frequencies(673.0, 673.0 * math.sqrt(1.02), 150.0, 1.0, 200e-9)
    fa = frequency_analysis(cm)
    grid = np.arange(666.0, 687.0, 1.0)
    p = np.array([pt.normalized_power for pt in frequency_sweep(cm, Excitation(1.0), IDEAL, DISABLED_BF, grid)])
    peaks = grid[1:-1][(p[1:-1] > p[:-2]) & (p[1:-1] > p[2:])]
    assert len(peaks) == 2
    assert abs(peaks[0] - fa.f_zr1) <= 1.0 and abs(peaks[1] - fa.f_zr2) <= 1.0
    assert p.max() > 0.95


def test_default_grid_covers_both_resonances(ref):
    g = default_grid(ref)
    assert g[0] <= 673 - 60 and g[-1] >= 696 + 60
    assert np.allclose(np.diff(g), 1.0)


def test_kappa_sweep_rejects_bad_factor(ref):
    with pytest.raises(ValueError):
        kappa_sweep(ref, [1.0, 0.0], Excitation(1.0), SMART, BiasFlipConfig(True, 0.82))


# --- bandwidth ---------------------------------------------------------------


@given(st.floats(600.0, 800.0), st.floats(5.0, 40.0))
def test_bandwidth_of_lorentzian(f0, hw):
    f = np.arange(f0 - 10 * hw, f0 + 10 * hw, hw / 10.0)
    rep = bandwidth_3db(list(zip(f, lorentzian(f, f0, hw))))
    assert rep.bw_3db == pytest.approx(2 * hw, rel=1e-2)
    assert rep.f_lo <= rep.f_peak <= rep.f_hi
    assert lorentzian(rep.f_lo, f0, hw) == pytest.approx(0.5 * rep.p_peak, rel=1e-2)
    assert lorentzian(rep.f_hi, f0, hw) == pytest.approx(0.5 * rep.p_peak, rel=1e-2)
    fine = np.arange(f[0], f[-1], hw / 20.0)
    rep2 = bandwidth_3db(list(zip(fine, lorentzian(fine, f0, hw))))
    assert abs(rep2.bw_3db - rep.bw_3db) < 1e-2 * rep.bw_3db


def test_bandwidth_fraction_uses_fsc():
    f = np.arange(600.0, 760.0, 1.0)
    rep = bandwidth_3db(list(zip(f, lorentzian(f, 680.0, 10.0))), f_sc=673.0)
    assert rep.bw_fraction == pytest.approx(rep.bw_3db / 673.0)


def test_bandwidth_errors():
    f = np.arange(600.0, 700.0, 1.0)
    with pytest.raises(NoHalfPowerCrossingError):
        bandwidth_3db(list(zip(f, np.ones_like(f))))
    with pytest.raises(PeakAtBoundaryError):
        bandwidth_3db(list(zip(f, lorentzian(f, 600.0, 5.0))))
    with pytest.raises(NoHalfPowerCrossingError) as info:
        bandwidth_3db(list(zip(f, lorentzian(f, 605.0, 10.0))))
    assert info.value.report.one_sided
    assert info.value.report.f_lo == 600.0
    with pytest.raises(BandwidthError):
        bandwidth_3db([(1.0, 1.0), (2.0, 2.0)])


def test_bandwidth_skips_failed_points():
    f = np.arange(600.0, 760.0, 1.0)
    pts = [SweepPoint(x, 1.0, y, y, 0.0) for x, y in zip(f, lorentzian(f, 680.0, 8.0))]
    pts[10] = SweepPoint(pts[10].frequency, math.nan, math.nan, math.nan, math.nan, error="boom")
    assert bandwidth_3db(pts).bw_3db == pytest.approx(16.0, rel=1e-2)
