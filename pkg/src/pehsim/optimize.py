"""Rectification-voltage optimisation, frequency sweeps and 3-dB bandwidth."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import partial

import numpy as np

from .model import (
    CompactModel,
    Excitation,
    bf_phase,
    coupling_coefficient,
    open_circuit_amplitude,
    open_circuit_frequency,
    optimum_power,
    short_circuit_frequency,
)
from .transient import BiasFlipConfig, RectifierModel, SimulationError, simulate_dcrs

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class OptimizationError(RuntimeError):
    pass


class EmptyBracketError(OptimizationError):
    pass


class BandwidthError(ValueError):
    pass


class PeakAtBoundaryError(BandwidthError):
    pass


class NoHalfPowerCrossingError(BandwidthError):
    """No half-power crossing on at least one side of the peak.

    ``report`` holds the one-sided result (or None when neither side crosses).
    """

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class SweepPoint:
    frequency: float
    best_v_rect: float
    best_power: float
    normalized_power: float
    v_bf: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BandwidthReport:
    f_peak: float
    p_peak: float
    f_lo: float
    f_hi: float
    bw_3db: float
    bw_fraction: float
    one_sided: bool = False

    def to_dict(self) -> dict:
        return {
            "f_peak_hz": self.f_peak,
            "p_peak_watts": self.p_peak,
            "f_lo_hz": self.f_lo,
            "f_hi_hz": self.f_hi,
            "bw_3db_hz": self.bw_3db,
            "bw_fraction": self.bw_fraction,
            "one_sided": self.one_sided,
        }


def golden_section_max(func, a, b, rel_tol=1e-3, abs_tol=1e-12, max_iter=200):
    """Maximise a unimodal ``func`` on [a, b].

    Returns (x_best, f_best) over every point evaluated.
    """
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = func(c), func(d)
    best = max((fc, c), (fd, d))
    for _ in range(max_iter):
        if b - a <= max(rel_tol * abs(best[1]), abs_tol):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = func(c)
            best = max(best, (fc, c))
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = func(d)
            best = max(best, (fd, d))
    return best[1], best[0]


def optimal_v_rect(
    cm: CompactModel,
    exc: Excitation,
    rect: RectifierModel,
    bf: BiasFlipConfig,
    *,
    n_grid: int = 32,
    rel_tol: float = 1e-3,
    max_extend: int = 4,
    **sim_kw,
) -> tuple[float, float]:
    """Storage voltage maximising the steady-state DCRS power.

    A coarse grid over [0, 2 V_oc] (V_oc the open-circuit output amplitude)
    locates the optimum; golden-section search refines it.  If the best grid
    point is the top of the range the range is doubled, up to ``max_extend``
    times, since a lossless flip can pump the output above V_oc.
    """
    if exc.source_amplitude == 0 or cm.A == 0:
        return 0.0, 0.0

    def power(v):
        return simulate_dcrs(cm, exc, rect, bf, v, **sim_kw).avg_power

    v_top = 2.0 * max(open_circuit_amplitude(cm, exc), rect.drop)
    for _ in range(max_extend + 1):
        grid = np.linspace(0.0, v_top, n_grid)
        powers = np.array([power(v) for v in grid])
        k = int(np.argmax(powers))
        if k < n_grid - 1 or powers[k] <= 0:
            break
        v_top *= 2.0
    if not np.any(powers > 0):
        raise EmptyBracketError(f"empty bracket: no v_rect on [0, {v_top:g}] V delivers power at f={exc.frequency:g} Hz")
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, n_grid - 1)]
    v_best, p_best = golden_section_max(power, lo, hi, rel_tol=rel_tol)
    if p_best < powers[k]:
        return float(grid[k]), float(powers[k])
    return float(v_best), float(p_best)


def _sweep_point(f, cm, exc_template, rect, bf_policy, sim_kw) -> SweepPoint:
    exc = exc_template.at(f)
    bf = replace(bf_policy, phase=bf_phase(cm, f)) if bf_policy.enabled else bf_policy
    p_opt = optimum_power(cm, exc)
    try:
        v, p = optimal_v_rect(cm, exc, rect, bf, **sim_kw)
        v_bf = simulate_dcrs(cm, exc, rect, bf, v).v_bf if (bf.enabled and p > 0) else 0.0
    except (SimulationError, OptimizationError) as err:
        return SweepPoint(f, math.nan, math.nan, math.nan, math.nan, error=str(err))
    return SweepPoint(f, v, p, p / p_opt if p_opt > 0 else 0.0, v_bf)


def frequency_sweep(
    cm: CompactModel,
    exc_template: Excitation,
    rect: RectifierModel,
    bf_policy: BiasFlipConfig,
    f_grid,
    *,
    jobs: int = 1,
    **sim_kw,
) -> list[SweepPoint]:
    """Optimised power at each frequency of ``f_grid``.

    The flip phase is recomputed per frequency when the flip is enabled.
    Points are independent; errors are recorded per point.
    """
    f_grid = [float(f) for f in f_grid]
    if not f_grid:
        raise ValueError("empty frequency grid")
    if any(f <= 0 for f in f_grid) or any(b <= a for a, b in zip(f_grid, f_grid[1:])):
        raise ValueError("frequency grid must be positive and strictly increasing")
    work = partial(_sweep_point, cm=cm, exc_template=exc_template, rect=rect, bf_policy=bf_policy, sim_kw=sim_kw)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(work, f_grid, chunksize=max(1, len(f_grid) // (4 * jobs))))
    return [work(f) for f in f_grid]


def default_grid(cm: CompactModel, margin: float = 60.0, step: float = 1.0) -> np.ndarray:
    lo = short_circuit_frequency(cm) - margin
    hi = open_circuit_frequency(cm) + margin
    return np.arange(math.floor(lo), math.ceil(hi) + step / 2, step)


def bandwidth_3db(points, f_sc: float | None = None) -> BandwidthReport:
    """Half-power bandwidth of a sweep, using the outermost crossings.

    ``points`` are SweepPoints or (frequency, power) pairs.  ``bw_fraction`` is
    relative to ``f_sc`` (default: the peak frequency).
    """
    pairs = []
    for pt in points:
        if isinstance(pt, SweepPoint):
            if pt.ok:
                pairs.append((pt.frequency, pt.best_power))
        else:
            pairs.append((float(pt[0]), float(pt[1])))
    if len(pairs) < 3:
        raise BandwidthError("need at least 3 valid sweep points")
    f = np.array([p[0] for p in pairs])
    p = np.array([p[1] for p in pairs])
    k = int(np.argmax(p))
    p_peak = p[k]
    half = 0.5 * p_peak
    above = np.nonzero(p >= half)[0]
    i_lo, i_hi = above[0], above[-1]
    f_ref = f[k] if f_sc is None else f_sc

    def cross(i_out, i_in):
        return f[i_out] + (half - p[i_out]) * (f[i_in] - f[i_out]) / (p[i_in] - p[i_out])

    has_lo = i_lo > 0
    has_hi = i_hi < len(p) - 1
    if not has_lo and not has_hi:
        raise NoHalfPowerCrossingError("no half-power crossing on either side of the peak")
    if k == 0 or k == len(p) - 1:
        raise PeakAtBoundaryError("peak at grid boundary: widen the sweep range")
    f_lo = cross(i_lo - 1, i_lo) if has_lo else f[0]
    f_hi = cross(i_hi + 1, i_hi) if has_hi else f[-1]
    report = BandwidthReport(
        f_peak=float(f[k]),
        p_peak=float(p_peak),
        f_lo=float(f_lo),
        f_hi=float(f_hi),
        bw_3db=float(f_hi - f_lo),
        bw_fraction=float((f_hi - f_lo) / f_ref),
        one_sided=not (has_lo and has_hi),
    )
    if report.one_sided:
        side = "lower" if not has_lo else "upper"
        raise NoHalfPowerCrossingError(f"no half-power crossing on the {side} side", report)
    return report


@dataclass(frozen=True)
class KappaSweepEntry:
    scale: float
    kappa_e2: float
    points: list
    report: BandwidthReport | None
    error: str | None = None


def kappa_sweep(
    base_cm: CompactModel,
    a_scale_factors,
    exc_template: Excitation,
    rect: RectifierModel,
    bf_policy: BiasFlipConfig,
    *,
    f_grid=None,
    margin: float = 60.0,
    step: float = 1.0,
    jobs: int = 1,
    **sim_kw,
) -> list[KappaSweepEntry]:
    """Bandwidth for copies of ``base_cm`` with A scaled by each factor."""
    entries = []
    for factor in a_scale_factors:
        if factor <= 0:
            raise ValueError("scale factors must be positive")
        cm = base_cm.with_coupling_scaled(factor)
        grid = default_grid(cm, margin, step) if f_grid is None else f_grid
        pts = frequency_sweep(cm, exc_template, rect, bf_policy, grid, jobs=jobs, **sim_kw)
        try:
            rep, err = bandwidth_3db(pts, short_circuit_frequency(cm)), None
        except BandwidthError as exc:
            rep, err = getattr(exc, "report", None), str(exc)
        entries.append(KappaSweepEntry(factor, coupling_coefficient(cm), pts, rep, err))
    return entries
