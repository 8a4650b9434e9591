"""Time-domain steady-state simulation of the rectifier circuits.

The DCRS network (bridge rectifier into a constant-voltage storage cell, with
an optional bias-flip switch across C_P) is linear between switching events.
Each topology is propagated in closed form::

    x(t) = V exp(Lambda (t - t0)) V^-1 (x0 - x_p(t0)) + x_p(t)

with x_p the sinusoidal (plus constant) particular solution.  Events are
found on a fixed step grid and refined by bisection:

* open bridge: |v_out| reaches v_rect + 2 V_d (diode turn-on)
* conducting bridge: I_S crosses zero (diode turn-off)
* bias flip: scheduled twice per period, v_out <- -gamma v_out

The periodic orbit is found by Newton shooting on the one-period map, with
plain cycle marching as the fallback.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .model import (
    TWO_PI,
    CompactModel,
    Excitation,
    bf_phase,
    matched_load,
    open_circuit_amplitude,
    open_circuit_frequency,
)

VARIANTS = ("ideal", "diode_bridge", "smart")

# per-cycle statistics columns
_ST_STORE, _ST_DIODE, _ST_SOURCE, _ST_RLOSS, _ST_FLIP = 0, 1, 2, 3, 4
_ST_E0, _ST_E1, _ST_VBF, _ST_NFLIP, _ST_VPEAK = 5, 6, 7, 8, 9
_N_STATS = 10

# kernel parameter slots
_P_R, _P_L, _P_CM, _P_CP, _P_A, _P_VF, _P_W = 0, 1, 2, 3, 4, 5, 6
_P_THR, _P_VRECT, _P_VD2, _P_GAMMA, _P_THETA, _P_H, _P_BF = 7, 8, 9, 10, 11, 12, 13

EV_NONE, EV_DIODE_ON, EV_DIODE_OFF, EV_FAIL = 0, 1, 2, -1

_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)


class SimulationError(RuntimeError):
    pass


class NonConvergentError(SimulationError):
    pass


class EventLocationError(SimulationError):
    pass


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RectifierModel:
    """Bridge model: ideal switch plus a constant forward drop per diode.

    ``ideal`` and ``smart`` both conduct with zero drop; ``smart`` stands for
    a synchronous switching bridge.
    """

    variant: str = "ideal"
    diode_drop: float = 0.3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown rectifier variant {self.variant!r}; expected one of {VARIANTS}")
        if not (math.isfinite(self.diode_drop) and self.diode_drop >= 0):
            raise InvalidConfigError("diode_drop must be >= 0")

    @property
    def drop(self) -> float:
        return self.diode_drop if self.variant == "diode_bridge" else 0.0


@dataclass(frozen=True)
class BiasFlipConfig:
    """Bias-flip switch settings.

    ``flip_ratio`` is the post-flip voltage magnitude as a fraction of the
    pre-flip one, so a flip keeps ``flip_ratio**2`` of the C_P energy.
    ``phase`` is the lead of the matched-load output voltage over V_F; the flips
    fire on that voltage's zero crossings, i.e. where the phase of V_F is
    ``-phase`` and ``pi - phase``.
    """

    enabled: bool = True
    flip_ratio: float = 0.82
    phase: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.flip_ratio <= 1.0:
            raise InvalidConfigError("flip_ratio must lie in [0, 1]")

    @classmethod
    def for_frequency(cls, cm: CompactModel, f: float, flip_ratio: float = 0.82, enabled: bool = True) -> BiasFlipConfig:
        return cls(enabled=enabled, flip_ratio=flip_ratio, phase=bf_phase(cm, f))

    @classmethod
    def from_efficiency(cls, efficiency: float, convention: str = "voltage", **kw) -> BiasFlipConfig:
        """Map a quoted BF efficiency to a flip ratio.

        ``voltage``: the efficiency is the voltage ratio itself.
        ``energy``: the efficiency is the retained energy, ratio = sqrt(eff).
        """
        if convention == "voltage":
            return cls(flip_ratio=efficiency, **kw)
        if convention == "energy":
            return cls(flip_ratio=math.sqrt(efficiency), **kw)
        raise InvalidConfigError(f"unknown efficiency convention {convention!r}")

    def flip_angle(self) -> float:
        """Phase of V_F, in [0, pi), at which the first flip of a period fires."""
        return (-self.phase) % math.pi


DISABLED_BF = BiasFlipConfig(enabled=False, flip_ratio=1.0)


@dataclass(frozen=True)
class SimState:
    i_s: float
    v_cm: float
    v_out: float
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.i_s, self.v_cm, self.v_out])


@dataclass(frozen=True)
class EnergyAudit:
    """Energy flows over one steady-state cycle (J)."""

    source: float
    resistive: float
    storage: float
    diode: float
    flip: float
    stored_change: float

    @property
    def residual(self) -> float:
        return self.source - (self.resistive + self.storage + self.diode + self.flip + self.stored_change)

    @property
    def relative_residual(self) -> float:
        return abs(self.residual) / self.source if self.source > 0 else abs(self.residual)


@dataclass(frozen=True)
class Waveform:
    t: np.ndarray
    v_out: np.ndarray
    i_s: np.ndarray
    flip: np.ndarray

    def rows(self):
        for row in zip(self.t, self.v_out, self.i_s, self.flip):
            yield float(row[0]), float(row[1]), float(row[2]), int(row[3])


@dataclass(frozen=True)
class SteadyStateResult:
    avg_power: float
    v_bf: float
    v_peak: float
    waveform: Waveform = field(repr=False)
    cycles_run: int
    converged: bool
    audit: EnergyAudit
    v_rect: float = 0.0
    phase: float | None = None


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _prop(lam, V, Vi, c, d, w, x0, t0, t, out):
    n = lam.shape[0]
    e0 = np.exp(1j * w * t0)
    e1 = np.exp(1j * w * t)
    y = np.empty(n, np.complex128)
    for k in range(n):
        acc = 0j
        for m in range(n):
            acc += Vi[k, m] * (x0[m] - ((c[m] * e0).imag + d[m]))
        y[k] = acc * np.exp(lam[k] * (t - t0))
    for m in range(n):
        acc = 0j
        for k in range(n):
            acc += V[m, k] * y[k]
        out[m] = acc.real + (c[m] * e1).imag + d[m]


@numba.njit(cache=True)
def _stored_energy(x, p):
    return 0.5 * p[_P_L] * x[0] ** 2 + 0.5 * p[_P_CM] * x[1] ** 2 + 0.5 * p[_P_CP] * x[2] ** 2


@numba.njit(cache=True)
def _settle(x, thr):
    """Bridge state implied by x; clamps v_out onto the rail when conducting."""
    if thr <= 0.0:
        x[2] = 0.0
        return 1 if x[0] >= 0.0 else -1
    if abs(x[2]) >= thr * (1.0 - 1e-12):
        s = 1 if x[2] > 0 else -1
        x[2] = s * thr
        if s * x[0] > 0.0:
            return s
        return 0
    return 0


@numba.njit(cache=True)
def _advance(mode, x, ta, tlim, p, lo, Vo, Vio, co, lc, Vc, Vic, cc, gl_x, gl_w, acc, samp_t, samp_x, samp_pos):
    """Propagate one topology from ta towards tlim, stopping at the first event.

    Mutates x in place.  Returns (event code, new time, direction of the
    conducting rail for diode-on events).
    """
    w = p[_P_W]
    thr = p[_P_THR]
    h = p[_P_H]
    A = p[_P_A]
    R = p[_P_R]
    VF = p[_P_VF]
    T = TWO_PI / w
    if mode == 0:
        lam, V, Vi, c = lo, Vo, Vio, co
        n = 3
        d = np.zeros(3)
        x0 = x.copy()
    else:
        lam, V, Vi, c = lc, Vc, Vic, cc
        n = 2
        d = np.zeros(2)
        d[1] = -A * mode * thr
        x0 = x[:2].copy()
    v_fixed = x[2]
    xs = x0.copy()
    xq = np.empty(n)
    tk = ta
    code = EV_NONE
    direction = 0
    te = tlim
    while tk < tlim:
        tn = min(tk + h, tlim)
        _prop(lam, V, Vi, c, d, w, x0, ta, tn, xs)
        hit = False
        if mode == 0:
            if abs(xs[2]) > thr:
                hit = True
                direction = 1 if xs[2] > 0 else -1
                code = EV_DIODE_ON
        elif thr > 0.0 and mode * xs[0] < 0.0:
            hit = True
            code = EV_DIODE_OFF
        if hit:
            a = tk
            b = tn
            for _ in range(200):
                if b - a <= 1e-13 * T:
                    break
                mid = 0.5 * (a + b)
                _prop(lam, V, Vi, c, d, w, x0, ta, mid, xq)
                if mode == 0:
                    over = direction * xq[2] - thr > 0.0
                else:
                    over = mode * xq[0] < 0.0
                if over:
                    b = mid
                else:
                    a = mid
            if b - a > 1e-9 * T:
                return EV_FAIL, tk, 0
            te = b
            _prop(lam, V, Vi, c, d, w, x0, ta, te, xs)
            tn = te
        # quadrature of source power and R_m loss over [tk, tn]
        half = 0.5 * (tn - tk)
        mid = 0.5 * (tn + tk)
        for q in range(gl_x.shape[0]):
            tq = mid + half * gl_x[q]
            _prop(lam, V, Vi, c, d, w, x0, ta, tq, xq)
            iq = xq[0]
            acc[_ST_SOURCE] += gl_w[q] * half * VF * math.sin(w * tq) * iq
            acc[_ST_RLOSS] += gl_w[q] * half * R * iq * iq
        # waveform samples falling in [tk, tn)
        while samp_pos[0] < samp_t.shape[0] and samp_t[samp_pos[0]] < tn:
            if samp_t[samp_pos[0]] >= tk:
                _prop(lam, V, Vi, c, d, w, x0, ta, samp_t[samp_pos[0]], xq)
                samp_x[samp_pos[0], 0] = xq[0]
                samp_x[samp_pos[0], 1] = xq[1]
                samp_x[samp_pos[0], 2] = xq[2] if n == 3 else v_fixed
            samp_pos[0] += 1
        if n == 3:
            vabs = abs(xs[2])
        else:
            vabs = abs(v_fixed)
        if vabs > acc[_ST_VPEAK]:
            acc[_ST_VPEAK] = vabs
        tk = tn
        if hit:
            break
    if mode != 0:
        # rectified charge through the bridge: A * C_m * dV_Cm
        q = A * p[_P_CM] * mode * (xs[1] - x[1])
        acc[_ST_STORE] += p[_P_VRECT] * q
        acc[_ST_DIODE] += p[_P_VD2] * q
        x[0] = xs[0]
        x[1] = xs[1]
        x[2] = mode * thr
    else:
        x[0] = xs[0]
        x[1] = xs[1]
        x[2] = xs[2]
        if code == EV_DIODE_ON:
            x[2] = direction * thr
    return code, tk, direction


@numba.njit(cache=True)
def _run_cycles(x, n_cycles, p, lo, Vo, Vio, co, lc, Vc, Vic, cc, gl_x, gl_w, stats, samp_t, samp_x, flip_rec):
    """March ``n_cycles`` whole periods starting at phase 0 of V_F.

    Samples and flip records are written during the last cycle only.
    Returns 0 on success, -1 on an event location failure.
    """
    w = p[_P_W]
    T = TWO_PI / w
    thr = p[_P_THR]
    gamma = p[_P_GAMMA]
    theta = p[_P_THETA]
    n_flip = 0
    flip_times = np.empty(2)
    if p[_P_BF] > 0.5:
        n_flip = 2
        flip_times[0] = theta / w
        flip_times[1] = (theta + math.pi) / w
    samp_pos = np.zeros(1, np.int64)
    empty_t = np.empty(0)
    for cyc in range(n_cycles):
        last = cyc == n_cycles - 1
        acc = stats[cyc]
        for j in range(_N_STATS):
            acc[j] = 0.0
        mode = _settle(x, thr)
        acc[_ST_E0] = _stored_energy(x, p)
        st = samp_t if last else empty_t
        samp_pos[0] = 0
        t = 0.0
        fi = 0
        while True:
            tlim = flip_times[fi] if fi < n_flip else T
            code, t, direction = _advance(
                mode, x, t, tlim, p, lo, Vo, Vio, co, lc, Vc, Vic, cc, gl_x, gl_w, acc, st, samp_x, samp_pos
            )
            if code == EV_FAIL:
                return -1
            if code == EV_DIODE_ON:
                mode = direction
                continue
            if code == EV_DIODE_OFF:
                mode = 0
                continue
            if fi < n_flip:
                vpre = x[2]
                x[2] = -gamma * vpre
                acc[_ST_FLIP] += 0.5 * p[_P_CP] * (1.0 - gamma * gamma) * vpre * vpre
                acc[_ST_VBF] += abs(vpre)
                acc[_ST_NFLIP] += 1.0
                if last:
                    flip_rec[fi, 0] = t
                    flip_rec[fi, 1] = vpre
                    flip_rec[fi, 2] = x[2]
                    flip_rec[fi, 3] = x[0]
                fi += 1
                mode = _settle(x, thr)
            else:
                break
        acc[_ST_E1] = _stored_energy(x, p)
    return 0


# ---------------------------------------------------------------------------
# network assembly


def _eig_topology(M, b_sin, w):
    lam, V = np.linalg.eig(M)
    lam = lam.astype(np.complex128)
    V = V.astype(np.complex128)
    Vi = np.linalg.inv(V)
    c = np.linalg.solve(1j * w * np.eye(len(b_sin)) - M, b_sin.astype(np.complex128))
    return lam, V, Vi, c


class DcrsCircuit:
    """DCRS network for one (model, excitation, rectifier, bias flip, v_rect) point."""

    def __init__(
        self,
        cm: CompactModel,
        exc: Excitation,
        rect: RectifierModel,
        bf: BiasFlipConfig,
        v_rect: float,
        samples_per_period: int = 64,
    ):
        if not (math.isfinite(v_rect) and v_rect >= 0):
            raise InvalidConfigError(f"invalid config: v_rect must be >= 0, got {v_rect!r}")
        if samples_per_period < 8:
            raise InvalidConfigError("samples_per_period must be >= 8")
        self.cm, self.exc, self.rect, self.bf, self.v_rect = cm, exc, rect, bf, float(v_rect)
        w = TWO_PI * exc.frequency
        self.period = TWO_PI / w
        self.threshold = self.v_rect + 2.0 * rect.drop
        L, R, Cm, A, CP, VF = cm.L_m, cm.R_m, cm.C_m, cm.A, cm.C_P, exc.source_amplitude
        f_fast = max(exc.frequency, open_circuit_frequency(cm))
        step = min(self.period, 1.0 / f_fast) / samples_per_period
        self.params = np.array(
            [
                R, L, Cm, CP, A, VF, w,
                self.threshold, self.v_rect, 2.0 * rect.drop,
                bf.flip_ratio, bf.flip_angle(), step, 1.0 if bf.enabled else 0.0,
            ]
        )
        m_open = np.array([[-R / L, -1.0 / L, -A / L], [1.0 / Cm, 0.0, 0.0], [A / CP, 0.0, 0.0]])
        m_cond = np.array([[-R / L, -1.0 / L], [1.0 / Cm, 0.0]])
        self._open = _eig_topology(m_open, np.array([VF / L, 0.0, 0.0]), w)
        self._cond = _eig_topology(m_cond, np.array([VF / L, 0.0]), w)
        i_scale = max(VF / (2.0 * R), 1e-300)
        self.scale = np.array(
            [i_scale, i_scale / (w * Cm), max(self.threshold, open_circuit_amplitude(cm, exc), 1e-300)]
        )

    def run(self, x, n_cycles: int = 1, sample_times=None):
        """Advance ``x`` (modified copy returned) by whole periods.

        Returns (x_final, stats, samples, flip_records).
        """
        x = np.array(x, dtype=float)
        stats = np.zeros((n_cycles, _N_STATS))
        samp_t = np.empty(0) if sample_times is None else np.ascontiguousarray(sample_times, dtype=float)
        samp_x = np.full((len(samp_t), 3), np.nan)
        flip_rec = np.full((2, 4), np.nan)
        status = _run_cycles(x, n_cycles, self.params, *self._open, *self._cond, _GL_X, _GL_W, stats, samp_t, samp_x, flip_rec)
        if status != 0:
            raise EventLocationError("event location failure: could not isolate a switching event")
        return x, stats, samp_x, flip_rec

    def period_map(self, x) -> np.ndarray:
        return self.run(x, 1)[0]

    def audit(self, row) -> EnergyAudit:
        return EnergyAudit(
            source=row[_ST_SOURCE],
            resistive=row[_ST_RLOSS],
            storage=row[_ST_STORE],
            diode=row[_ST_DIODE],
            flip=row[_ST_FLIP],
            stored_change=row[_ST_E1] - row[_ST_E0],
        )


def advance_segment(circuit: DcrsCircuit, state: SimState, topology: str, dt_max: float):
    """Propagate one linear topology for at most ``dt_max`` seconds.

    ``topology`` is ``open``, ``conduct_pos`` or ``conduct_neg``.  Stops early
    at a diode event or at the next scheduled flip.  Returns the new state and
    one of ``none``, ``flip_due``, ``diode_on`` or ``diode_off``.
    """
    modes = {"open": 0, "conduct_pos": 1, "conduct_neg": -1}
    if topology not in modes:
        raise InvalidConfigError(f"unknown topology {topology!r}")
    mode = modes[topology]
    thr = circuit.threshold
    if mode != 0 and abs(abs(state.v_out) - thr) > 1e-9 * max(thr, 1.0):
        raise InvalidConfigError("conducting topology requires |v_out| at the conduction threshold")
    if mode == 0 and thr > 0 and abs(state.v_out) > thr * (1 + 1e-12):
        raise InvalidConfigError("open topology requires |v_out| <= conduction threshold")
    T = circuit.period
    n_per = math.floor(state.t / T)
    t_local = state.t - n_per * T
    t_lim = t_local + dt_max
    event = "none"
    if circuit.bf.enabled:
        w = TWO_PI / T
        theta = circuit.bf.flip_angle()
        for k in range(0, 5):
            tf = (theta + k * math.pi) / w
            if tf > t_local and tf <= t_lim:
                t_lim = tf
                event = "flip_due"
                break
    x = state.as_array()
    acc = np.zeros(_N_STATS)
    code, t_new, _ = _advance(
        mode, x, t_local, t_lim, circuit.params, *circuit._open, *circuit._cond, _GL_X, _GL_W, acc,
        np.empty(0), np.empty((0, 3)), np.zeros(1, np.int64),
    )
    if code == EV_FAIL:
        raise EventLocationError("event location failure: could not isolate a switching event")
    if code == EV_DIODE_ON:
        event = "diode_on"
    elif code == EV_DIODE_OFF:
        event = "diode_off"
    return SimState(float(x[0]), float(x[1]), float(x[2]), n_per * T + t_new), event


# ---------------------------------------------------------------------------
# steady state


def _residual(circuit, x, x1):
    return float(np.max(np.abs((x1 - x) / circuit.scale)))


def _jacobian(circuit, x, x1):
    s = circuit.scale
    J = np.empty((3, 3))
    for j in range(3):
        step = 1e-7 * s[j]
        if j == 2 and x[2] != 0.0:
            # perturb v_out away from the rail
            step = -math.copysign(step, x[2])
        xp = x.copy()
        xp[j] += step
        J[:, j] = (circuit.period_map(xp) - x1) / step
    return J


def _shoot(circuit: DcrsCircuit, x, max_iter=30, tol=1e-10):
    """Newton iteration on x = P(x) with a finite-difference Jacobian.

    Steps are accepted even when the residual grows, unless it grows past
    100x the best seen; then the best point is restored and a few periods
    are marched before retrying.  Returns (x, map evaluations, success).
    """
    evals = 1
    x1 = circuit.period_map(x)
    res = _residual(circuit, x, x1)
    best = (res, x, x1)
    for _ in range(max_iter):
        if res < tol:
            return x, evals, True
        J = _jacobian(circuit, x, x1)
        evals += 3
        try:
            dx = np.linalg.solve(J - np.eye(3), x - x1)
        except np.linalg.LinAlgError:
            dx = x1 - x
        x = x + dx
        x1 = circuit.period_map(x)
        evals += 1
        res = _residual(circuit, x, x1)
        if res < best[0]:
            best = (res, x, x1)
        elif not np.isfinite(res) or res > 100.0 * best[0]:
            _, x, x1 = best
            for _ in range(5):
                x, x1 = x1, circuit.period_map(x1)
            evals += 5
            res = _residual(circuit, x, x1)
    return best[1], evals, best[0] < tol


def _steady_state(circuit, initial, tol, streak, max_cycles, n_samples, warmup=3):
    """Periodic state by shooting, confirmed (or reached) by marching.

    Convergence needs ``streak`` consecutive cycle-to-cycle power changes below
    ``tol`` with the per-cycle stored-energy change also below ``tol`` of the
    source energy.
    """
    T = circuit.period
    x = np.zeros(3) if initial is None else np.asarray(initial, dtype=float).copy()
    cycles = 0
    if warmup:
        x = circuit.run(x, warmup)[0]
        cycles += warmup
    x, evals, _ = _shoot(circuit, x)
    cycles += evals

    sample_times = np.linspace(0.0, T, n_samples, endpoint=False)
    history = []
    converged = False
    while cycles < max_cycles or not history:
        batch = streak + 1 if not history else 1
        x, stats, samp, flips = circuit.run(x, batch, sample_times)
        cycles += batch
        for row in stats:
            drift = abs(row[_ST_E1] - row[_ST_E0])
            history.append((row[_ST_STORE] / T, drift <= tol * max(abs(row[_ST_SOURCE]), 1e-300) or drift == 0.0))
        last = stats[-1]
        if len(history) >= streak + 1:
            tail = np.array([h[0] for h in history[-(streak + 1):]])
            settled = all(h[1] for h in history[-streak:])
            ref = np.maximum(np.abs(tail[1:]), 1e-300)
            if settled and (np.all(np.abs(np.diff(tail)) <= tol * ref) or np.all(tail == 0.0)):
                converged = True
                break
        if len(history) % 50 == 0:
            x, evals, _ = _shoot(circuit, x, max_iter=10)
            cycles += evals
    return x, last, samp, flips, cycles, converged and cycles <= max_cycles


def _waveform(sample_times, samp, flips, t_offset=0.0) -> Waveform:
    t = list(sample_times)
    v = list(samp[:, 2])
    i = list(samp[:, 0])
    flag = [0] * len(t)
    rows = list(zip(t, v, i, flag))
    for rec in flips:
        if np.isfinite(rec[0]):
            rows.append((rec[0], rec[1], rec[3], 1))
            rows.append((rec[0], rec[2], rec[3], 1))
    rows.sort(key=lambda r: r[0])
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    return Waveform(arr[:, 0] + t_offset, arr[:, 1], arr[:, 2], arr[:, 3].astype(int))


def simulate_dcrs(
    cm: CompactModel,
    exc: Excitation,
    rect: RectifierModel,
    bf: BiasFlipConfig,
    v_rect: float,
    *,
    samples_per_period: int = 64,
    tol: float = 1e-3,
    streak: int = 3,
    max_cycles: int = 2000,
    n_samples: int = 256,
    initial=None,
    raise_on_failure: bool = True,
) -> SteadyStateResult:
    """Periodic steady state of the bias-flip rectifier feeding a storage cell.

    Starts from the all-zero state (or ``initial``) and reports the average
    power into the v_rect sink over the final cycle.
    """
    circuit = DcrsCircuit(cm, exc, rect, bf, v_rect, samples_per_period)
    T = circuit.period
    x, last, samp, flips, cycles, converged = _steady_state(circuit, initial, tol, streak, max_cycles, n_samples)
    if not converged and raise_on_failure:
        raise NonConvergentError(f"non-convergent: no periodic steady state within {max_cycles} cycles at f={exc.frequency:g} Hz")
    n_flip = last[_ST_NFLIP]
    sample_times = np.linspace(0.0, T, n_samples, endpoint=False)
    return SteadyStateResult(
        avg_power=float(last[_ST_STORE] / T),
        v_bf=float(last[_ST_VBF] / n_flip) if n_flip else 0.0,
        v_peak=float(max(last[_ST_VPEAK], np.nanmax(np.abs(samp[:, 2])) if len(samp) else 0.0)),
        waveform=_waveform(sample_times, samp, flips),
        cycles_run=cycles,
        converged=converged,
        audit=circuit.audit(last),
        v_rect=float(v_rect),
        phase=bf.phase if bf.enabled else None,
    )


# ---------------------------------------------------------------------------
# AC matched load


def _acml_system(cm: CompactModel, exc: Excitation):
    """State matrix, drive vector and load description for the conjugate load."""
    f = exc.frequency
    w = TWO_PI * f
    r_load, x_load = matched_load(cm, f)
    r_load, x_load = float(r_load), float(x_load)
    L, R, Cm, A, CP, VF = cm.L_m, cm.R_m, cm.C_m, cm.A, cm.C_P, exc.source_amplitude
    mech = [[-R / L, -1.0 / L, -A / L], [1.0 / Cm, 0.0, 0.0]]
    if abs(x_load) <= 1e-12 * r_load:
        M = np.array(mech + [[A / CP, 0.0, -1.0 / (r_load * CP)]])
        kind = "resistive"
    elif x_load > 0:
        Ll = x_load / w
        M = np.array(
            [row + [0.0] for row in mech]
            + [[A / CP, 0.0, 0.0, -1.0 / CP], [0.0, 0.0, 1.0 / Ll, -r_load / Ll]]
        )
        kind = "inductive"
    else:
        Cl = -1.0 / (w * x_load)
        g = 1.0 / r_load
        M = np.array(
            [row + [0.0] for row in mech]
            + [[A / CP, 0.0, -g / CP, g / CP], [0.0, 0.0, g / Cl, -g / Cl]]
        )
        kind = "capacitive"
    b = np.zeros(M.shape[0])
    b[0] = VF / L
    return M, b, r_load, kind


def _load_current(X, r_load, kind):
    if kind == "resistive":
        return X[:, 2] / r_load
    if kind == "inductive":
        return X[:, 3]
    return (X[:, 2] - X[:, 3]) / r_load


def simulate_acml(
    cm: CompactModel,
    exc: Excitation,
    *,
    tol: float = 1e-3,
    streak: int = 3,
    max_cycles: int = 2000,
    n_samples: int = 256,
    quad_intervals: int = 64,
) -> SteadyStateResult:
    """Steady state of the source driving its conjugate-matched linear load.

    The network is linear, so the periodic state is the fixed point of the
    affine one-period map, found by a single linear solve.  The reported
    power is the quadrature of R_load * i_load^2 over one period.
    """
    M, b, r_load, kind = _acml_system(cm, exc)
    w = TWO_PI * exc.frequency
    T = TWO_PI / w
    lam, V, Vi, c = _eig_topology(M, b, w)
    n = len(b)

    def particular(t):
        return np.imag(np.outer(np.exp(1j * w * np.atleast_1d(t)), c))

    def propagate(x0, ts):
        y0 = Vi @ (x0 - particular(0.0)[0])
        hom = np.real((np.exp(np.outer(np.atleast_1d(ts), lam)) * y0) @ V.T)
        return hom + particular(ts)

    # one-period map x -> E x + g
    E = np.real(V @ np.diag(np.exp(lam * T)) @ Vi)
    g = propagate(np.zeros(n), T)[0]
    cycles = 1
    try:
        x = np.linalg.solve(np.eye(n) - E, g)
    except np.linalg.LinAlgError:
        x = np.zeros(n)

    nodes = (np.arange(quad_intervals)[:, None] + 0.5 * (_GL_X[None, :] + 1.0)) * (T / quad_intervals)
    weights = np.tile(_GL_W * 0.5 * T / quad_intervals, quad_intervals)
    nodes = nodes.ravel()

    history = []
    converged = False
    while cycles < max_cycles:
        X = propagate(x, nodes)
        i_load = _load_current(X, r_load, kind)
        p_load = float(np.sum(weights * r_load * i_load**2) / T)
        source = float(np.sum(weights * exc.source_amplitude * np.sin(w * nodes) * X[:, 0]))
        r_loss = float(np.sum(weights * cm.R_m * X[:, 0] ** 2))
        x_end = propagate(x, T)[0]
        cycles += 1
        history.append(p_load)
        if len(history) >= streak + 1:
            tail = np.array(history[-(streak + 1):])
            if np.all(np.abs(np.diff(tail)) <= tol * np.maximum(np.abs(tail[1:]), 1e-300)) or np.all(tail == 0):
                converged = True
                break
        x = x_end
    if not converged:
        raise NonConvergentError(f"non-convergent: ACML did not settle within {max_cycles} cycles")

    ts = np.linspace(0.0, T, n_samples, endpoint=False)
    Xs = propagate(x, ts)
    v_out = Xs[:, 2]
    stored = _acml_energy(cm, x, kind, w, r_load, exc.frequency)
    stored_end = _acml_energy(cm, x_end, kind, w, r_load, exc.frequency)
    audit = EnergyAudit(
        source=source, resistive=r_loss, storage=p_load * T, diode=0.0, flip=0.0, stored_change=stored_end - stored
    )
    return SteadyStateResult(
        avg_power=p_load,
        v_bf=0.0,
        v_peak=float(np.max(np.abs(v_out))),
        waveform=Waveform(ts, v_out, Xs[:, 0], np.zeros(len(ts), dtype=int)),
        cycles_run=cycles,
        converged=converged,
        audit=audit,
        phase=fundamental_phase(ts, v_out, exc.frequency),
    )


def _acml_energy(cm, x, kind, w, r_load, f):
    e = 0.5 * cm.L_m * x[0] ** 2 + 0.5 * cm.C_m * x[1] ** 2 + 0.5 * cm.C_P * x[2] ** 2
    _, x_load = matched_load(cm, f)
    if kind == "inductive":
        e += 0.5 * (float(x_load) / w) * x[3] ** 2
    elif kind == "capacitive":
        e += 0.5 * (-1.0 / (w * float(x_load))) * x[3] ** 2
    return e


def fundamental_phase(t, v, f) -> float:
    """Phase (radians) of the first harmonic of v relative to sin(2 pi f t).

    ``t`` must sample whole periods uniformly.
    """
    w = TWO_PI * f
    a = np.mean(v * np.sin(w * t))
    b = np.mean(v * np.cos(w * t))
    return float(math.atan2(b, a))
