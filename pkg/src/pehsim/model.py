"""Lumped equivalent circuit of a cantilever piezoelectric harvester.

The mechanical branch is a series R_m-L_m-C_m loop driven by the force-analog
source V_F.  It couples through an ideal 1:A transformer to the plate
capacitance C_P at the electrical output terminals.  With I_S the mechanical
(velocity-analog) current and V_out the voltage across C_P::

    L_m dI_S/dt + R_m I_S + V_Cm = V_F(t) - A V_out
    C_m dV_Cm/dt = I_S
    C_P dV_out/dt = A I_S - I_load

All analysis here is closed form or frequency domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

TWO_PI = 2.0 * math.pi

# Table-1 calibration targets for the reference device.
REFERENCE_F_SC = 673.00
REFERENCE_F_OC = 696.00
REFERENCE_Q_ML = REFERENCE_F_SC / 17.0


class ModelError(ValueError):
    """Invalid compact-model input."""


class NoZeroReactanceError(ModelError):
    """Raised when the device is too damped to show two zero-reactance frequencies."""


@dataclass(frozen=True)
class CompactModel:
    """Five-parameter equivalent circuit.

    L_m, C_m and R_m are the electrical analogs of effective mass, compliance
    and damping.  A is the transformer ratio (force per volt) and C_P the
    plate capacitance.  A may be zero to represent an uncoupled beam.
    """

    L_m: float
    C_m: float
    R_m: float
    A: float
    C_P: float

    def __post_init__(self):
        for name in ("L_m", "C_m", "R_m", "C_P"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ModelError(f"{name} must be a positive finite number, got {value!r}")
        if not (math.isfinite(self.A) and self.A >= 0):
            raise ModelError(f"A must be a non-negative finite number, got {self.A!r}")

    @classmethod
    def from_frequencies(cls, f_sc: float, f_oc: float, q_ml: float, A: float, C_P: float) -> CompactModel:
        """Build a model from its short/open-circuit resonances and matched-load Q."""
        if not 0 < f_sc <= f_oc:
            raise ModelError("need 0 < f_sc <= f_oc")
        if q_ml <= 0 or A <= 0 or C_P <= 0:
            raise ModelError("q_ml, A and C_P must be positive")
        k2 = (f_oc**2 - f_sc**2) / f_sc**2
        w_sc = TWO_PI * f_sc
        C_m = k2 * C_P / A**2
        L_m = 1.0 / (w_sc**2 * C_m)
        # matched resistor doubles the series damping: Q_ML = w L_m / (2 R_m)
        R_m = w_sc * L_m / (2.0 * q_ml)
        return cls(L_m=L_m, C_m=C_m, R_m=R_m, A=A, C_P=C_P)

    def with_coupling_scaled(self, factor: float) -> CompactModel:
        """Copy with A multiplied by ``factor`` and every other parameter kept."""
        if factor < 0:
            raise ModelError("scale factor must be non-negative")
        return replace(self, A=self.A * factor)

    def to_dict(self) -> dict:
        return {"L_m": self.L_m, "C_m": self.C_m, "R_m": self.R_m, "A": self.A, "C_P": self.C_P}

    @classmethod
    def from_dict(cls, data: dict) -> CompactModel:
        missing = [k for k in ("L_m", "C_m", "R_m", "A", "C_P") if k not in data]
        if missing:
            raise ModelError(f"compact model is missing field(s): {', '.join(missing)}")
        try:
            return cls(**{k: float(data[k]) for k in ("L_m", "C_m", "R_m", "A", "C_P")})
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ModelError):
                raise
            raise ModelError(f"compact model field is not numeric: {exc}") from None


@dataclass(frozen=True)
class Excitation:
    """Sinusoidal drive V_F(t) = source_amplitude * sin(2 pi f t)."""

    frequency: float
    source_amplitude: float = 1.0
    accel_amplitude: float = 9.81

    def __post_init__(self):
        if not (math.isfinite(self.frequency) and self.frequency > 0):
            raise ModelError(f"frequency must be positive, got {self.frequency!r}")
        if not (math.isfinite(self.source_amplitude) and self.source_amplitude >= 0):
            raise ModelError("source_amplitude must be non-negative")

    def at(self, frequency: float) -> Excitation:
        return replace(self, frequency=frequency)


@dataclass(frozen=True)
class FrequencyAnalysis:
    f_sc: float
    f_oc: float
    f_zr1: float
    f_zr2: float
    r_ml: float
    q_ml: float
    kappa_e2: float

    def to_dict(self) -> dict:
        return {
            "f_sc_hz": self.f_sc,
            "f_zr1_hz": self.f_zr1,
            "f_zr2_hz": self.f_zr2,
            "f_oc_hz": self.f_oc,
            "r_ml_ohms": self.r_ml,
            "q_ml": self.q_ml,
            "kappa_e2": self.kappa_e2,
        }


def reference_model(A: float = 1.0, C_P: float = 200e-9) -> CompactModel:
    """Reference device calibrated to f_sc = 673 Hz, f_oc = 696 Hz and Q_ML = 673/17.

    C_P sets the impedance scale and V_F/A the voltage scale.  The defaults
    give ~1 V open-circuit swings for V_F = 1 V, which is what makes diode
    drops of a few hundred mV matter, and a C_P close to the PPA2014-like
    stack in :mod:`pehsim.design`.  Powers are meant to be read relative to
    :func:`optimum_power`.
    """
    return CompactModel.from_frequencies(REFERENCE_F_SC, REFERENCE_F_OC, REFERENCE_Q_ML, A, C_P)


def short_circuit_frequency(cm: CompactModel) -> float:
    return 1.0 / (TWO_PI * math.sqrt(cm.L_m * cm.C_m))


def coupling_coefficient(cm: CompactModel) -> float:
    """kappa_e^2 = A^2 C_m / C_P."""
    return cm.A**2 * cm.C_m / cm.C_P


def open_circuit_frequency(cm: CompactModel) -> float:
    return short_circuit_frequency(cm) * math.sqrt(1.0 + coupling_coefficient(cm))


def matched_load_q(cm: CompactModel) -> float:
    return TWO_PI * short_circuit_frequency(cm) * cm.L_m / (2.0 * cm.R_m)


def _check_freq(f):
    f = np.asarray(f, dtype=float)
    if np.any(~np.isfinite(f)) or np.any(f <= 0):
        raise ModelError("frequency must be positive")
    return f


def mechanical_impedance(cm: CompactModel, f):
    """Series R_m + jwL_m + 1/(jwC_m) of the mechanical branch."""
    w = TWO_PI * _check_freq(f)
    return cm.R_m + 1j * (w * cm.L_m - 1.0 / (w * cm.C_m))


def thevenin_impedance(cm: CompactModel, f):
    """Impedance looking into the output terminals (scalar or array ``f``)."""
    f = _check_freq(f)
    if cm.A == 0:
        raise ModelError("thevenin impedance needs A > 0")
    w = TWO_PI * f
    z_mech = mechanical_impedance(cm, f) / cm.A**2
    y = 1j * w * cm.C_P + 1.0 / z_mech
    z = np.asarray(1.0 / y)
    return z if z.ndim else complex(z)


def zero_reactance_frequencies(cm: CompactModel, n_grid: int = 2000, rtol: float = 1e-10) -> tuple[float, float]:
    """The two frequencies where Im(Z_th) = 0, lower root first.

    Scans a log grid over (0.5 f_sc, 1.5 f_oc) for sign changes and refines
    each with Brent's method.
    """
    if cm.A == 0:
        raise NoZeroReactanceError("no real zero-reactance frequencies: device is uncoupled")
    f_lo = 0.5 * short_circuit_frequency(cm)
    f_hi = 1.5 * open_circuit_frequency(cm)
    grid = np.geomspace(f_lo, f_hi, n_grid)
    x = np.imag(thevenin_impedance(cm, grid))
    idx = np.nonzero(np.signbit(x[:-1]) != np.signbit(x[1:]))[0]
    if len(idx) < 2:
        raise NoZeroReactanceError("no real zero-reactance frequencies (device overdamped for its coupling)")

    def reactance(f):
        return thevenin_impedance(cm, f).imag

    roots = [brentq(reactance, grid[i], grid[i + 1], xtol=1e-300, rtol=rtol, maxiter=500) for i in idx]
    return roots[0], roots[-1]


def bf_phase(cm: CompactModel, f):
    """Lead of the conjugate-matched output voltage over V_F, in radians.

    atan((1/(w C_m) - w L_m) / R_m): positive below f_sc, zero at f_sc.
    """
    w = TWO_PI * _check_freq(f)
    phi = np.asarray(np.arctan((1.0 / (w * cm.C_m) - w * cm.L_m) / cm.R_m))
    return phi if phi.ndim else float(phi)


def optimum_power(cm: CompactModel, exc: Excitation) -> float:
    """Available power V_F^2 / (8 R_m) for a peak-amplitude source."""
    return exc.source_amplitude**2 / (8.0 * cm.R_m)


def matched_load(cm: CompactModel, f) -> tuple:
    """Conjugate-matched load (R_load, X_load) at frequency ``f``."""
    z = thevenin_impedance(cm, f)
    return np.real(z) + 0.0, -np.imag(z) + 0.0


def thevenin_voltage(cm: CompactModel, exc: Excitation) -> complex:
    """Open-circuit output phasor, referenced to V_F as a sine of zero phase."""
    if cm.A == 0:
        return 0j
    w = TWO_PI * exc.frequency
    z_mech = mechanical_impedance(cm, exc.frequency)
    # unloaded: V_F = Z_m I + A V, A I = jw C_P V
    return complex(cm.A * exc.source_amplitude / (z_mech * 1j * w * cm.C_P + cm.A**2))


def open_circuit_amplitude(cm: CompactModel, exc: Excitation) -> float:
    return abs(thevenin_voltage(cm, exc))


def frequency_analysis(cm: CompactModel) -> FrequencyAnalysis:
    f_zr1, f_zr2 = zero_reactance_frequencies(cm)
    return FrequencyAnalysis(
        f_sc=short_circuit_frequency(cm),
        f_oc=open_circuit_frequency(cm),
        f_zr1=f_zr1,
        f_zr2=f_zr2,
        r_ml=float(np.real(thevenin_impedance(cm, f_zr1))),
        q_ml=matched_load_q(cm),
        kappa_e2=coupling_coefficient(cm),
    )
