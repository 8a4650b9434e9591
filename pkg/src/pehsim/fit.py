"""Compact-model extraction from resistive-load voltage sweeps.

The forward model is the phasor solution of the equivalent circuit with a
resistor across C_P.  Parameters are fitted by minimising the squared
log-amplitude error with a Hooke-Jeeves pattern search (coordinate
exploration with adaptive step plus pattern moves) in log coordinates of
(f_sc, kappa_e^2, Q_m, C_P, A), which are far better conditioned than the raw
(L_m, C_m, R_m) triple.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import TWO_PI, CompactModel, Excitation, ModelError

MIN_LOADS = 2
MIN_FREQUENCIES = 10
MAX_ITER = 10_000
CSV_FIELDS = ("frequency_hz", "load_ohms", "voltage_volts")


class FitError(RuntimeError):
    pass


class InsufficientDataError(FitError, ValueError):
    pass


class NonConvergentFitError(FitError):
    def __init__(self, msg, history=None, model=None):
        super().__init__(msg)
        self.history = history or []
        self.model = model


@dataclass(frozen=True)
class Measurement:
    frequency: float
    load_resistance: float
    voltage_amplitude: float

    def __post_init__(self):
        for name in ("frequency", "load_resistance", "voltage_amplitude"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ModelError(f"measurement {name} must be positive, got {value!r}")


@dataclass
class FitResult:
    model: CompactModel
    residual: float
    iterations: int
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "rms_log_residual": self.residual, "iterations": self.iterations}


def _voltage(L_m, C_m, R_m, A, C_P, v_f, r, f):
    w = TWO_PI * f
    z_m = R_m + 1j * (w * L_m - 1.0 / (w * C_m))
    y_e = 1j * w * C_P + 1.0 / r
    return np.abs(A * v_f / (z_m * y_e + A**2))


def predict_voltage(cm: CompactModel, exc: Excitation, r_load, f):
    """|V_out| with a resistor ``r_load`` across the output, at frequency ``f``.

    Broadcasts over ``r_load`` and ``f``.  ``exc.frequency`` is ignored.
    """
    r = np.asarray(r_load, dtype=float)
    if np.any(~(r > 0)):
        raise ModelError("r_load must be > 0")
    f = np.asarray(f, dtype=float)
    v = _voltage(cm.L_m, cm.C_m, cm.R_m, cm.A, cm.C_P, exc.source_amplitude, r, f)
    return v if v.ndim else float(v)


def _to_theta(cm: CompactModel) -> np.ndarray:
    w = 1.0 / math.sqrt(cm.L_m * cm.C_m)
    k2 = cm.A**2 * cm.C_m / cm.C_P
    q = w * cm.L_m / cm.R_m
    return np.log([w / TWO_PI, k2, q, cm.C_P, cm.A])


def _from_theta(theta) -> tuple:
    f_sc, k2, q, c_p, a = np.exp(theta)
    w = TWO_PI * f_sc
    c_m = k2 * c_p / a**2
    l_m = 1.0 / (w**2 * c_m)
    return l_m, c_m, w * l_m / q, a, c_p


def _check_data(data) -> tuple:
    data = list(data)
    loads = {m.load_resistance for m in data}
    freqs = {m.frequency for m in data}
    if len(loads) < MIN_LOADS or len(freqs) < MIN_FREQUENCIES:
        raise InsufficientDataError(
            f"insufficient data: need >= {MIN_LOADS} load resistances and >= {MIN_FREQUENCIES} frequencies, "
            f"got {len(loads)} and {len(freqs)}"
        )
    f = np.array([m.frequency for m in data])
    r = np.array([m.load_resistance for m in data])
    logv = np.log([m.voltage_amplitude for m in data])
    return f, r, logv


def fit_compact_model(
    data,
    exc: Excitation,
    initial_guess: CompactModel,
    *,
    initial_step: float = 0.1,
    step_tol: float = 1e-10,
    max_iter: int = MAX_ITER,
) -> tuple[CompactModel, float]:
    """Least-squares log-amplitude fit; returns (model, RMS log residual).

    See :func:`fit_compact_model_detailed` for the iteration history.
    """
    res = fit_compact_model_detailed(
        data, exc, initial_guess, initial_step=initial_step, step_tol=step_tol, max_iter=max_iter
    )
    return res.model, res.residual


def fit_compact_model_detailed(
    data,
    exc: Excitation,
    initial_guess: CompactModel,
    *,
    initial_step: float = 0.1,
    step_tol: float = 1e-10,
    max_iter: int = MAX_ITER,
) -> FitResult:
    f, r, logv = _check_data(data)
    if initial_guess.A <= 0:
        raise ModelError("initial guess needs A > 0")
    v_f = exc.source_amplitude

    def cost(theta):
        with np.errstate(all="ignore"):
            pred = _voltage(*_from_theta(theta), v_f, r, f)
            err = np.log(pred) - logv
        c = float(err @ err)
        return c if math.isfinite(c) else math.inf

    def explore(base, c_base, step):
        x, c = base.copy(), c_base
        for i in range(len(x)):
            for sign in (1.0, -1.0):
                trial = x.copy()
                trial[i] += sign * step[i]
                c_trial = cost(trial)
                if c_trial < c:
                    x, c = trial, c_trial
                    break
        return x, c

    x = _to_theta(initial_guess)
    c = cost(x)
    step = np.full(x.size, initial_step)
    history = [math.sqrt(c / f.size)]
    for it in range(1, max_iter + 1):
        if step.max() < step_tol:
            break
        x_new, c_new = explore(x, c, step)
        if c_new < c:
            # pattern moves: keep stepping along the successful direction
            while True:
                x_pat, c_pat = explore(x_new + (x_new - x), c_new, step)
                x, c = x_new, c_new
                if c_pat < c_new:
                    x_new, c_new = x_pat, c_pat
                else:
                    break
            step *= 2.0
        else:
            step *= 0.5
        history.append(math.sqrt(c / f.size))
    else:
        raise NonConvergentFitError(
            f"non-convergent fit: step {step.max():.3g} above {step_tol:g} after {max_iter} iterations",
            history,
            CompactModel(*_from_theta(x)),
        )
    return FitResult(CompactModel(*_from_theta(x)), history[-1], len(history) - 1, history)


def synthetic_measurements(cm: CompactModel, exc: Excitation, loads, freqs, noise: float = 0.0, rng=None):
    """Measurements predicted by ``cm``, optionally with multiplicative noise."""
    rng = np.random.default_rng(rng)
    out = []
    for r in loads:
        v = np.asarray(predict_voltage(cm, exc, r, np.asarray(freqs, dtype=float)))
        if noise:
            v = v * (1.0 + noise * rng.standard_normal(v.shape))
        out.extend(Measurement(float(fi), float(r), float(vi)) for fi, vi in zip(freqs, v))
    return out


def load_measurements(path) -> list[Measurement]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        missing = [k for k in CSV_FIELDS if k not in (reader.fieldnames or [])]
        if missing:
            raise ModelError(f"{path}: missing column(s) {', '.join(missing)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(Measurement(*(float(row[k]) for k in CSV_FIELDS)))
            except (TypeError, ValueError) as exc:
                raise ModelError(f"{path}: data row {lineno}: {exc}") from None
        return out


def save_measurements(path, data) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for m in data:
            writer.writerow([repr(m.frequency), repr(m.load_resistance), repr(m.voltage_amplitude)])
