"""Command-line front end: ``pehsim {analyze,sweep,waveform,design,fit}``.

Configuration is one JSON file plus flag overrides (flags > file > defaults).
Every output carries the resolved configuration so a run can be repeated from
its artifacts.  Exit codes: 0 success, 1 usage or configuration error, 2
numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .design import StackError, compare, design_report, ppa2014_baseline, ppa2014_redesign, stack_from_dict
from .fit import FitError, InsufficientDataError, NonConvergentFitError, fit_compact_model_detailed, load_measurements
from .model import (
    TWO_PI,
    CompactModel,
    Excitation,
    ModelError,
    NoZeroReactanceError,
    bf_phase,
    frequency_analysis,
    matched_load,
    reference_model,
    short_circuit_frequency,
)
from .optimize import BandwidthError, OptimizationError, bandwidth_3db, frequency_sweep, optimal_v_rect
from .transient import BiasFlipConfig, InvalidConfigError, RectifierModel, SimulationError, simulate_dcrs

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

MODEL_SOURCES = ("model", "model_file", "reference", "design")
TOP_LEVEL_KEYS = set(MODEL_SOURCES) | {"excitation", "circuit", "grid", "jobs", "provenance", "fit"}
RECTIFIER_FLAGS = {"ideal": "ideal", "diode": "diode_bridge", "smart": "smart"}
STACK_PRESETS = {"ppa2014-baseline": ppa2014_baseline, "ppa2014-redesign": ppa2014_redesign}

DEFAULTS = {
    "excitation": {"frequency": None, "source_amplitude": 1.0, "accel_amplitude": 9.81},
    "circuit": {"rectifier": "smart", "diode_drop": 0.3, "bf": True, "flip_ratio": 0.82},
    "grid": None,
    "jobs": 1,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


def parse_grid(spec) -> dict:
    """'LO:HI:STEP' (or a mapping with lo/hi/step) to a validated dict."""
    if isinstance(spec, dict):
        try:
            lo, hi, step = (float(spec[k]) for k in ("lo", "hi", "step"))
        except KeyError as exc:
            raise UsageError(f"grid: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError):
            raise UsageError("grid: lo, hi and step must be numbers") from None
    else:
        parts = str(spec).split(":")
        if len(parts) != 3:
            raise UsageError(f"grid {spec!r}: expected F_LO:F_HI:STEP")
        try:
            lo, hi, step = (float(p) for p in parts)
        except ValueError:
            raise UsageError(f"grid {spec!r}: values must be numbers") from None
    if not (lo > 0 and step > 0 and math.isfinite(hi)):
        raise UsageError("grid: need F_LO > 0 and STEP > 0")
    if hi < lo:
        raise UsageError(f"grid: empty range {lo:g}:{hi:g}")
    return {"lo": lo, "hi": hi, "step": step}


def grid_points(grid: dict) -> np.ndarray:
    n = int(math.floor((grid["hi"] - grid["lo"]) / grid["step"] + 1e-9)) + 1
    return grid["lo"] + grid["step"] * np.arange(n)


def _load_json(path, what) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"{what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{what} {path}: top level must be an object")
    return data


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    raw = _load_json(args.config, "config") if getattr(args, "config", None) else {}
    unknown = sorted(set(raw) - TOP_LEVEL_KEYS)
    if unknown:
        raise UsageError(f"config: unknown field(s) {', '.join(unknown)}")
    sources = [k for k in MODEL_SOURCES if k in raw]
    if len(sources) > 1:
        raise UsageError(f"config: give exactly one model source, found {', '.join(sources)}")
    if sources:
        cfg[sources[0]] = raw[sources[0]]
        if sources[0] == "model_file":
            base = Path(args.config).parent
            cfg["model_file"] = str((base / raw["model_file"]).resolve())
    else:
        cfg["reference"] = {}
    for section in ("excitation", "circuit"):
        extra = raw.get(section, {})
        if not isinstance(extra, dict):
            raise UsageError(f"config: {section} must be an object")
        bad = sorted(set(extra) - set(DEFAULTS[section]))
        if bad:
            raise UsageError(f"config: unknown field(s) {', '.join(f'{section}.{k}' for k in bad)}")
        cfg[section].update(extra)
    if raw.get("grid") is not None:
        cfg["grid"] = parse_grid(raw["grid"])
    if "jobs" in raw:
        cfg["jobs"] = raw["jobs"]

    # flags override the file
    circuit = cfg["circuit"]
    if getattr(args, "rectifier", None):
        circuit["rectifier"] = RECTIFIER_FLAGS[args.rectifier]
    circuit["rectifier"] = RECTIFIER_FLAGS.get(circuit["rectifier"], circuit["rectifier"])
    if getattr(args, "diode_drop", None) is not None:
        circuit["diode_drop"] = args.diode_drop
    if getattr(args, "bf", None):
        circuit["bf"] = args.bf == "on"
    if getattr(args, "flip_ratio", None) is not None:
        circuit["flip_ratio"] = args.flip_ratio
    if getattr(args, "grid", None):
        cfg["grid"] = parse_grid(args.grid)
    if getattr(args, "jobs", None) is not None:
        cfg["jobs"] = args.jobs
    if getattr(args, "frequency", None) is not None:
        cfg["excitation"]["frequency"] = args.frequency
    if not (isinstance(cfg["jobs"], int) and cfg["jobs"] >= 1):
        raise UsageError("jobs must be a positive integer")
    return cfg


def build_model(cfg: dict) -> CompactModel:
    try:
        if "model" in cfg:
            if not isinstance(cfg["model"], dict):
                raise UsageError("config: model must be an object of L_m, C_m, R_m, A, C_P")
            return CompactModel.from_dict(cfg["model"])
        if "model_file" in cfg:
            data = _load_json(cfg["model_file"], "model file")
            return CompactModel.from_dict(data.get("model", data))
        if "design" in cfg:
            return _design_model(cfg["design"])
        ref = cfg.get("reference") or {}
        bad = sorted(set(ref) - {"A", "C_P"})
        if bad:
            raise UsageError(f"config: unknown field(s) {', '.join('reference.' + k for k in bad)}")
        return reference_model(**{k: float(v) for k, v in ref.items()})
    except ModelError as exc:
        raise UsageError(f"config: {exc}") from None


def _design_model(spec: dict) -> CompactModel:
    """Model from a layer stack plus a short-circuit resonance and Q_ML.

    The stack gives A, C_P and the stiffness (C_m = 1/k); f_sc fixes L_m and
    Q_ML fixes R_m.
    """
    for key in ("stack", "f_sc", "q_ml"):
        if key not in spec:
            raise UsageError(f"config: design.{key} is required")
    stack = _stack(spec["stack"])
    rep = design_report(stack)
    if rep.a_coupling <= 0:
        raise UsageError("config: design stack has no coupling (piezo layers on the neutral axis)")
    c_m = 1.0 / rep.k_total
    w = TWO_PI * float(spec["f_sc"])
    l_m = 1.0 / (w**2 * c_m)
    return CompactModel(l_m, c_m, w * l_m / (2.0 * float(spec["q_ml"])), rep.a_coupling, rep.c_p)


def _stack(spec):
    if isinstance(spec, str):
        if spec in STACK_PRESETS:
            return STACK_PRESETS[spec]()
        spec = _load_json(spec, "stack file")
    try:
        return stack_from_dict(spec)
    except (StackError, TypeError, ValueError) as exc:
        raise UsageError(f"stack: {exc}") from None


def build_circuit(cfg: dict):
    c = cfg["circuit"]
    try:
        rect = RectifierModel(c["rectifier"], float(c["diode_drop"]))
        bf = BiasFlipConfig(enabled=bool(c["bf"]), flip_ratio=float(c["flip_ratio"]) if c["bf"] else 1.0)
    except (InvalidConfigError, TypeError, ValueError) as exc:
        raise UsageError(f"config: circuit: {exc}") from None
    return rect, bf


def build_excitation(cfg: dict, frequency=None) -> Excitation:
    e = cfg["excitation"]
    f = frequency if frequency is not None else e["frequency"]
    try:
        return Excitation(float(f), float(e["source_amplitude"]), float(e["accel_amplitude"]))
    except (ModelError, TypeError, ValueError) as exc:
        raise UsageError(f"config: excitation: {exc}") from None


def default_grid_spec(cm: CompactModel) -> dict:
    fa = frequency_analysis(cm)
    return {"lo": float(math.floor(fa.f_sc - 60.0)), "hi": float(math.ceil(fa.f_oc + 60.0)), "step": 1.0}


# ---------------------------------------------------------------------------
# output


def _num(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _provenance(command: str, cfg: dict, extra=None) -> dict:
    out = {"tool": "pehsim", "version": __version__, "command": command, "config": cfg}
    if extra:
        out.update(extra)
    return out


def render_csv(header, rows, provenance: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# provenance: {json.dumps(provenance, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_num(v) for v in row])
    return buf.getvalue()


def render_json(payload: dict) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def emit(text: str, out) -> None:
    if out:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _sidecar(out, suffix):
    p = Path(out)
    return str(p.with_name(p.stem + suffix))


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(args, cfg) -> int:
    cm = build_model(cfg)
    fa = frequency_analysis(cm)
    grid = cfg["grid"] or default_grid_spec(cm)
    cfg["grid"] = grid
    f = grid_points(grid)
    phi = np.atleast_1d(bf_phase(cm, f))
    r_load, x_load = (np.atleast_1d(v) for v in matched_load(cm, f))
    prov = _provenance("analyze", cfg, {"model": cm.to_dict()})
    if args.format == "json":
        samples = [
            {"frequency_hz": float(a), "phi_rad": float(b), "r_load_ohms": float(c), "x_load_ohms": float(d)}
            for a, b, c, d in zip(f, phi, r_load, x_load)
        ]
        text = render_json({"provenance": prov, "analysis": fa.to_dict(), "phase_samples": samples})
    else:
        header = ["frequency_hz", "phi_rad", "r_load_ohms", "x_load_ohms"]
        prov["analysis"] = fa.to_dict()
        text = render_csv(header, zip(f, phi, r_load, x_load), prov)
    emit(text, args.out)
    if not args.out or args.format == "csv":
        _print_table(fa, sys.stderr if args.out is None else sys.stdout)
    return EXIT_OK


def _print_table(fa, stream) -> None:
    rows = [
        ("f_sc", fa.f_sc, "Hz"),
        ("f_zr1", fa.f_zr1, "Hz"),
        ("f_zr2", fa.f_zr2, "Hz"),
        ("f_oc", fa.f_oc, "Hz"),
        ("R_ML", fa.r_ml, "ohm"),
        ("Q_ML", fa.q_ml, ""),
        ("kappa_e^2", fa.kappa_e2, ""),
    ]
    for name, value, unit in rows:
        stream.write(f"{name:>10}  {value:14.6f} {unit}\n")


def cmd_sweep(args, cfg) -> int:
    cm = build_model(cfg)
    rect, bf = build_circuit(cfg)
    grid = cfg["grid"] or default_grid_spec(cm)
    cfg["grid"] = grid
    f = grid_points(grid)
    exc = build_excitation(cfg, frequency=float(f[0]))
    points = frequency_sweep(cm, exc, rect, bf, f, jobs=cfg["jobs"])
    if not any(p.ok for p in points):
        sys.stderr.write(f"sweep failed at every frequency: {points[0].error}\n")
        return EXIT_NUMERIC
    try:
        report, bw_error = bandwidth_3db(points, short_circuit_frequency(cm)).to_dict(), None
    except BandwidthError as exc:
        rep = getattr(exc, "report", None)
        report, bw_error = (rep.to_dict() if rep else None), str(exc)
    prov = _provenance("sweep", cfg, {"model": cm.to_dict()})
    bw = {"provenance": prov, "bandwidth": report, "error": bw_error}
    header = ["frequency_hz", "v_rect_volts", "power_watts", "normalized_power", "v_bf_volts", "error"]
    rows = [(p.frequency, p.best_v_rect, p.best_power, p.normalized_power, p.v_bf, p.error or "") for p in points]
    if args.format == "json":
        bw["points"] = [dict(zip(header, r)) for r in rows]
        emit(render_json(bw), args.out)
    else:
        emit(render_csv(header, rows, prov), args.out)
        if args.out:
            emit(render_json(bw), _sidecar(args.out, ".bandwidth.json"))
        else:
            sys.stderr.write(render_json(bw))
    if bw_error:
        sys.stderr.write(f"bandwidth: {bw_error}\n")
    return EXIT_OK


def cmd_waveform(args, cfg) -> int:
    cm = build_model(cfg)
    rect, bf = build_circuit(cfg)
    if cfg["excitation"]["frequency"] is None:
        cfg["excitation"]["frequency"] = short_circuit_frequency(cm)
    exc = build_excitation(cfg)
    f = exc.frequency
    if bf.enabled:
        bf = BiasFlipConfig(True, bf.flip_ratio, float(bf_phase(cm, f)))
    v_rect = args.v_rect
    if v_rect is None:
        v_rect, _ = optimal_v_rect(cm, exc, rect, bf)
    res = simulate_dcrs(cm, exc, rect, bf, v_rect)
    prov = _provenance(
        "waveform",
        cfg,
        {"model": cm.to_dict(), "v_rect_volts": v_rect, "avg_power_watts": res.avg_power, "v_bf_volts": res.v_bf},
    )
    header = ["t_seconds", "v_out_volts", "i_s_amperes", "flip_event_flag"]
    rows = list(res.waveform.rows())
    if args.format == "json":
        emit(render_json({"provenance": prov, "samples": [dict(zip(header, r)) for r in rows]}), args.out)
    else:
        emit(render_csv(header, rows, prov), args.out)
    return EXIT_OK


def cmd_design(args, cfg) -> int:
    stacks = [_stack(s) for s in args.stacks]
    if len(stacks) > 2:
        raise UsageError("design takes one stack, or two for a baseline/redesign comparison")
    reports = [design_report(s) for s in stacks]
    prov = {"tool": "pehsim", "version": __version__, "command": "design", "stacks": list(args.stacks)}
    payload = {"provenance": prov, "reports": [r.to_dict() for r in reports]}
    if len(reports) == 2:
        payload["comparison"] = compare(*reports)
    if args.format == "json" and not args.table:
        emit(render_json(payload), args.out)
        return EXIT_OK
    keys = [k for k in reports[0].to_dict() if k != "warnings"]
    header = ["quantity"] + (["baseline", "redesign", "ratio"] if len(reports) == 2 else ["value"])
    rows = []
    for k in keys:
        vals = [r.to_dict()[k] for r in reports]
        if len(vals) == 2:
            a, b = vals
            vals.append("" if isinstance(a, bool) else (b / a if a else math.inf))
        rows.append([k] + vals)
    if not args.table:
        emit(render_csv(header, rows, prov), args.out)
    else:
        lines = ["  ".join(f"{h:>18}" for h in header)]
        for row in rows:
            lines.append("  ".join(f"{row[0]:>18}" if i == 0 else f"{_fmt(v):>18}" for i, v in enumerate(row)))
        for i, r in enumerate(reports):
            lines.extend(f"warning[{i}]: {w}" for w in r.warnings)
        emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _fmt(v):
    if isinstance(v, (bool, str)):
        return str(v)
    return f"{float(v):.6g}"


def cmd_fit(args, cfg) -> int:
    try:
        data = load_measurements(args.data)
    except OSError as exc:
        raise UsageError(f"data {args.data}: {exc.strerror}") from None
    except ModelError as exc:
        raise UsageError(str(exc)) from None
    guess = build_model(cfg)
    exc_ = build_excitation(cfg, frequency=data[0].frequency if data else 1.0)
    try:
        res = fit_compact_model_detailed(data, exc_, guess)
    except InsufficientDataError as exc:
        raise UsageError(str(exc)) from None
    except NonConvergentFitError as exc:
        sys.stderr.write(f"{exc}\n")
        if args.history:
            sys.stderr.write(json.dumps(exc.history) + "\n")
        return EXIT_NUMERIC
    fit = {"rms_log_residual": res.residual, "iterations": res.iterations, "data": str(args.data)}
    if args.history:
        fit["residual_history"] = res.history
    payload = {
        "provenance": _provenance("fit", cfg, {"initial_guess": guess.to_dict()}),
        "model": res.model.to_dict(),
        "fit": fit,
        "excitation": cfg["excitation"],
    }
    emit(render_json(payload), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--out", metavar="PATH", help="output file (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"), default=None)
    circuit = _Parser(add_help=False)
    circuit.add_argument("--rectifier", choices=tuple(RECTIFIER_FLAGS))
    circuit.add_argument("--diode-drop", type=float, metavar="VOLTS")
    circuit.add_argument("--bf", choices=("on", "off"))
    circuit.add_argument("--flip-ratio", type=float, metavar="FLOAT")
    sweep = _Parser(add_help=False)
    sweep.add_argument("--grid", metavar="F_LO:F_HI:STEP")
    sweep.add_argument("--jobs", type=int, metavar="N")

    p = _Parser(prog="pehsim", description="Piezoelectric harvester with bias-flip rectifier: analysis and simulation.")
    p.add_argument("--version", action="version", version=f"pehsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    a = sub.add_parser("analyze", parents=[common], help="resonances, matched load and flip phase")
    a.add_argument("--grid", metavar="F_LO:F_HI:STEP")
    sub.add_parser("sweep", parents=[common, circuit, sweep], help="optimised power vs frequency and 3-dB bandwidth")
    w = sub.add_parser("waveform", parents=[common, circuit], help="steady-state cycle at one frequency")
    w.add_argument("--frequency", type=float, metavar="HZ")
    w.add_argument("--v-rect", type=float, metavar="VOLTS", help="storage voltage (default: optimised)")
    d = sub.add_parser("design", parents=[common], help="coupling of one layer stack, or compare two")
    d.add_argument("stacks", nargs="+", metavar="STACK", help=f"stack JSON file or preset ({', '.join(STACK_PRESETS)})")
    d.add_argument("--table", action="store_true", help="human-readable table instead of JSON/CSV")
    f = sub.add_parser("fit", parents=[common], help="extract a compact model from resistive-load sweeps")
    f.add_argument("data", metavar="DATA_CSV", help="columns frequency_hz, load_ohms, voltage_volts")
    f.add_argument("--guess", metavar="PATH", help="initial-guess config (alias of --config)")
    f.add_argument("--history", action="store_true", help="include the residual history")
    return p


COMMANDS = {"analyze": cmd_analyze, "sweep": cmd_sweep, "waveform": cmd_waveform, "design": cmd_design, "fit": cmd_fit}
DEFAULT_FORMAT = {"analyze": "json", "sweep": "csv", "waveform": "csv", "design": "json", "fit": "json"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.format is None:
        args.format = DEFAULT_FORMAT[args.command]
    if args.command == "fit" and args.guess:
        if args.config:
            parser.error("give --guess or --config, not both")
        args.config = args.guess
    try:
        cfg = resolve_config(args) if args.command != "design" else {}
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        sys.stderr.write(f"pehsim {args.command}: {exc}\n")
        return EXIT_USAGE
    except ValueError as exc:
        if isinstance(exc, (BandwidthError, NoZeroReactanceError)):
            sys.stderr.write(f"pehsim {args.command}: {exc}\n")
            return EXIT_NUMERIC
        sys.stderr.write(f"pehsim {args.command}: {exc}\n")
        return EXIT_USAGE
    except (SimulationError, OptimizationError, FitError, ArithmeticError) as exc:
        sys.stderr.write(f"pehsim {args.command}: numerical failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
