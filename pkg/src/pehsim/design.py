"""Coupling coefficient of composite piezoelectric cantilevers.

Bending stiffness uses the transformed-section Euler-Bernoulli model: each
layer contributes Y (W t^3/12 + W t e^2) about the composite neutral axis,
with e the offset of the layer centroid, and the tip-load stiffness is
3 (sum Y I) / L^3.  Layers are perfectly bonded.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

EPS0 = 8.8541878128e-12

ROLES = ("piezo", "structural", "electrode")

# Representative handbook values, not device data.  Edit or extend as needed.
MATERIALS = {
    "PZT-5H": {"youngs_modulus": 1.0 / 16.5e-12, "d31": -274e-12, "permittivity": 3400 * EPS0},
    "PZT-5A": {"youngs_modulus": 1.0 / 16.4e-12, "d31": -171e-12, "permittivity": 1700 * EPS0},
    "FR4": {"youngs_modulus": 22e9},
    "polyimide": {"youngs_modulus": 2.5e9},
    "copper": {"youngs_modulus": 117e9},
}

SHEAR_RISK_RATIO = 0.01
ASYMMETRY_TOLERANCE = 0.01


class StackError(ValueError):
    pass


class AsymmetricStackWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Layer:
    name: str
    thickness: float
    youngs_modulus: float
    role: str = "structural"
    d31: float | None = None
    permittivity: float | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise StackError(f"layer {self.name!r}: role must be one of {ROLES}")
        if not self.thickness > 0:
            raise StackError(f"layer {self.name!r}: thickness must be > 0")
        if not self.youngs_modulus > 0:
            raise StackError(f"layer {self.name!r}: youngs_modulus must be > 0")
        if self.role == "piezo":
            if self.d31 is None or self.permittivity is None or not self.permittivity > 0:
                raise StackError(f"piezo layer {self.name!r} needs d31 and a positive permittivity")
        elif self.d31 is not None or self.permittivity is not None:
            raise StackError(f"non-piezo layer {self.name!r} must not carry d31/permittivity")

    @classmethod
    def of(cls, material: str, thickness: float, role: str | None = None, name: str | None = None) -> Layer:
        """Layer built from an entry of :data:`MATERIALS`."""
        try:
            props = MATERIALS[material]
        except KeyError:
            raise StackError(f"unknown material {material!r}") from None
        if role is None:
            role = "piezo" if "d31" in props else ("electrode" if material == "copper" else "structural")
        return cls(name=name or material, thickness=thickness, role=role, **props)


@dataclass(frozen=True)
class LayerStack:
    """Bottom-to-top layers of a cantilever of width W and free length L."""

    layers: tuple
    width: float
    free_length: float
    wiring: str = "parallel"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise StackError("stack has no layers")
        if not (self.width > 0 and self.free_length > 0):
            raise StackError("width and free_length must be > 0")
        if self.wiring not in ("parallel", "series"):
            raise StackError("wiring must be 'parallel' or 'series'")
        n_piezo = sum(layer.role == "piezo" for layer in self.layers)
        if n_piezo not in (1, 2):
            raise StackError(f"stack needs one or two piezo layers, found {n_piezo}")

    @property
    def thickness(self) -> float:
        return sum(layer.thickness for layer in self.layers)

    def piezo_layers(self):
        return [layer for layer in self.layers if layer.role == "piezo"]

    def replace_layer(self, name: str, new: Layer | None) -> LayerStack:
        """Copy with every layer called ``name`` swapped for ``new`` (dropped if None)."""
        out = []
        for layer in self.layers:
            if layer.name == name:
                if new is not None:
                    out.append(new)
            else:
                out.append(layer)
        return replace(self, layers=tuple(out))


@dataclass(frozen=True)
class DesignReport:
    k_pe: float
    k_non_pe: float
    k_total: float
    non_pe_fraction: float
    b_pe: float
    a_coupling: float
    c_p: float
    kappa_e2: float
    neutral_axis: float
    shear_risk: bool = False
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "k_pe_n_per_m": self.k_pe,
            "k_non_pe_n_per_m": self.k_non_pe,
            "k_total_n_per_m": self.k_total,
            "non_pe_fraction": self.non_pe_fraction,
            "b_pe_m": self.b_pe,
            "a_coupling_n_per_v": self.a_coupling,
            "c_p_farads": self.c_p,
            "kappa_e2": self.kappa_e2,
            "neutral_axis_m": self.neutral_axis,
            "shear_risk": self.shear_risk,
            "warnings": list(self.warnings),
        }


def _centroids(stack: LayerStack):
    z, out = 0.0, []
    for layer in stack.layers:
        out.append(z + 0.5 * layer.thickness)
        z += layer.thickness
    return out


def neutral_axis(stack: LayerStack, warn: bool = True) -> float:
    """Height of the modulus-weighted centroid above the bottom face."""
    zc = _centroids(stack)
    num = sum(layer.youngs_modulus * layer.thickness * z for layer, z in zip(stack.layers, zc))
    den = sum(layer.youngs_modulus * layer.thickness for layer in stack.layers)
    z_na = num / den
    if warn and abs(z_na - 0.5 * stack.thickness) > ASYMMETRY_TOLERANCE * stack.thickness:
        warnings.warn(
            f"asymmetric stack: neutral axis {z_na:.4g} m is off the mid-plane by more than "
            f"{ASYMMETRY_TOLERANCE:.0%} of the thickness; using the computed axis",
            AsymmetricStackWarning,
            stacklevel=2,
        )
    return z_na


def stack_stiffness(stack: LayerStack) -> tuple[float, float]:
    """Tip stiffness contributions (k_pe, k_non_pe) in N/m."""
    z_na = neutral_axis(stack)
    W, L = stack.width, stack.free_length
    ei_pe = ei_non = 0.0
    for layer, z in zip(stack.layers, _centroids(stack)):
        t = layer.thickness
        ei = layer.youngs_modulus * (W * t**3 / 12.0 + W * t * (z - z_na) ** 2)
        if layer.role == "piezo":
            ei_pe += ei
        else:
            ei_non += ei
    return 3.0 * ei_pe / L**3, 3.0 * ei_non / L**3


def piezo_offset(stack: LayerStack) -> float:
    """b_PE: mean distance from the neutral axis to the piezo-layer centerlines."""
    z_na = neutral_axis(stack, warn=False)
    offsets = [abs(z - z_na) for layer, z in zip(stack.layers, _centroids(stack)) if layer.role == "piezo"]
    return sum(offsets) / len(offsets)


def coupling_term(stack: LayerStack) -> float:
    """A = 3 W Y_PE b_PE d31 / L for a parallel-wired bimorph.

    Each layer contributes half of that; parallel wiring adds the layer terms,
    series wiring passes one layer's share.
    """
    z_na = neutral_axis(stack, warn=False)
    W, L = stack.width, stack.free_length
    terms = [
        1.5 * W * layer.youngs_modulus * abs(z - z_na) * abs(layer.d31) / L
        for layer, z in zip(stack.layers, _centroids(stack))
        if layer.role == "piezo"
    ]
    if stack.wiring == "parallel":
        return sum(terms)
    return sum(terms) / len(terms)


def plate_capacitance(stack: LayerStack) -> float:
    caps = [layer.permittivity * stack.width * stack.free_length / layer.thickness for layer in stack.piezo_layers()]
    if stack.wiring == "parallel":
        return sum(caps)
    return 1.0 / sum(1.0 / c for c in caps)


def design_report(stack: LayerStack) -> DesignReport:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", AsymmetricStackWarning)
        k_pe, k_non = stack_stiffness(stack)
        z_na = neutral_axis(stack, warn=False)
    a = coupling_term(stack)
    c_p = plate_capacitance(stack)
    k = k_pe + k_non
    y_pe = max(layer.youngs_modulus for layer in stack.piezo_layers())
    shear = any(
        layer.role != "piezo" and layer.youngs_modulus < SHEAR_RISK_RATIO * y_pe for layer in stack.layers
    )
    notes = [str(w.message) for w in caught]
    if shear:
        notes.append("shear risk: a non-piezo layer is below 1% of the piezo modulus")
    for w in caught:
        warnings.warn(w.message, w.category, stacklevel=2)
    return DesignReport(
        k_pe=k_pe,
        k_non_pe=k_non,
        k_total=k,
        non_pe_fraction=k_non / k,
        b_pe=piezo_offset(stack),
        a_coupling=a,
        c_p=c_p,
        kappa_e2=a**2 / (k * c_p),
        neutral_axis=z_na,
        shear_risk=shear,
        warnings=notes,
    )


def compare(baseline: DesignReport, redesign: DesignReport) -> dict:
    """Redesign-vs-baseline deltas and ratios."""
    out = {}
    for key in ("kappa_e2", "non_pe_fraction", "a_coupling", "c_p", "k_total", "b_pe"):
        b, r = getattr(baseline, key), getattr(redesign, key)
        out[key] = {"baseline": b, "redesign": r, "delta": r - b, "ratio": r / b if b else math.inf}
    return out


# ---------------------------------------------------------------------------
# PPA2014-like stacks
#
# Approximate geometry for a commercial FR4-packaged PZT bimorph: 20.8 mm wide,
# 46 mm long with 5 mm clamped, 0.254 mm (10 mil) PZT wafers, half-ounce
# copper electrodes.  Layer thicknesses are assumptions, not datasheet values.

PPA_WIDTH = 20.8e-3
PPA_FREE_LENGTH = 46.0e-3 - 5.0e-3


def ppa2014_baseline(wiring: str = "parallel") -> LayerStack:
    """FR4 / Cu / PZT / Cu / FR4 core / Cu / PZT / Cu / FR4, 0.83 mm total."""
    outer, cu, pzt, core = 0.075e-3, 0.018e-3, 0.254e-3, 0.100e-3
    layers = (
        Layer.of("FR4", outer, name="outer"),
        Layer.of("copper", cu, name="electrode"),
        Layer.of("PZT-5H", pzt, name="piezo"),
        Layer.of("copper", cu, name="electrode"),
        Layer.of("FR4", core, name="center"),
        Layer.of("copper", cu, name="electrode"),
        Layer.of("PZT-5H", pzt, name="piezo"),
        Layer.of("copper", cu, name="electrode"),
        Layer.of("FR4", outer, name="outer"),
    )
    return LayerStack(layers, PPA_WIDTH, PPA_FREE_LENGTH, wiring)


def ppa2014_redesign(wiring: str = "parallel") -> LayerStack:
    """Same footprint; no copper, polyimide skins, 15 mil PZT, 0.7 mm FR4 core."""
    outer, pzt, core = 0.050e-3, 0.381e-3, 0.700e-3
    layers = (
        Layer.of("polyimide", outer, name="outer"),
        Layer.of("PZT-5H", pzt, name="piezo"),
        Layer.of("FR4", core, name="center"),
        Layer.of("PZT-5H", pzt, name="piezo"),
        Layer.of("polyimide", outer, name="outer"),
    )
    return LayerStack(layers, PPA_WIDTH, PPA_FREE_LENGTH, wiring)


# ---------------------------------------------------------------------------
# config files


def layer_from_dict(data: dict) -> Layer:
    data = dict(data)
    material = data.pop("material", None)
    if material is not None:
        base = Layer.of(material, float(data.pop("thickness")), role=data.pop("role", None), name=data.pop("name", None))
        overrides = {k: float(v) for k, v in data.items() if k in ("youngs_modulus", "d31", "permittivity")}
        return replace(base, **overrides)
    try:
        return Layer(
            name=str(data.get("name", "layer")),
            thickness=float(data["thickness"]),
            youngs_modulus=float(data["youngs_modulus"]),
            role=data.get("role", "structural"),
            d31=None if data.get("d31") is None else float(data["d31"]),
            permittivity=None if data.get("permittivity") is None else float(data["permittivity"]),
        )
    except KeyError as exc:
        raise StackError(f"layer is missing field {exc.args[0]!r}") from None


def stack_from_dict(data: dict) -> LayerStack:
    """LayerStack from a mapping with ``width``, ``free_length`` and ``layers``.

    ``free_length`` may be replaced by ``length`` plus ``clamp_overlap``.
    Zero-thickness layers are dropped.
    """
    if "layers" not in data:
        raise StackError("stack config needs a 'layers' array")
    layers = []
    for i, raw in enumerate(data["layers"]):
        if float(raw.get("thickness", 1.0)) == 0.0:
            continue
        try:
            layers.append(layer_from_dict(raw))
        except StackError as exc:
            raise StackError(f"layers[{i}]: {exc}") from None
    if "free_length" in data:
        free = float(data["free_length"])
    elif "length" in data:
        free = float(data["length"]) - float(data.get("clamp_overlap", 0.0))
    else:
        raise StackError("stack config needs 'free_length' or 'length'")
    if "width" not in data:
        raise StackError("stack config needs 'width'")
    return LayerStack(tuple(layers), float(data["width"]), free, data.get("wiring", "parallel"))


def load_stack(path) -> LayerStack:
    with open(path) as fh:
        return stack_from_dict(json.load(fh))
