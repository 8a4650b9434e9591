"""Bias-flip piezoelectric harvester simulation and design analysis."""

from .model import (
    CompactModel,
    Excitation,
    FrequencyAnalysis,
    bf_phase,
    coupling_coefficient,
    frequency_analysis,
    matched_load,
    open_circuit_frequency,
    optimum_power,
    reference_model,
    short_circuit_frequency,
    thevenin_impedance,
    zero_reactance_frequencies,
)
from .transient import (
    BiasFlipConfig,
    RectifierModel,
    SimState,
    SteadyStateResult,
    advance_segment,
    simulate_acml,
    simulate_dcrs,
)

__version__ = "0.1.0"
