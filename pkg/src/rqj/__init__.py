"""Simulations of a strongly driven atom in a cavity under homodyne detection
of the cavity output, and the switching statistics of the conditioned atom."""

__version__ = "0.1.0"

from .lindblad import Variant, integrate_me, q_function, steady_state
from .operators import Frame, SystemParams, compute_fixed_points, reference_state
from .pfe import simulate_pfe
from .sme import NoiseSource, ensemble_run, simulate_trajectory

__all__ = [
    "Frame",
    "NoiseSource",
    "SystemParams",
    "Variant",
    "compute_fixed_points",
    "ensemble_run",
    "integrate_me",
    "q_function",
    "reference_state",
    "simulate_pfe",
    "simulate_trajectory",
    "steady_state",
]
