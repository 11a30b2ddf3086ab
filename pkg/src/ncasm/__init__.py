"""Simulation and EM identification of non-causal linear systems with switching modes."""

from .model import (
    AntiCausalModeParams,
    CausalModeParams,
    Dims,
    ThetaBundle,
    ThetaValidationError,
    Trajectory,
    example1_theta,
    load_theta,
    save_theta,
    spectral_radius_report,
    validate_theta,
)
from .simulate import SimConfig, SimulationDivergenceError, simulate
from .estep import EStepOptions, FilterState, ModeWeights, run_estep, surrogate_q
from .mstep import run_mstep
from .em import EmConfig, EmReport, MonotonicityError, align_modes, fit, initialize

__version__ = "0.1.0"
