"""Spin-orbit capture probabilities for a triaxial planet with tidal dissipation.

The Poincaré map of the spin ODE is advanced with a tabulated high-order
Euler (Taylor) step in smooth velocity strips and an adaptive DOP853 step
near tidal kinks. Capture into spin-orbit resonances is detected by block
statistics, and seeded Monte Carlo campaigns estimate capture probabilities.
"""

__version__ = "0.1.0"

from .capture import CaptureConfig, CaptureDetector, CaptureReport, block_stats, run_trajectory
from .hansen import HansenTable, build_g20_table, hansen_x
from .integrators import SpinOrbitSystem, StepperConfig, build_system, hem_step, poincare_map, rk_step_to
from .model import ModelParams, State, accel_tide_exact, accel_tri, load_params, parse_params
from .montecarlo import CampaignConfig, ProbabilityReport, cpu_sec_calibrate, run_campaign, sample_initial
from .strips import StripLayout, default_layout

__all__ = [
    "CampaignConfig",
    "CaptureConfig",
    "CaptureDetector",
    "CaptureReport",
    "HansenTable",
    "ModelParams",
    "ProbabilityReport",
    "SpinOrbitSystem",
    "State",
    "StepperConfig",
    "StripLayout",
    "accel_tide_exact",
    "accel_tri",
    "block_stats",
    "build_g20_table",
    "build_system",
    "cpu_sec_calibrate",
    "default_layout",
    "hansen_x",
    "hem_step",
    "load_params",
    "parse_params",
    "poincare_map",
    "rk_step_to",
    "run_campaign",
    "run_trajectory",
    "sample_initial",
]
