"""Numerical toolkit for a structural-acoustic inverse problem.

A wave equation in the unit square, coupled through its top/side walls to
a clamped Euler-Bernoulli beam, with weighted-energy (Carleman) checks,
observability estimates, and linear and nonlinear inverse solvers.
"""

__version__ = "0.1.0"

from .errors import (CompatibilityWarning, DivergenceError, GrowthGuardTripped,  # noqa: E402
                     HypothesisWarning, InvariantViolation, SailError, SolverError,
                     ValidationError)
from .geometry import (build_reference_domain, eval_weight, locate_sigma_window,  # noqa: E402
                       min_observation_time, select_time_params, verify_assumptions)
from .operators import CoupledState, assemble_generator, check_domain_membership  # noqa: E402
from .forward import (SourceSpec, extract_traces, simulate_coupled,  # noqa: E402
                      simulate_wave)
from .verify import carleman_scan, observability_estimate  # noqa: E402
from .inverse import (assemble_forward_map, reconstruct_f, recover_q,  # noqa: E402
                      stability_probe)

__all__ = [
    "__version__", "SailError", "ValidationError", "SolverError", "GrowthGuardTripped",
    "DivergenceError", "InvariantViolation", "CompatibilityWarning", "HypothesisWarning",
    "build_reference_domain", "eval_weight", "verify_assumptions", "min_observation_time",
    "select_time_params", "locate_sigma_window", "CoupledState", "assemble_generator",
    "check_domain_membership", "SourceSpec", "simulate_coupled", "simulate_wave",
    "extract_traces", "carleman_scan", "observability_estimate", "assemble_forward_map",
    "reconstruct_f", "recover_q", "stability_probe",
]
