"""Distributionally robust optimal power flow with dynamic line ratings."""

__version__ = "0.1.0"

from .case import Case, compute_ptdf, load_bundled_case, load_case, screen_inactive_lines  # noqa: E402
from .formulations import AmbiguitySpec, DispatchProblem, ModelSpec, solve_model  # noqa: E402
from .risk import DispatchDecision, PenaltyWeights, RiskModel, piece_count  # noqa: E402
from .uncertainty import SampleSpec, empirical_moments, generate_samples  # noqa: E402

__all__ = [
    "AmbiguitySpec", "Case", "DispatchDecision", "DispatchProblem", "ModelSpec", "PenaltyWeights",
    "RiskModel", "SampleSpec", "compute_ptdf", "empirical_moments", "generate_samples",
    "load_bundled_case", "load_case", "piece_count", "screen_inactive_lines", "solve_model",
]
