"""Desk-scale lab for variance-minimizing sample-budget allocation.

Everything runs on tabular softmax models over small finite spaces, so the
quantities that are intractable at LLM scale (posteriors over rationales,
marginal likelihoods, exact gradients) all have cheap enumeration oracles.
"""

__version__ = "0.1.0"

from .model import (
    Spaces,
    Params,
    PromptInstance,
    PosteriorTable,
    InfeasibleInstanceError,
)
from .sampler import ProbeStats, ReplayBuffer
from .allocator import AllocatorConfig, AllocationPlan
from .estimator import GradientEstimate, VarianceReport
from .trainers import TrainerConfig, GrpoGroup, TrainingRun

__all__ = [
    "Spaces",
    "Params",
    "PromptInstance",
    "PosteriorTable",
    "InfeasibleInstanceError",
    "ProbeStats",
    "ReplayBuffer",
    "AllocatorConfig",
    "AllocationPlan",
    "GradientEstimate",
    "VarianceReport",
    "TrainerConfig",
    "GrpoGroup",
    "TrainingRun",
    "__version__",
]
