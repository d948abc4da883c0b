"""Federated policy optimization with certified zero-shot generalization."""

from fedgen.bounds import (
    Certificate,
    consensus_gap_bound,
    generalization_upper_bound,
    hoeffding_deviation,
    improvement_bound,
    local_bias,
    safe_arrival_lower_bound,
)
from fedgen.core import (
    CloudLedger,
    LearnerConfig,
    LearnerState,
    ObjectiveEstimate,
    RunResult,
    cloud_update,
    fusion_decide,
    learner_round,
    run,
    step_size,
    validate_config,
)

__version__ = "0.1.0"

__all__ = [
    "Certificate",
    "CloudLedger",
    "LearnerConfig",
    "LearnerState",
    "ObjectiveEstimate",
    "RunResult",
    "cloud_update",
    "consensus_gap_bound",
    "fusion_decide",
    "generalization_upper_bound",
    "hoeffding_deviation",
    "improvement_bound",
    "learner_round",
    "local_bias",
    "run",
    "safe_arrival_lower_bound",
    "step_size",
    "validate_config",
]
