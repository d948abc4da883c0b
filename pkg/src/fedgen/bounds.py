"""Hoeffding-based certificates for learned policies.

All costs fed to these functions are normalized arrival costs in [0, 1]. The
training surrogate (which adds distance-to-goal and can exceed 1) must not be
passed here: the concentration argument needs bounded samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

CertificateKind = Literal["generalization", "safety", "consensus_gap", "improvement"]


@dataclass(frozen=True)
class Certificate:
    kind: CertificateKind
    value: float
    confidence: float

    @property
    def vacuous(self) -> bool:
        """True when the certificate carries no information."""
        if self.kind == "generalization":
            return self.value >= 1.0
        if self.kind == "safety":
            return self.value <= 0.0
        return False


def _check_gamma(gamma: float, *, closed: bool = False) -> None:
    lo_ok = gamma >= 0.0 if closed else gamma > 0.0
    if not (lo_ok and gamma < 1.0):
        raise ValueError(f"gamma must lie in {'[0' if closed else '(0'}, 1), got {gamma}")


def hoeffding_deviation(n: int, gamma: float) -> float:
    """Half-width eps with P(|mean - E| >= eps) <= gamma for n i.i.d. [0,1] samples."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    _check_gamma(gamma)
    return math.sqrt(math.log(2.0 / gamma) / (2.0 * n))


def local_bias(gamma: float, n_env: int, n_init: int) -> float:
    """Certificate slack of a learner that averages n_env * n_init episodes."""
    if n_env < 1 or n_init < 1:
        raise ValueError(f"sample sizes must be positive, got n_env={n_env}, n_init={n_init}")
    _check_gamma(gamma)
    return math.sqrt(math.log(2.0 / gamma) / (2.0 * n_env * n_init))


def _check_unit_cost(y: float) -> None:
    if not (0.0 <= y <= 1.0):
        raise ValueError(
            f"certified cost must lie in [0, 1], got {y}; the surrogate cost cannot be certified"
        )


def generalization_upper_bound(y: float, b: float, gamma: float | None = None) -> Certificate:
    """Upper bound y + b on the expected cost, valid with probability 1 - gamma."""
    _check_unit_cost(y)
    if b < 0:
        raise ValueError(f"bias must be non-negative, got {b}")
    confidence = 1.0 - gamma if gamma is not None else float("nan")
    return Certificate("generalization", y + b, confidence)


def safe_arrival_lower_bound(y: float, b: float, gamma: float) -> Certificate:
    """Lower bound 1 - gamma - (1 - gamma)(y + b) on the safe-arrival probability.

    The value is returned unclamped; a negative value is a vacuous certificate.
    """
    _check_unit_cost(y)
    if b < 0:
        raise ValueError(f"bias must be non-negative, got {b}")
    _check_gamma(gamma, closed=True)
    return Certificate("safety", 1.0 - gamma - (1.0 - gamma) * (y + b), 1.0)


def consensus_gap_bound(biases: Sequence[float]) -> float:
    if len(biases) == 0:
        raise ValueError("biases must be non-empty")
    return 2.0 * max(biases)


def improvement_bound(biases: Sequence[float]) -> float:
    if len(biases) == 0:
        raise ValueError("biases must be non-empty")
    return -2.0 * min(biases)
