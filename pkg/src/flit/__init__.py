"""Intersection local times of two independent fractional Brownian motions."""

from flit.core import (
    ChaosIndex,
    HurstVector,
    MomentResult,
    ProblemSpec,
    Status,
    admissible_epsilon_exponent,
    hida_condition,
    l2_condition,
    lemma1_condition,
)

__version__ = "0.1.0"
