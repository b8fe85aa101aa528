"""Domain types and the existence / integrability predicates."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence


class Status(str, enum.Enum):
    CONVERGED = "converged"
    NOT_CONVERGED = "not_converged"
    DIVERGING = "diverging"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class HurstVector:
    """A d-tuple of Hurst exponents, each strictly inside (0, 1)."""

    values: tuple[float, ...]

    def __init__(self, values: Sequence[float] | float):
        if isinstance(values, (int, float)):
            values = (values,)
        vals = tuple(float(v) for v in values)
        if not vals:
            raise ValueError("HurstVector needs at least one entry")
        for v in vals:
            if not (0.0 < v < 1.0):
                raise ValueError(f"Hurst exponent {v} outside (0, 1)")
        object.__setattr__(self, "values", vals)

    @property
    def d(self) -> int:
        return len(self.values)

    @property
    def hmax(self) -> float:
        return max(self.values)

    @property
    def hmin(self) -> float:
        return min(self.values)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, j):
        return self.values[j]


@dataclass(frozen=True)
class ChaosIndex:
    """Pair of multi-indices ``(m, k)`` labelling a chaos kernel."""

    m: tuple[int, ...]
    k: tuple[int, ...]

    def __init__(self, m: Sequence[int], k: Sequence[int]):
        m = tuple(int(x) for x in m)
        k = tuple(int(x) for x in k)
        if len(m) != len(k):
            raise ValueError("m and k must have the same length")
        if any(x < 0 for x in m + k):
            raise ValueError("multi-index entries must be nonnegative")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "k", k)

    @property
    def d(self) -> int:
        return len(self.m)

    def order(self) -> int:
        return sum(self.m) + sum(self.k)

    def is_even_parity(self) -> bool:
        return all((a + b) % 2 == 0 for a, b in zip(self.m, self.k))


@dataclass(frozen=True)
class ProblemSpec:
    d: int
    h1: HurstVector
    h2: HurstVector
    T: float = 1.0
    epsilon: float = 0.0
    N: int = 0

    def __post_init__(self):
        if not isinstance(self.h1, HurstVector):
            object.__setattr__(self, "h1", HurstVector(self.h1))
        if not isinstance(self.h2, HurstVector):
            object.__setattr__(self, "h2", HurstVector(self.h2))
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.h1.d != self.d or self.h2.d != self.d:
            raise ValueError("Hurst vectors must have length d")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")
        if self.N < 0:
            raise ValueError("N must be nonnegative")

    @classmethod
    def uniform(cls, d: int, h1: float, h2: float | None = None, **kw) -> "ProblemSpec":
        h2 = h1 if h2 is None else h2
        return cls(d, HurstVector([h1] * d), HurstVector([h2] * d), **kw)

    def with_epsilon(self, eps: float) -> "ProblemSpec":
        return ProblemSpec(self.d, self.h1, self.h2, self.T, eps, self.N)


@dataclass(frozen=True)
class MomentResult:
    """Value, error estimate and status of a numerical integral.

    ``history`` holds one ``(depth, raw, extrapolated, error)`` tuple per
    refinement level.
    """

    value: float
    error_estimate: float
    status: Status
    history: tuple = field(default=(), compare=False, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == Status.CONVERGED


def hida_condition(spec: ProblemSpec) -> bool:
    a, b = spec.h1.hmax, spec.h2.hmax
    hi, lo = max(a, b), min(a, b)
    return hi * (spec.N + spec.d / 2 - 1 / (2 * lo)) < spec.N + 0.5


def l2_condition(d: int, h1: HurstVector, h2: HurstVector) -> bool:
    return d < 1 / h1.hmax + 1 / h2.hmax


def lemma1_condition(d: int, N: int, hA: float, hB: float) -> bool:
    """Finiteness of the 2-D integral of ``(t^2+s^2)^N / (t^2hA + s^2hB)^(N+d/2)``."""
    if not (0 < hA < hB < 1):
        raise ValueError("requires 0 < hA < hB < 1")
    return 2 * hB * (N + d / 2) < 1 + 2 * N + hB / hA


def admissible_epsilon_exponent(d: int, h1: HurstVector, h2: HurstVector) -> float:
    if not l2_condition(d, h1, h2):
        raise ValueError("l2_condition fails; no admissible exponent")
    a, b = h1.hmax, h2.hmax
    return min(1 / (2 * max(a, b)), (a + b - d * a * b) / (4 * a * b))
