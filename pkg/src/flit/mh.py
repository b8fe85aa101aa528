"""The fractional operator M_H on indicators, its normalizing constant K_H,
pairings with test functions and the fBm covariance."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from flit.core import MomentResult, Status
from flit.quad import QuadratureSpec, integrate_1d


class QuadratureError(RuntimeError):
    """Raised when a required integral fails to converge."""


class MhVariant(str, enum.Enum):
    UNSQUARED_INTEGRAND = "unsquared_integrand"
    SQUARED_INTEGRAND = "squared_integrand"


DEFAULT_VARIANT = MhVariant.SQUARED_INTEGRAND

_K_SPEC = QuadratureSpec(rel_tol=1e-12, abs_tol=1e-15, max_depth=12)


def _pow_diff(s, alpha):
    """``(1+s)^alpha - s^alpha`` without cancellation for large ``s``."""
    s = np.asarray(s, float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        big = s ** alpha * np.expm1(alpha * np.log1p(1.0 / np.where(s > 0, s, 1.0)))
        small = (1.0 + s) ** alpha - s**alpha
    return np.where(np.isinf(s), 0.0, np.where(s > 1.0, big, small))


def k_integral(H: float, variant: MhVariant | str = DEFAULT_VARIANT) -> MomentResult:
    """The improper integral inside ``K_H`` for the chosen variant."""
    variant = MhVariant(variant)
    a = H - 0.5
    if variant is MhVariant.SQUARED_INTEGRAND:
        g = lambda s: _pow_diff(s, a) ** 2
        lead0, leadinf = 2 * a, 2 * a - 2  # behaviour at 0 and at infinity
        c0 = 1.0  # leading coefficient at 0
    else:
        g = lambda s: _pow_diff(s, a)
        lead0, leadinf = a, a - 1
        c0 = -1.0
        # decays like (H-1/2) s^(H-3/2): integrable only for H < 1/2.  Above
        # 1/2 the growth of the partial integrals is the verdict.
        if a > 0:
            parts = [integrate_1d(g, 0.0, 10.0**k, _K_SPEC).value for k in range(1, 6)]
            growth = [abs(parts[i + 1] / parts[i]) for i in range(len(parts) - 1)]
            if all(r > _K_SPEC.divergence_factor for r in growth[-3:]):
                return MomentResult(parts[-1], math.inf, Status.DIVERGING, tuple(enumerate(parts)))
    # s = r^q on [0, 1] turns s^lead0 ds into a bounded density
    q = 1.0 / (1.0 + lead0) if lead0 < 0 else 1.0
    lim = q * c0 if lead0 < 0 else float(g(0.0))

    def near_f(r):
        r = np.asarray(r, float)
        s = r**q
        with np.errstate(all="ignore"):
            v = g(s) * q * r ** (q - 1.0)
        # s underflowing (or g overflowing) means the leading term is exact
        return np.where((s > 0) & np.isfinite(v), v, lim)

    near = integrate_1d(near_f, 0.0, 1.0, _K_SPEC)
    mid = integrate_1d(g, 1.0, _TAIL_START, _K_SPEC)
    tail = _tail_series(a, _TAIL_START, variant is MhVariant.SQUARED_INTEGRAND)
    val = near.value + mid.value + tail
    err = near.error_estimate + mid.error_estimate
    ok = near.converged and mid.converged
    return MomentResult(val, err, Status.CONVERGED if ok else Status.NOT_CONVERGED, near.history + mid.history)


_TAIL_START = 100.0


def _tail_series(a: float, R: float, squared: bool) -> float:
    """``int_R^inf`` of the K_H integrand from ``(1+s)^a - s^a = s^a sum_k binom(a,k) s^-k``.

    Termwise integration is exact; terms shrink like ``R^-k``.
    """
    kmax = 40
    b = np.ones(kmax + 1)
    for k in range(1, kmax + 1):
        b[k] = b[k - 1] * (a - k + 1) / k
    total = 0.0
    if squared:
        for n in range(2, kmax + 1):  # n = k + l with k, l >= 1
            c = sum(b[k] * b[n - k] for k in range(1, n))
            total += c * R ** (2 * a - n + 1) / (n - 1 - 2 * a)
    else:
        for k in range(1, kmax + 1):
            total += b[k] * R ** (a - k + 1) / (k - 1 - a)
    return total


@lru_cache(maxsize=256)
def _k_cached(H: float, variant: MhVariant) -> float:
    if H == 0.5:
        return 1.0
    r = k_integral(H, variant)
    if not r.converged:
        raise QuadratureError(f"K_H integral ({variant.value}) did not converge for H={H}: {r.status}")
    inner = 1.0 / (2.0 * H) + r.value
    if inner <= 0:
        raise QuadratureError(f"K_H ({variant.value}) undefined for H={H}: bracket {inner} <= 0")
    return math.gamma(H + 0.5) / math.sqrt(inner)


def k_constant(H: float, variant: MhVariant | str = DEFAULT_VARIANT) -> float:
    """Normalizing constant ``K_H``.

    ``squared_integrand`` uses ``Gamma(H+1/2) (1/(2H) + int_0^inf ((1+s)^(H-1/2)
    - s^(H-1/2))^2 ds)^(-1/2)``; ``unsquared_integrand`` drops the square, which
    only converges for ``H <= 1/2``.
    """
    if not 0.0 < H < 1.0:
        raise ValueError("H must lie in (0, 1)")
    return _k_cached(float(H), MhVariant(variant))


def _ppow(z, a):
    """``(z)_+^a``: ``z^a`` for ``z > 0`` and 0 otherwise."""
    z = np.asarray(z, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(z > 0, np.where(z > 0, z, 1.0) ** a, 0.0)


def mh_indicator(H: float, t: float, x, variant: MhVariant | str = DEFAULT_VARIANT):
    """``(M_H 1_[0,t])(x)`` from the closed form.

    For ``H < 1/2`` the values at ``x = t`` and ``x = 0`` are singular and
    returned as NaN.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, float)
    if H == 0.5:
        out = ((x >= 0) & (x <= t)).astype(float)
    else:
        a = H - 0.5
        c = k_constant(H, variant) / math.gamma(H + 0.5)
        # for x < 0 both terms are present and nearly cancel far out
        with np.errstate(divide="ignore", invalid="ignore"):
            neg = (-x) ** a * np.expm1(a * np.log1p(t / np.where(x < 0, -x, 1.0)))
        out = c * np.where(x < 0, neg, _ppow(t - x, a))
        if H < 0.5:
            out = np.where((x == t) | (x == 0), np.nan, out)
    return out if out.ndim else float(out)


def fbm_covariance(H: float, t, s):
    t = np.asarray(t, float)
    s = np.asarray(s, float)
    out = 0.5 * (t ** (2 * H) + s ** (2 * H) - np.abs(t - s) ** (2 * H))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TestFunction:
    """A smooth, rapidly decaying function with its derivative."""

    f: Callable
    df: Callable
    support: tuple[float, float]

    __test__ = False

    def __call__(self, x):
        return self.f(x)


def gaussian_bump(center: float = 0.0, width: float = 1.0, amplitude: float = 1.0) -> TestFunction:
    """``amplitude * exp(-((x - center)/width)^2)``."""

    def f(x):
        return amplitude * np.exp(-(((np.asarray(x, float) - center) / width) ** 2))

    def df(x):
        z = (np.asarray(x, float) - center) / width
        return -2.0 * z / width * amplitude * np.exp(-z * z)

    return TestFunction(f, df, (center - 8.0 * width, center + 8.0 * width))


def scaled(f: TestFunction, c: float) -> TestFunction:
    return TestFunction(lambda x: c * f.f(x), lambda x: c * f.df(x), f.support)


def mh_pairing(
    H: float,
    f: TestFunction,
    t: float,
    quad: QuadratureSpec = QuadratureSpec(rel_tol=1e-10, abs_tol=1e-14, max_depth=12),
    variant: MhVariant | str = DEFAULT_VARIANT,
) -> MomentResult:
    """``int f(x) (M_H 1_[0,t])(x) dx`` over the real line.

    Split at 0 and ``t``; clustered rules absorb the ``(t-x)^(H-1/2)`` and
    ``(-x)^(H-1/2)`` endpoint singularities, and the left half line is
    mapped to a finite interval.
    """
    if H == 0.5:
        return integrate_1d(lambda x: f(x), 0.0, t, quad)

    def g(x):
        return f(x) * np.nan_to_num(mh_indicator(H, t, x, variant), nan=0.0)

    right = integrate_1d(g, 0.0, t, quad)
    left = integrate_1d(g, -np.inf, 0.0, quad)
    val = right.value + left.value
    err = right.error_estimate + left.error_estimate
    ok = right.converged and left.converged
    return MomentResult(val, err, Status.CONVERGED if ok else Status.NOT_CONVERGED)


def covariance_by_quadrature(H: float, t: float, s: float, variant: MhVariant | str = DEFAULT_VARIANT) -> MomentResult:
    """``int (M_H 1_[0,t])(M_H 1_[0,s]) dx`` computed numerically."""
    spec = QuadratureSpec(rel_tol=1e-9, abs_tol=1e-14, max_depth=12)

    def g(x):
        a = np.nan_to_num(mh_indicator(H, t, x, variant), nan=0.0)
        b = np.nan_to_num(mh_indicator(H, s, x, variant), nan=0.0)
        return a * b

    lo, hi = sorted((t, s))
    parts = [integrate_1d(g, -np.inf, 0.0, spec), integrate_1d(g, 0.0, lo, spec)]
    if hi > lo:
        parts.append(integrate_1d(g, lo, hi, spec))
    ok = all(p.converged for p in parts)
    return MomentResult(
        sum(p.value for p in parts), sum(p.error_estimate for p in parts), Status.CONVERGED if ok else Status.NOT_CONVERGED
    )
