"""Closed-form objects: S-transform, mean, second moment, chaos terms and
chaos kernels of the (regularized) intersection local time."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from flit.core import ChaosIndex, MomentResult, ProblemSpec, Status
from flit.mh import DEFAULT_VARIANT, TestFunction, k_constant, mh_pairing
from flit.quad import QuadratureSpec, integrate_2d, integrate_4d_multi

QUAD_2D = QuadratureSpec(rel_tol=1e-9, abs_tol=1e-14, max_depth=12)
QUAD_4D = QuadratureSpec(rel_tol=1e-4, abs_tol=1e-12, max_depth=8, base_rule_order=3)
# the order-0 term is smooth over the bulk, where the 3-point rule's error
# heuristic stalls above tolerance; the 5-point rule resolves it in a few levels
QUAD_CHAOS = QuadratureSpec(rel_tol=1e-4, abs_tol=1e-12, max_depth=8, base_rule_order=5)


def _exponents(spec: ProblemSpec) -> tuple[float, float]:
    return spec.h1.hmax, spec.h2.hmax


# ---------------------------------------------------------------------------
# pointwise pieces


def _diff_pow(x, xp, dx, H):
    """``x^2H - xp^2H`` given the exact signed difference ``dx = x - xp``."""
    base = np.minimum(x, xp)
    top = np.maximum(x, xp)
    sgn = np.sign(dx)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs(dx) / np.where(base > 0, base, 1.0)
        v = base ** (2 * H) * np.expm1(2 * H * np.log1p(r))
    return sgn * np.where(base > 0, v, top ** (2 * H))


def pair_geometry(spec: ProblemSpec, t, tp, s, sp, dt=None, ds=None):
    """Per-coordinate ``(X, X', X - X', D)`` arrays of shape (n, d).

    ``X = t^2H1 + s^2H2`` is the variance of ``B1(t) - B2(s)``, ``X'`` that
    at ``(t', s')`` and ``D = |t-t'|^2H1 + |s-s'|^2H2`` the variance of the
    increment between them.
    """
    t, tp, s, sp = (np.asarray(a, float).reshape(-1, 1) for a in (t, tp, s, sp))
    dt = t - tp if dt is None else np.asarray(dt, float).reshape(-1, 1)
    ds = s - sp if ds is None else np.asarray(ds, float).reshape(-1, 1)
    h1 = np.asarray(spec.h1.values)[None, :]
    h2 = np.asarray(spec.h2.values)[None, :]
    X = t ** (2 * h1) + s ** (2 * h2)
    Xp = tp ** (2 * h1) + sp ** (2 * h2)
    dX = _diff_pow(t, tp, dt, h1) + _diff_pow(s, sp, ds, h2)
    D = np.abs(dt) ** (2 * h1) + np.abs(ds) ** (2 * h2)
    return X, Xp, dX, D


def covariance_det(spec: ProblemSpec, t, tp, s, sp, dt=None, ds=None):
    """Per-coordinate determinant ``(eps+X)(eps+X') - rho^2``, shape (n, d).

    Written as ``Y V - c^2`` with ``Y`` the smaller variance, ``V = 2 eps + D``
    the increment variance and ``c`` their covariance, which stays accurate
    near both singular sets (coinciding points and a vanishing variance).
    """
    eps = spec.epsilon
    X, Xp, dX, D = pair_geometry(spec, t, tp, s, sp, dt, ds)
    swap = X < Xp
    Y = eps + np.where(swap, X, Xp)
    c = 0.5 * (np.where(swap, -dX, dX) - D) - eps
    return Y * (2 * eps + D) - c * c


def second_moment_integrand(spec: ProblemSpec, t, tp, s, sp, dt=None, ds=None):
    """``(2 pi)^-d prod_j det_j^(-1/2)``."""
    det = covariance_det(spec, t, tp, s, sp, dt, ds)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (2 * np.pi) ** (-spec.d) * np.prod(det ** -0.5, axis=1)


def half_binomials(n_max: int) -> np.ndarray:
    """``Gamma(n+1/2)/(sqrt(pi) n!)`` for n = 0..n_max by recurrence."""
    c = np.empty(n_max + 1)
    c[0] = 1.0
    for n in range(n_max):
        c[n + 1] = c[n] * (n + 0.5) / (n + 1)
    return c


def multi_indices(n: int, d: int) -> Iterator[tuple[int, ...]]:
    """All ``(n_1..n_d) >= 0`` with sum ``n`` (stars and bars), colex order."""
    if d == 1:
        yield (n,)
        return
    for last in range(n + 1):
        for head in multi_indices(n - last, d - 1):
            yield head + (last,)


def chaos_ratios(spec: ProblemSpec, t, tp, s, sp, dt=None, ds=None):
    """``x_j = rho_j^2 / ((eps+X)(eps+X'))`` and the prefactor ``prod (PP')^(-1/2)``."""
    eps = spec.epsilon
    X, Xp, dX, D = pair_geometry(spec, t, tp, s, sp, dt, ds)
    P, Pp = eps + X, eps + Xp
    rho = 0.5 * (X + Xp - D)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = rho * rho / (P * Pp)
        pref = np.prod((P * Pp) ** -0.5, axis=1)
    return x, pref


def chaos_term(n: int, spec: ProblemSpec, t, tp, s, sp, dt=None, ds=None):
    """Order-``n`` term of the Taylor expansion of ``prod det^(-1/2)``.

    Sums ``prod_j c(n_j) x_j^(n_j)`` over the multi-indices of ``n`` in
    colexicographic order; without the ``(2 pi)^-d`` factor.
    """
    x, pref = chaos_ratios(spec, t, tp, s, sp, dt, ds)
    c = half_binomials(n)
    tot = np.zeros(x.shape[0])
    for nu in multi_indices(n, spec.d):
        term = np.ones(x.shape[0])
        for j, nj in enumerate(nu):
            term = term * (c[nj] * x[:, j] ** nj)
        tot = tot + term
    return pref * tot


def chaos_terms_batched(n_max: int, spec: ProblemSpec, t, tp, s, sp, dt=None, ds=None):
    """Orders ``0..n_max`` at once, shape (npoints, n_max+1), times ``(2 pi)^-d``.

    The multi-index sum is the ``z^n`` coefficient of ``prod_j (1 - x_j z)^(-1/2)``,
    accumulated by Cauchy products of the per-coordinate series.
    """
    x, pref = chaos_ratios(spec, t, tp, s, sp, dt, ds)
    c = half_binomials(n_max)
    k = np.arange(n_max + 1)
    with np.errstate(invalid="ignore", over="ignore"):
        e = c[None, :] * x[:, :1] ** k[None, :]
        for j in range(1, spec.d):
            a = c[None, :] * x[:, j : j + 1] ** k[None, :]
            out = np.zeros_like(e)
            for n in range(n_max + 1):
                out[:, n] = np.einsum("ij,ij->i", e[:, : n + 1], a[:, n::-1])
            e = out
    return (2 * np.pi) ** (-spec.d) * pref[:, None] * e


# ---------------------------------------------------------------------------
# S-transform


def s_transform_delta(spec: ProblemSpec, t: float, s: float, a1: Sequence[float], a2: Sequence[float]) -> float:
    """S-transform of ``delta_eps(B1(t) - B2(s))`` at pairings ``a1``, ``a2``."""
    eps = spec.epsilon
    a1 = np.asarray(a1, float)
    a2 = np.asarray(a2, float)
    if a1.shape != (spec.d,) or a2.shape != (spec.d,):
        raise ValueError("pairings must be d-vectors")
    P = eps + t ** (2 * np.asarray(spec.h1.values)) + s ** (2 * np.asarray(spec.h2.values))
    if np.any(P <= 0):
        raise ValueError("S-transform undefined at t = s = 0 with eps = 0")
    return float((2 * np.pi) ** (-spec.d / 2) * np.prod(P**-0.5) * np.exp(-0.5 * np.sum((a1 - a2) ** 2 / P)))


def pairings(spec: ProblemSpec, f1: Sequence[TestFunction], f2: Sequence[TestFunction], t: float, s: float, variant=DEFAULT_VARIANT):
    """``a1_j = <f1_j, M_H1j 1_[0,t]>`` and ``a2_j = <f2_j, M_H2j 1_[0,s]>``."""
    a1 = [mh_pairing(h, f, t, variant=variant).value for h, f in zip(spec.h1, f1)]
    a2 = [mh_pairing(h, f, s, variant=variant).value for h, f in zip(spec.h2, f2)]
    return np.array(a1), np.array(a2)


# ---------------------------------------------------------------------------
# moments


def mean_integrand(spec: ProblemSpec):
    h1 = np.asarray(spec.h1.values)
    h2 = np.asarray(spec.h2.values)
    eps = spec.epsilon

    def f(t, s):
        t = np.asarray(t, float)[:, None]
        s = np.asarray(s, float)[:, None]
        P = eps + t ** (2 * h1) + s ** (2 * h2)
        return (2 * np.pi) ** (-spec.d / 2) * np.prod(P**-0.5, axis=1)

    return f


def mean_L(spec: ProblemSpec, quad: QuadratureSpec | None = None) -> MomentResult:
    """``E[L_eps] = (2 pi)^(-d/2) int_[0,T]^2 prod_j (eps + t^2H1j + s^2H2j)^(-1/2)``."""
    return integrate_2d(mean_integrand(spec), spec.T, quad or QUAD_2D, exponents=_exponents(spec))


def _m2_integrand(spec):
    def f(t, tp, s, sp, dt, ds):
        return second_moment_integrand(spec, t, tp, s, sp, dt, ds)

    return f


def second_moment_L(spec: ProblemSpec, quad: QuadratureSpec | None = None) -> MomentResult:
    """``E[L_eps^2] = (2 pi)^-d int_[0,T]^4 prod_j det_j^(-1/2)``.

    The integrand is invariant under swapping ``(t,s)`` with ``(t',s')``
    jointly but not under ``t <-> t'`` alone, so two of the four sign
    quadrants of ``(t-t', s-s')`` are integrated and doubled.
    """
    return integrate_4d_multi(_m2_integrand(spec), spec.T, quad or QUAD_4D, _exponents(spec), "joint")[0]


def chaos_contributions(n_max: int, spec: ProblemSpec, quad: QuadratureSpec | None = None) -> list[MomentResult]:
    """``c_0..c_n_max``: 4-D integrals of the order-n terms, times ``(2 pi)^-d``.

    The terms are only ever summed, so accuracy is measured on the scale of
    the series: the absolute tolerance is raised to ``rel_tol * c_0`` with
    ``c_0 = mean^2`` from the 2-D mean integral.  Otherwise the tiny
    high-order terms would force every component to the maximum depth.
    """
    quad = quad or QUAD_CHAOS
    m = mean_L(spec)
    if m.converged:
        quad = replace(quad, abs_tol=max(quad.abs_tol, quad.rel_tol * m.value**2))

    def f(t, tp, s, sp, dt, ds):
        return chaos_terms_batched(n_max, spec, t, tp, s, sp, dt, ds)

    return integrate_4d_multi(f, spec.T, quad, _exponents(spec), "joint")


def chaos_order_contribution(n: int, spec: ProblemSpec, quad: QuadratureSpec | None = None) -> MomentResult:
    return chaos_contributions(n, spec, quad)[n]


@dataclass
class ChaosAccumulator:
    """Per-order contributions ``c_n`` next to the closed-form total."""

    contributions: list[MomentResult]
    closed_form_total: MomentResult
    N: int = 0
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.array([c.value for c in self.contributions])

    def partial_sums(self) -> np.ndarray:
        return np.cumsum(self.values)

    def truncated(self, N: int | None = None) -> MomentResult:
        """``||L^(N)||^2 = total - sum_{n<N} c_n`` with accumulated error."""
        N = self.N if N is None else N
        if N > len(self.contributions):
            raise ValueError("need contributions up to order N-1")
        head = self.contributions[:N]
        val = self.closed_form_total.value - math.fsum(c.value for c in head)
        err = self.closed_form_total.error_estimate + math.fsum(c.error_estimate for c in head)
        ok = self.closed_form_total.converged and all(c.converged for c in head)
        st = self.closed_form_total.status if not ok else Status.CONVERGED
        if not ok and st == Status.CONVERGED:
            st = Status.NOT_CONVERGED
        return MomentResult(val, err, st)


def truncated_norm(
    spec: ProblemSpec,
    quad: QuadratureSpec | None = None,
    n_max: int | None = None,
    chaos_quad: QuadratureSpec | None = None,
) -> ChaosAccumulator:
    """Closed-form total (with ``quad``) and ``c_0..c_n_max`` (with ``chaos_quad``)."""
    n_max = max(spec.N - 1, 0) if n_max is None else n_max
    if n_max < spec.N - 1:
        raise ValueError("n_max must be at least N-1")
    total = second_moment_L(spec, quad)
    parts = chaos_contributions(n_max, spec, chaos_quad)
    return ChaosAccumulator(parts, total, spec.N)


# ---------------------------------------------------------------------------
# chaos kernels


def _indicator_in_t(H: float, tt: np.ndarray, x: float) -> np.ndarray:
    """``(M_H 1_[0,t])(x)`` as a function of ``t`` for fixed ``x``."""
    if H == 0.5:
        return ((x >= 0) & (x <= tt)).astype(float)
    a = H - 0.5
    c = k_constant(H) / math.gamma(H + 0.5)
    z = tt - x
    with np.errstate(divide="ignore", invalid="ignore"):
        first = np.where(z > 0, np.where(z > 0, z, 1.0) ** a, 0.0)
    second = (-x) ** a if x < 0 else 0.0
    return c * (first - second)


def kernel_coefficient(idx: ChaosIndex) -> float:
    """Constant in front of the 2-D kernel integral (nonzero indices only)."""
    m, k = sum(idx.m), sum(idx.k)
    if (m + 3 * k) % 2:
        raise ValueError("(m + 3k)/2 is not an integer")
    sign = -1.0 if ((m + 3 * k) // 2) % 2 else 1.0
    fac = 1.0
    for mj, kj in zip(idx.m, idx.k):
        fac *= math.comb(mj + kj, mj) / math.factorial((mj + kj) // 2)
    return (1 / math.pi) ** (idx.d / 2) * sign * 0.5 ** ((m + k + idx.d) / 2) * fac


def kernel_value(
    idx: ChaosIndex,
    spec: ProblemSpec,
    x: Sequence[float] = (),
    y: Sequence[float] = (),
    quad: QuadratureSpec | None = None,
) -> MomentResult:
    """Chaos kernel ``F_{m,k}(x, y)``.

    ``x`` holds ``sum(m)`` evaluation points, grouped by coordinate
    (``m_1`` for coordinate 1, then ``m_2``, ...); likewise ``y`` for ``k``.
    Odd-parity indices, and orders below ``2N`` for truncated specs, give
    exactly zero without integrating.
    """
    if idx.d != spec.d:
        raise ValueError("index dimension does not match spec")
    if not idx.is_even_parity() or idx.order() < 2 * spec.N:
        return MomentResult(0.0, 0.0, Status.CONVERGED)
    if idx.order() > 6:
        raise ValueError("kernel evaluation is capped at order m+k <= 6")
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    if len(x) != sum(idx.m) or len(y) != sum(idx.k):
        raise ValueError("need sum(m) x-points and sum(k) y-points")
    xs, ys = [], []
    i = j = 0
    for mj, kj in zip(idx.m, idx.k):
        xs.append(x[i : i + mj])
        ys.append(y[j : j + kj])
        i += mj
        j += kj
    h1, h2 = spec.h1.values, spec.h2.values
    eps = spec.epsilon
    powers = np.array([(mj + kj + 1) / 2 for mj, kj in zip(idx.m, idx.k)])

    def f(t, s):
        t = np.asarray(t, float)
        s = np.asarray(s, float)
        out = np.ones_like(t)
        for jj in range(spec.d):
            P = eps + t ** (2 * h1[jj]) + s ** (2 * h2[jj])
            out = out * P ** (-powers[jj])
            for xv in xs[jj]:
                out = out * _indicator_in_t(h1[jj], t, xv)
            for yv in ys[jj]:
                out = out * _indicator_in_t(h2[jj], s, yv)
        return out

    T = spec.T
    breaks = ([v for v in x if 0 < v < T], [v for v in y if 0 < v < T])
    r = integrate_2d(f, T, quad or QUAD_2D, exponents=_exponents(spec), breaks=breaks)
    c = kernel_coefficient(idx)
    return MomentResult(c * r.value, abs(c) * r.error_estimate, r.status, r.history)
