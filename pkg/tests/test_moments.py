import itertools
import math

import numpy as np
import pytest

from flit.core import ChaosIndex, MomentResult, ProblemSpec, Status
from flit.mh import gaussian_bump
from flit.moments import (
    QUAD_4D,
    ChaosAccumulator,
    chaos_contributions,
    chaos_ratios,
    chaos_terms_batched,
    half_binomials,
    kernel_coefficient,
    kernel_value,
    mean_L,
    multi_indices,
    pairings,
    s_transform_delta,
    second_moment_L,
    second_moment_integrand,
    truncated_norm,
)
from flit.quad import QuadratureSpec, integrate_4d_qmc

# occupation-formula oracle (tests/oracles/occupation_oracle.py), frozen
M2_D1_HALF_EPS0 = 0.28443228244270


def spec1(h1=0.5, h2=0.5, eps=0.0, **kw):
    return ProblemSpec.uniform(1, h1, h2, epsilon=eps, **kw)


# ---------------------------------------------------------------------------
# S-transform


def test_s_transform_examples():
    assert s_transform_delta(spec1(), 1.0, 1.0, [0.0], [0.0]) == pytest.approx((2 * math.pi) ** -0.5 * 2**-0.5, rel=1e-14)
    assert s_transform_delta(spec1(), 1.0, 1.0, [0.3], [0.3]) == pytest.approx(0.28209, abs=1e-5)
    sp = ProblemSpec(2, [0.3, 0.7], [0.6, 0.4], epsilon=0.2)
    t, s = 0.7, 0.4
    P = [0.2 + t**0.6 + s**1.2, 0.2 + t**1.4 + s**0.8]
    ref = (2 * math.pi) ** -1 / math.sqrt(P[0] * P[1])
    assert s_transform_delta(sp, t, s, [0, 0], [0, 0]) == pytest.approx(ref, rel=1e-14)
    a1, a2 = [0.5, -0.2], [0.1, 0.3]
    ex = math.exp(-0.5 * (0.4**2 / P[0] + 0.5**2 / P[1]))
    assert s_transform_delta(sp, t, s, a1, a2) == pytest.approx(ref * ex, rel=1e-14)


def test_s_transform_rejects_bad_input():
    with pytest.raises(ValueError):
        s_transform_delta(spec1(), 1.0, 1.0, [0.0, 0.0], [0.0])
    with pytest.raises(ValueError):
        s_transform_delta(spec1(), 0.0, 0.0, [0.0], [0.0])


def test_pairings_linear_in_test_function():
    sp = spec1(0.3, 0.7, 0.1)
    f = gaussian_bump(0.5, 0.25)
    g = gaussian_bump(0.5, 0.25, 2.0)
    a1, a2 = pairings(sp, [f], [f], 1.0, 0.8)
    b1, b2 = pairings(sp, [g], [g], 1.0, 0.8)
    assert np.allclose(b1, 2 * a1, rtol=1e-12) and np.allclose(b2, 2 * a2, rtol=1e-12)


# ---------------------------------------------------------------------------
# mean


def test_mean_d1_closed_form():
    r = mean_L(spec1())
    assert r.converged
    assert r.value == pytest.approx((2 * math.pi) ** -0.5 * 4 / 3 * (2**1.5 - 2), rel=1e-10)


def test_mean_d2_closed_form():
    r = mean_L(ProblemSpec.uniform(2, 0.5))
    assert r.converged
    assert r.value == pytest.approx(2 * math.log(2) / (2 * math.pi), rel=1e-9)


def test_mean_d4_diverges():
    assert mean_L(ProblemSpec.uniform(4, 0.5)).status == "diverging"


def test_mean_large_eps_and_monotone():
    T = 1.0
    eps = 1e4
    r = mean_L(spec1(eps=eps))
    assert r.value / (T**2 * (2 * math.pi * eps) ** -0.5) == pytest.approx(1.0, rel=1e-3)
    vals = [mean_L(spec1(0.7, 0.6, e)).value for e in (1.0, 0.5, 0.1, 0.01, 0.0)]
    assert np.all(np.diff(vals) > 0)


# ---------------------------------------------------------------------------
# second moment


def test_second_moment_large_eps():
    eps = 1e4
    r = second_moment_L(spec1(eps=eps))
    assert r.value / ((2 * math.pi * eps) ** -1) == pytest.approx(1.0, rel=0.02)


def test_second_moment_d1_against_occupation_oracle():
    r = second_moment_L(spec1())
    assert r.converged
    assert abs(r.value - M2_D1_HALF_EPS0) <= max(3 * r.error_estimate, 1e-6)


def test_second_moment_d1_against_qmc():
    sp = spec1()
    f = lambda t, tp, s, sp_, dt, ds: second_moment_integrand(sp, t, tp, s, sp_, dt, ds)
    m, se = integrate_4d_qmc(f, 1.0, n=2**16, symmetry="joint")
    assert abs(m - M2_D1_HALF_EPS0) < 4 * se


def test_second_moment_eps_monotone():
    vals = [second_moment_L(spec1(0.5, 0.5, e)).value for e in (2.0, 1.0, 0.5, 0.25)]
    assert np.all(np.diff(vals) > 0)


def test_second_moment_at_least_mean_squared():
    sp = spec1(0.7, 0.6, 0.1)
    assert second_moment_L(sp).value > mean_L(sp).value ** 2


# ---------------------------------------------------------------------------
# chaos terms


def test_half_binomials():
    c = half_binomials(170)
    n = np.arange(171)
    from scipy.special import gammaln

    ref = np.exp(gammaln(n + 0.5) - 0.5 * math.log(math.pi) - gammaln(n + 1))
    assert np.allclose(c, ref, rtol=1e-12)
    assert np.all(np.isfinite(c))


def test_multi_indices():
    idx = list(multi_indices(3, 2))
    assert idx == [(3, 0), (2, 1), (1, 2), (0, 3)]
    assert len(list(multi_indices(4, 3))) == math.comb(6, 2)
    assert all(sum(i) == 4 for i in multi_indices(4, 3))


def interior_points(sp, n, rng, xmax=0.5):
    """Random (t,t',s,s') with every coordinate ratio at most ``xmax``."""
    out = []
    while len(out) < n:
        p = rng.uniform(0.01, 1.0, size=4)
        x, _ = chaos_ratios(sp, *p[:, None])
        if np.all(x <= xmax):
            out.append(p)
    return np.array(out)


@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("eps", [0.0, 0.1])
def test_chaos_sum_pointwise(d, eps):
    sp = ProblemSpec(d, [0.5, 0.6][:d], [0.7, 0.4][:d], epsilon=eps)
    P = interior_points(sp, 50, np.random.default_rng(7))
    t, tp, s, spp = P.T
    terms = chaos_terms_batched(40, sp, t, tp, s, spp)
    closed = second_moment_integrand(sp, t, tp, s, spp)
    assert np.allclose(terms.sum(axis=1), closed, rtol=1e-10, atol=0)
    assert np.all(terms >= 0)


def test_chaos_term_ratio_bound():
    sp = ProblemSpec(2, [0.5, 0.6], [0.7, 0.4], epsilon=0.0)
    P = interior_points(sp, 30, np.random.default_rng(3), xmax=0.9)
    t, tp, s, spp = P.T
    terms = chaos_terms_batched(12, sp, t, tp, s, spp)
    x, _ = chaos_ratios(sp, t, tp, s, spp)
    bound = x.max(axis=1)
    ratios = terms[:, 1:] / terms[:, :-1]
    assert np.all(bound < 1)
    assert np.all(ratios <= bound[:, None] * (1 + 1e-12))


def test_chaos_zeroth_order_is_mean_squared():
    sp = spec1(0.7, 0.6, 0.1)
    c = chaos_contributions(0, sp)[0]
    m = mean_L(sp)
    assert abs(c.value - m.value**2) <= 3 * (c.error_estimate + 2 * m.value * m.error_estimate) + 1e-9


@pytest.mark.slow
def test_chaos_series_sums_to_second_moment():
    sp = spec1(0.7, 0.6, 0.1)
    cs = chaos_contributions(30, sp)
    total = second_moment_L(sp)
    vals = np.array([c.value for c in cs])
    # geometric tail past n = 30
    q = vals[-1] / vals[-2]
    tail = vals[-1] * q / (1 - q)
    err = sum(c.error_estimate for c in cs) + total.error_estimate + tail
    assert abs(vals.sum() + tail - total.value) <= 3 * err
    assert np.all(vals >= 0)


def test_truncated_norm_partial_sums():
    sp = ProblemSpec.uniform(1, 0.7, 0.6, epsilon=0.1, N=0)
    acc = truncated_norm(sp, n_max=8)
    assert acc.truncated(0).value == acc.closed_form_total.value
    ps = acc.partial_sums()
    assert np.all(np.diff(ps) >= 0)
    assert ps[-1] <= acc.closed_form_total.value + acc.closed_form_total.error_estimate + sum(c.error_estimate for c in acc.contributions)
    var = acc.truncated(1).value
    assert var == pytest.approx(acc.closed_form_total.value - mean_L(sp).value ** 2, rel=1e-3)
    with pytest.raises(ValueError):
        acc.truncated(20)


def test_chaos_accumulator_status_propagates():
    ok = MomentResult(1.0, 0.0, Status.CONVERGED)
    bad = MomentResult(5.0, 1.0, Status.DIVERGING)
    acc = ChaosAccumulator([ok], bad, 1)
    assert acc.truncated().status == "diverging"
    acc = ChaosAccumulator([MomentResult(0.2, 0.0, Status.NOT_CONVERGED)], ok, 1)
    assert acc.truncated().status == "not_converged"


# ---------------------------------------------------------------------------
# kernels


def all_indices(d, max_order):
    for m in itertools.product(range(max_order + 1), repeat=d):
        for k in itertools.product(range(max_order + 1), repeat=d):
            if sum(m) + sum(k) <= max_order:
                yield ChaosIndex(m, k)


def test_kernel_parity_vanishing():
    for d in (1, 2):
        sp = ProblemSpec.uniform(d, 0.5, 0.7, epsilon=0.1)
        odd = [i for i in all_indices(d, 4) if not i.is_even_parity()]
        assert odd
        for idx in odd:
            r = kernel_value(idx, sp, [0.3] * sum(idx.m), [0.4] * sum(idx.k))
            assert r.value == 0.0 and r.converged


def test_kernel_zero_index_is_mean():
    sp = spec1()
    r = kernel_value(ChaosIndex((0,), (0,)), sp)
    assert r.value == pytest.approx(mean_L(sp).value, rel=1e-10)
    sp2 = ProblemSpec(2, [0.4, 0.6], [0.5, 0.7], epsilon=0.05)
    assert kernel_value(ChaosIndex((0, 0), (0, 0)), sp2).value == pytest.approx(mean_L(sp2).value, rel=1e-10)


def test_kernel_coefficient_integrality():
    with pytest.raises(ValueError):
        kernel_coefficient(ChaosIndex((1,), (0,)))
    assert kernel_coefficient(ChaosIndex((0,), (0,))) == pytest.approx(math.pi**-0.5 * 0.5**0.5)


def test_kernel_truncated_below_2N_is_zero():
    sp = ProblemSpec.uniform(1, 0.5, epsilon=1.0, N=2)
    assert kernel_value(ChaosIndex((2,), (0,)), sp, [0.3, 0.4]).value == 0.0
    assert kernel_value(ChaosIndex((2,), (2,)), sp, [0.3, 0.4], [0.2, 0.6]).value != 0.0


def fine_grid_kernel_m2(a, n=4096):
    # midpoint rule for int_0^1 int_0^1 (1+t+s)^(-3/2) 1[t >= a] dt ds
    h = 1.0 / n
    g = (np.arange(n) + 0.5) * h
    t = g[:, None]
    s = g[None, :]
    w = np.where(g >= a, 1.0, 0.0)[:, None]
    full = np.sum(w * (1 + t + s) ** -1.5) * h * h
    # the cell containing a is split exactly by rescaling its weight
    i = int(a // h)
    frac = ((i + 1) * h - a) / h
    full += (frac - (1.0 if g[i] >= a else 0.0)) * np.sum((1 + g[i] + s) ** -1.5) * h * h
    return full


def test_kernel_m2_fine_grid():
    sp = spec1(eps=1.0)
    idx = ChaosIndex((2,), (0,))
    x = [0.3, 0.55]
    a = max(x)
    closed = 4 * (math.sqrt(2) - math.sqrt(1 + a) - math.sqrt(3) + math.sqrt(2 + a))
    grid = fine_grid_kernel_m2(a)
    assert grid == pytest.approx(closed, rel=1e-6)
    r = kernel_value(idx, sp, x)
    assert r.converged
    assert r.value == pytest.approx(kernel_coefficient(idx) * grid, rel=1e-6)


def test_kernel_argument_checks():
    sp = spec1(eps=1.0)
    with pytest.raises(ValueError):
        kernel_value(ChaosIndex((2,), (0,)), sp, [0.3])
    with pytest.raises(ValueError):
        kernel_value(ChaosIndex((4,), (4,)), sp, [0.1] * 4, [0.1] * 4)
    with pytest.raises(ValueError):
        kernel_value(ChaosIndex((0, 0), (0, 0)), sp)
