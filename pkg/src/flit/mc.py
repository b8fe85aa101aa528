"""Monte-Carlo estimators of the regularized local time and its moments."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numba
import numpy as np

from flit.core import ProblemSpec, l2_condition
from flit.fbm import PathPair, TimeGrid, sample_pair
from flit.mh import TestFunction
from flit.moments import mean_L, pairings, second_moment_L
from flit.quad import QuadratureSpec

JACKKNIFE_BLOCKS = 100
CHUNK = 64  # replicates per scheduled task


def delta_eps(x, epsilon: float):
    """Gaussian kernel ``(2 pi eps)^(-d/2) exp(-|x|^2 / (2 eps))``; last axis is the coordinate."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    x = np.atleast_1d(np.asarray(x, float))
    d = x.shape[-1]
    out = (2 * np.pi * epsilon) ** (-d / 2) * np.exp(-0.5 * np.sum(x * x, axis=-1) / epsilon)
    return out if np.ndim(out) else float(out)


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return w


@numba.njit(nogil=True, cache=True)
def _trap_sum(b1, b2, w, inv2eps):
    # sum_{i,k} w_i w_k exp(-|b1_i - b2_k|^2 / (2 eps)) for every eps at once
    d, n1 = b1.shape
    m = inv2eps.shape[0]
    out = np.zeros(m)
    row = np.zeros(m)
    for i in range(n1):
        row[:] = 0.0
        for k in range(n1):
            r2 = 0.0
            for j in range(d):
                z = b1[j, i] - b2[j, k]
                r2 += z * z
            for e in range(m):
                row[e] += w[k] * math.exp(-r2 * inv2eps[e])
        for e in range(m):
            out[e] += w[i] * row[e]
    return out


def estimate_L_eps(paths: PathPair, epsilon) -> float | np.ndarray:
    """Trapezoid approximation of ``int int delta_eps(B1(t) - B2(s)) dt ds``.

    ``epsilon`` may be a sequence; the kernel sum is then shared.
    """
    eps = np.atleast_1d(np.asarray(epsilon, float))
    if np.any(eps <= 0):
        raise ValueError("epsilon must be positive")
    d = paths.b1.shape[0]
    w = trapezoid_weights(paths.grid)
    s = _trap_sum(np.ascontiguousarray(paths.b1), np.ascontiguousarray(paths.b2), w, 0.5 / eps)
    out = s * (2 * np.pi * eps) ** (-d / 2)
    return float(out[0]) if np.ndim(epsilon) == 0 else out


@dataclass(frozen=True)
class McConfig:
    replicates: int
    grid: TimeGrid
    seed: int
    spec: ProblemSpec

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("replicates must be at least 2")
        if not self.spec.epsilon > 0:
            raise ValueError("Monte Carlo requires epsilon > 0")
        if abs(self.grid.T - self.spec.T) > 1e-12 * self.spec.T:
            raise ValueError("grid horizon differs from spec.T")


@dataclass(frozen=True)
class McMoments:
    mean: float
    second_moment: float
    variance: float
    se_mean: float
    se_m2: float
    se_variance: float
    replicates_used: int


def _run_chunks(fn, n: int, workers: int) -> np.ndarray:
    """Evaluate ``fn(lo, hi)`` over replicate chunks; results land by index."""
    bounds = [(lo, min(lo + CHUNK, n)) for lo in range(0, n, CHUNK)]
    if workers <= 1:
        parts = [fn(lo, hi) for lo, hi in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda b: fn(*b), bounds))
    return np.concatenate(parts, axis=0)


def replicate_values(cfg: McConfig, epsilons: Sequence[float] | None = None, workers: int = 1) -> np.ndarray:
    """Per-replicate ``L_eps`` values, shape (replicates, len(epsilons)).

    Replicate r always uses the streams keyed by ``(seed, r, ...)``.
    """
    eps = np.asarray([cfg.spec.epsilon] if epsilons is None else epsilons, float)

    def work(lo, hi):
        return np.stack([estimate_L_eps(sample_pair(cfg.spec, cfg.grid, cfg.seed, r), eps) for r in range(lo, hi)])

    return _run_chunks(work, cfg.replicates, workers)


def jackknife(x: np.ndarray, stat, blocks: int = JACKKNIFE_BLOCKS) -> tuple[float, float]:
    """Full-sample statistic and its blocked jackknife standard error."""
    x = np.asarray(x, float)
    n = len(x)
    B = min(blocks, n)
    edges = np.linspace(0, n, B + 1).astype(int)
    full = stat(x)
    keep = np.ones(n, bool)
    loo = np.empty(B)
    for b in range(B):
        keep[edges[b] : edges[b + 1]] = False
        loo[b] = stat(x[keep])
        keep[edges[b] : edges[b + 1]] = True
    se = math.sqrt((B - 1) / B * np.sum((loo - loo.mean()) ** 2))
    return float(full), se


def _mean(x):
    return np.mean(x)


def _m2(x):
    return np.mean(x * x)


def _var(x):
    return np.mean((x - np.mean(x)) ** 2)


def moments_from_values(x: np.ndarray) -> McMoments:
    m, se_m = jackknife(x, _mean)
    m2, se_m2 = jackknife(x, _m2)
    v, se_v = jackknife(x, _var)
    return McMoments(m, m2, v, se_m, se_m2, se_v, len(x))


def mc_moments(cfg: McConfig, workers: int = 1) -> McMoments:
    """Mean, second moment and (plug-in) variance of ``L_eps`` with jackknife SEs."""
    return moments_from_values(replicate_values(cfg, workers=workers)[:, 0])


def s_transform_mc(
    cfg: McConfig,
    t: float,
    s: float,
    f1: Sequence[TestFunction],
    f2: Sequence[TestFunction],
    workers: int = 1,
) -> tuple[float, float]:
    """Estimate of ``E[delta_eps(B1(t) - B2(s) + a1 - a2)]`` and its standard error.

    ``a1``, ``a2`` are the pairings of ``f1``, ``f2`` with the operator applied
    to the indicators, i.e. the Gaussian shift induced by the test functions.
    """
    spec = cfg.spec
    it, js = cfg.grid.index_of(t), cfg.grid.index_of(s)
    a1, a2 = pairings(spec, f1, f2, t, s)
    shift = a1 - a2

    def work(lo, hi):
        out = np.empty((hi - lo, spec.d))
        for r in range(lo, hi):
            p = sample_pair(spec, cfg.grid, cfg.seed, r)
            out[r - lo] = p.b1[:, it] - p.b2[:, js]
        return out

    diff = _run_chunks(work, cfg.replicates, workers)
    vals = delta_eps(diff + shift, spec.epsilon)
    return jackknife(vals, _mean)


# ---------------------------------------------------------------------------
# convergence in epsilon

COLUMNS = (
    "epsilon",
    "mean_mc",
    "se_mean",
    "mean_quad",
    "quad_err_mean",
    "m2_mc",
    "se_m2",
    "m2_quad",
    "quad_err_m2",
    "n",
    "replicates",
    "seed",
)


@dataclass
class StudyRow:
    epsilon: float
    mean_mc: float
    se_mean: float
    mean_quad: float
    quad_err_mean: float
    m2_mc: float
    se_m2: float
    m2_quad: float
    quad_err_m2: float
    n: int
    replicates: int
    seed: int


@dataclass
class ConvergenceStudy:
    rows: list[StudyRow]
    mean_limit: object  # MomentResult at eps = 0
    m2_limit: object
    mean_monotone: bool
    m2_monotone: bool
    l2_valid: bool = True

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.rows], indent=1) + "\n"


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _monotone(vals, increasing: bool) -> bool:
    d = np.diff(vals)
    return bool(np.all(d >= 0) if increasing else np.all(d <= 0))


def convergence_study(
    specs: Sequence[ProblemSpec],
    cfg: McConfig,
    quad_2d: QuadratureSpec | None = None,
    quad_4d: QuadratureSpec | None = None,
    workers: int = 1,
    with_mc: bool = True,
) -> ConvergenceStudy:
    """MC and analytic moments along a descending epsilon sequence.

    All epsilons share the same sampled paths, so the MC columns are
    correlated across rows.  Monotonicity flags refer to the analytic
    columns as epsilon decreases.  Specs outside the l2 regime are still
    tabulated (``l2_valid`` is False); their eps = 0 limits then report
    a diverging status.
    """
    eps = [s.epsilon for s in specs]
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be positive and strictly descending")
    base = specs[0]
    for s in specs:
        if (s.d, s.h1, s.h2, s.T) != (base.d, base.h1, base.h2, base.T):
            raise ValueError("specs may differ only in epsilon")
    if with_mc:
        vals = replicate_values(McConfig(cfg.replicates, cfg.grid, cfg.seed, base), eps, workers)
    rows = []
    for k, s in enumerate(specs):
        mq = mean_L(s, quad_2d)
        m2q = second_moment_L(s, quad_4d)
        if with_mc:
            mm = moments_from_values(vals[:, k])
            mc = (mm.mean, mm.se_mean, mm.second_moment, mm.se_m2)
        else:
            mc = (math.nan,) * 4
        rows.append(
            StudyRow(
                s.epsilon, mc[0], mc[1], mq.value, mq.error_estimate, mc[2], mc[3],
                m2q.value, m2q.error_estimate, cfg.grid.n, cfg.replicates, cfg.seed,
            )
        )
    zero = base.with_epsilon(0.0)
    return ConvergenceStudy(
        rows,
        mean_L(zero, quad_2d),
        second_moment_L(zero, quad_4d),
        _monotone([r.mean_quad for r in rows], True),
        _monotone([r.m2_quad for r in rows], True),
        l2_condition(base.d, base.h1, base.h2),
    )


def brownian_bridge_refine(path: np.ndarray, grid: TimeGrid, factor: int, rng: np.random.Generator) -> np.ndarray:
    """Refine a Brownian path (H = 1/2) onto a grid ``factor`` times finer.

    Conditional on the coarse values the fine path is a sequence of
    independent Brownian bridges, so the result is an exact sample.
    """
    n = grid.n
    h = grid.dt / factor
    out = np.empty(n * factor + 1)
    out[::factor] = path
    k = np.arange(1, factor)
    for i in range(n):
        incr = rng.standard_normal(factor) * math.sqrt(h)
        w = np.concatenate([[0.0], np.cumsum(incr)])
        bridge = w[1:-1] - k / factor * w[-1]
        out[i * factor + 1 : (i + 1) * factor] = path[i] + k / factor * (path[i + 1] - path[i]) + bridge
    return out

