"""Singular adaptive quadrature in one, two and four dimensions.

The 2-D integrator decomposes the unit square into dyadic L-shaped shells
accumulating at the singular corner.  Each shell cell is integrated with a
tensor Gauss-Kronrod rule composed with a polynomial endpoint-clustering
map, which tames algebraic edge singularities.  Refinement levels add shells;
the unresolved corner is estimated by geometric extrapolation of the shell
contributions.  A level sequence whose raw partial sums keep growing while
the error estimate does not shrink is reported as diverging.

The 4-D integrator nests two such 2-D integrals: an outer one over the
increments ``(|t - t'|, |s - s'|)`` whose corner is the diagonal singular
set, and an inner one over the base point of the increment.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import legendre
from scipy import special

from flit.core import MomentResult, Status

SUBSTITUTIONS = ("none", "power_origin", "polar_origin", "diagonal_reflect")

SHELLS_PER_LEVEL = 8
# a block ratio this close to one is indistinguishable from a non-summable tail
RATIO_CEIL = 1.0 - 1e-3


@dataclass(frozen=True)
class QuadratureSpec:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-12
    max_depth: int = 8
    base_rule_order: int = 7
    substitution: str = "power_origin"
    divergence_factor: float = 1.05
    workers: int = 1

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("rel_tol and abs_tol must be positive")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.base_rule_order < 1:
            raise ValueError("base_rule_order must be >= 1")
        if self.substitution not in SUBSTITUTIONS:
            raise ValueError(f"unknown substitution {self.substitution!r}")
        if self.divergence_factor <= 1:
            raise ValueError("divergence_factor must exceed 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def tolerance(self, value: float) -> float:
        return max(self.abs_tol, self.rel_tol * abs(value))


# ---------------------------------------------------------------------------
# rules


@lru_cache(maxsize=None)
def gauss_kronrod(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss-Kronrod rule on [-1, 1] extending the ``n``-point Gauss rule.

    Returns ``(x, wk, wg)`` with ``2n+1`` sorted nodes, Kronrod weights, and
    Gauss weights aligned with ``x`` (zero on the Kronrod-only nodes).  The
    Kronrod rule is exact to degree ``3n+1``.
    """
    xg, wg_ = legendre.leggauss(n)
    # Stieltjes polynomial E_{n+1} = P_{n+1} + sum_{i<=n} e_i P_i, orthogonal
    # to P_k for k <= n under the weight P_n
    xq, wq = legendre.leggauss(2 * n + 2)
    basis = np.array([legendre.legval(xq, np.eye(n + 2)[i]) for i in range(n + 2)])
    pn = basis[n]
    A = np.einsum("q,iq,kq->ki", wq * pn, basis[: n + 1], basis[: n + 1])
    rhs = -np.einsum("q,q,kq->k", wq * pn, basis[n + 1], basis[: n + 1])
    e = np.linalg.solve(A, rhs)
    xk = np.sort(legendre.legroots(np.append(e, 1.0)).real)
    x = np.sort(np.concatenate([xg, xk]))
    V = np.array([legendre.legval(x, np.eye(2 * n + 1)[k]) for k in range(2 * n + 1)])
    moments = np.zeros(2 * n + 1)
    moments[0] = 2.0
    wk = np.linalg.solve(V, moments)
    wg = np.zeros_like(x)
    for xi, wi in zip(xg, wg_):
        wg[np.argmin(np.abs(x - xi))] = wi
    return x, wk, wg


def _unit_rule(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, wk, wg = gauss_kronrod(n)
    return 0.5 * (x + 1.0), 0.5 * wk, 0.5 * wg


def _cluster(w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quartic two-sided endpoint clustering ``w -> psi(w)`` on [0, 1].

    Returns ``(psi(w), 1 - psi(w), psi'(w))``; both distances are computed
    without cancellation.
    """

    def p(z):
        return z**4 * (35.0 + z * (-84.0 + z * (70.0 - 20.0 * z)))

    lo = np.where(w <= 0.5, p(w), 1.0 - p(1.0 - w))
    hi = np.where(w <= 0.5, 1.0 - p(w), p(1.0 - w))
    dpsi = 140.0 * w**3 * (1.0 - w) ** 3
    return lo, hi, dpsi


def edge_power(beta: float) -> int:
    """Clustering power that turns an edge factor ``x^beta`` into ``w^(>=3)``."""
    if beta == 0.0:
        return 1
    return max(2, math.ceil(4.0 / (1.0 + beta) - 1e-12))


def _clustered_1d(lo, hi, n, plo=None, phi=None):
    """Gauss-Kronrod nodes on each interval ``[lo_i, hi_i]``.

    ``plo``/``phi`` give per-cell clustering powers at the lower and upper
    end (1 = none).  A power ``p`` at one end uses ``x = lo + h w^p``; when
    both ends are singular the two-sided quartic map is used.  Returns arrays
    of shape (ncell, 2n+1): nodes, Kronrod weights, Gauss weights.
    """
    w, wk, wg = _unit_rule(n)
    lo = np.asarray(lo, float)[:, None]
    hi = np.asarray(hi, float)[:, None]
    ncell = lo.shape[0]
    plo = np.ones((ncell, 1)) if plo is None else np.asarray(plo, float)[:, None]
    phi = np.ones((ncell, 1)) if phi is None else np.asarray(phi, float)[:, None]
    h = hi - lo
    a, b, d = _cluster(w)
    both = (plo > 1) & (phi > 1)
    x = np.where(w <= 0.5, lo + h * a, hi - h * b)
    dx = h * d
    onlo = (plo > 1) & ~both
    onhi = (phi > 1) & ~both
    x = np.where(onlo, lo + h * w**plo, x)
    dx = np.where(onlo, h * plo * w ** (plo - 1), dx)
    x = np.where(onhi, hi - h * (1 - w) ** phi, x)
    dx = np.where(onhi, h * phi * (1 - w) ** (phi - 1), dx)
    plain = (plo <= 1) & (phi <= 1)
    x = np.where(plain, lo + h * w, x)
    dx = np.where(plain, h, dx)
    return x, dx * wk, dx * wg


def _cell_error(k: np.ndarray, g: np.ndarray, resabs: np.ndarray) -> np.ndarray:
    """Error heuristic ``resabs * min(1, 10 (|K - G| / resabs)^2)``.

    The Kronrod error behaves like the square of the relative Gauss-Kronrod
    discrepancy on resolved cells; the factor 10 is a safety margin.
    """
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        diff = np.abs(k - g)
        scaled = np.where(resabs > 0, resabs * np.minimum(1.0, 10.0 * (diff / resabs) ** 2), diff)
    return np.where(np.isfinite(scaled), scaled, diff)


# ---------------------------------------------------------------------------
# shell geometry on the unit square


def _split(lo: float, hi: float, breaks: Sequence[float]) -> list[tuple[float, float]]:
    pts = [lo] + sorted(b for b in breaks if lo < b < hi) + [hi]
    return list(zip(pts[:-1], pts[1:]))


def _square_shell(k: int, ubreaks=(), vbreaks=()) -> list[tuple[float, float, float, float]]:
    h = 0.5 ** (k + 1)
    squares = [(h, 2 * h, 0.0, h), (0.0, h, h, 2 * h), (h, 2 * h, h, 2 * h)]
    cells = []
    for u0, u1, v0, v1 in squares:
        for a, b in _split(u0, u1, ubreaks):
            for c, d in _split(v0, v1, vbreaks):
                cells.append((a, b, c, d))
    return cells


def _polar_shell(k: int) -> list[tuple[float, float, float, float]]:
    # cells in (rho, theta); rho is the fraction of the ray length to the square edge
    r0, r1 = 0.5 ** (k + 1), 0.5**k
    q = math.pi / 4
    return [(r0, r1, 0.0, q), (r0, r1, q, 2 * q)]


class ShellRule:
    """Nodes and weights on the unit square, grouped by shell index.

    ``u, v`` are coordinates in [0,1]^2 measured from the singular corner;
    ``wk, wg`` are Kronrod and Gauss tensor weights including the polar
    Jacobian where applicable.  ``pu``/``pv`` are clustering powers applied
    at the axes ``u = 0`` / ``v = 0``; breakpoints always get power 4.
    """

    def __init__(self, n: int, polar: bool = False, ubreaks=(), vbreaks=(), pu: int = 1, pv: int = 1):
        self.n = n
        self.polar = polar
        self.ubreaks = tuple(ubreaks)
        self.vbreaks = tuple(vbreaks)
        self.pu, self.pv = pu, pv
        self._shells: list[tuple[np.ndarray, ...]] = []

    def shell(self, k: int):
        while len(self._shells) <= k:
            self._shells.append(self._build(len(self._shells)))
        return self._shells[k]

    def _powers(self, lo, hi, axis_p, breaks):
        bset = np.array(breaks, float)
        plo = np.where(lo == 0.0, axis_p, 1)
        phi = np.ones_like(plo)
        if bset.size:
            plo = np.where(np.isin(lo, bset), 4, plo)
            phi = np.where(np.isin(hi, bset), 4, phi)
        return plo, phi

    def _build(self, k: int):
        if self.polar:
            cells = np.array(_polar_shell(k))
            pl = ph = None
            # theta = 0 is the v = 0 axis, theta = pi/2 the u = 0 axis
            ql = np.where(cells[:, 2] == 0.0, self.pv, 1)
            qh = np.where(cells[:, 3] == 2 * (math.pi / 4), self.pu, 1)
        else:
            cells = np.array(_square_shell(k, self.ubreaks, self.vbreaks))
            pl, ph = self._powers(cells[:, 0], cells[:, 1], self.pu, self.ubreaks)
            ql, qh = self._powers(cells[:, 2], cells[:, 3], self.pv, self.vbreaks)
        p, pk, pg = _clustered_1d(cells[:, 0], cells[:, 1], self.n, pl, ph)
        q, qk, qg = _clustered_1d(cells[:, 2], cells[:, 3], self.n, ql, qh)
        P = p[:, :, None] * np.ones_like(q)[:, None, :]
        Q = np.ones_like(p)[:, :, None] * q[:, None, :]
        WK = pk[:, :, None] * qk[:, None, :]
        WG = pg[:, :, None] * qg[:, None, :]
        P, Q, WK, WG = (a.reshape(len(cells), -1) for a in (P, Q, WK, WG))
        if self.polar:
            R = 1.0 / np.maximum(np.cos(Q), np.sin(Q))
            u = np.where(Q <= math.pi / 4, P, R * P * np.cos(Q))
            v = np.where(Q >= math.pi / 4, P, R * P * np.sin(Q))
            jac = R * R * P
            WK, WG = WK * jac, WG * jac
        else:
            u, v = P, Q
        cell = np.repeat(np.arange(len(cells)), P.shape[1])
        return u.ravel(), v.ravel(), WK.ravel(), WG.ravel(), cell, len(cells)

    def nodes(self, k0: int, k1: int):
        """Nodes of shells ``k0..k1-1`` with shell labels and global cell labels."""
        parts = [self.shell(k) for k in range(k0, k1)]
        u = np.concatenate([p[0] for p in parts])
        v = np.concatenate([p[1] for p in parts])
        wk = np.concatenate([p[2] for p in parts])
        wg = np.concatenate([p[3] for p in parts])
        shell = np.concatenate([np.full(len(p[0]), k - k0) for k, p in zip(range(k0, k1), parts)])
        offs = np.cumsum([0] + [p[5] for p in parts])
        cell = np.concatenate([p[4] + o for p, o in zip(parts, offs[:-1])])
        cell_shell = np.concatenate([np.full(p[5], k - k0) for k, p in zip(range(k0, k1), parts)])
        return u, v, wk, wg, shell, cell, cell_shell


def _power_map(u, v, box, exponents):
    """Map unit-square coordinates to the box with ``u = (t/T1)^(2a)``."""
    T1, T2 = box
    a, b = exponents
    pa, pb = 0.5 / a, 0.5 / b
    t = T1 * u**pa if pa != 1.0 else T1 * u
    s = T2 * v**pb if pb != 1.0 else T2 * v
    jac = T1 * T2 * pa * pb
    if pa != 1.0:
        jac = jac * u ** (pa - 1.0)
    if pb != 1.0:
        jac = jac * v ** (pb - 1.0)
    return t, s, jac + np.zeros(np.broadcast(t, s).shape)


def _rule_for(spec: QuadratureSpec, exponents, breaks=None, box=(1.0, 1.0)):
    if spec.substitution == "none":
        exponents = (0.5, 0.5)
    polar = spec.substitution == "polar_origin"
    pu = edge_power(0.5 / exponents[0] - 1.0)
    pv = edge_power(0.5 / exponents[1] - 1.0)
    if spec.substitution == "none":
        pu = pv = 4
    ub: tuple = ()
    vb: tuple = ()
    if breaks is not None:
        if polar:
            raise ValueError("breakpoints are not supported with polar_origin")
        tb, sb = breaks
        ub = tuple((x / box[0]) ** (2 * exponents[0]) for x in tb if 0 < x < box[0])
        vb = tuple((x / box[1]) ** (2 * exponents[1]) for x in sb if 0 < x < box[1])
    return ShellRule(spec.base_rule_order, polar=polar, ubreaks=ub, vbreaks=vb, pu=pu, pv=pv), exponents


# ---------------------------------------------------------------------------
# tail extrapolation and the level protocol


def shell_tail(c: np.ndarray):
    """Geometric tail estimate from shell contributions along axis -2.

    ``c`` has shape (..., K, m).  Returns ``(tail, tail_err, summable)``
    broadcast over the leading and trailing axes.
    """
    K = c.shape[-2]
    q = min(4, K // 2)
    last = c[..., K - q :, :].sum(-2)
    prev = c[..., K - 2 * q : K - q, :].sum(-2)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(prev != 0, last / np.where(prev != 0, prev, 1.0), np.nan)
    zero = (last == 0) & (prev == 0)
    geometric = (r > 0) & (r < RATIO_CEIL)
    mixed = (r <= 0) & ~zero
    summable = zero | geometric | mixed
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = np.where(geometric, last * r / (1.0 - np.where(geometric, r, 0.0)), 0.0)
    tail = np.where(summable, tail, np.inf * np.sign(np.where(last != 0, last, 1.0)))
    tail_err = np.where(mixed, np.abs(last), 0.0)
    return tail, tail_err, summable


@dataclass
class _Level:
    depth: int
    raw: np.ndarray
    ext: np.ndarray
    cub_err: np.ndarray


def _run_levels(step: Callable[[int], _Level], spec: QuadratureSpec, m: int) -> list[MomentResult]:
    """Drive refinement levels until every component converges or diverges.

    The reported error is the change of the extrapolated value between
    levels plus the accumulated cubature error.  Divergence is declared
    when the raw partial sums grew by more than ``divergence_factor`` over
    each of the last three levels while the refinement part of the error
    (the change of the extrapolated value, infinite for a non-summable
    tail) did not shrink and stayed above tolerance.
    """
    history: list[_Level] = []
    errs: list[np.ndarray] = []
    refs: list[np.ndarray] = []
    done = np.zeros(m, bool)
    status = np.array([Status.NOT_CONVERGED] * m, dtype=object)
    final_val = np.full(m, np.nan)
    final_err = np.full(m, np.inf)
    for lev in range(spec.max_depth):
        L = step(lev)
        history.append(L)
        if lev == 0:
            ref = np.full(m, np.inf)
        else:
            with np.errstate(invalid="ignore"):
                ref = np.abs(L.ext - history[-2].ext)
            ref = np.where(np.isfinite(ref), ref, np.inf)
        err = ref + L.cub_err
        errs.append(err)
        refs.append(ref)
        for i in np.flatnonzero(~done):
            tol = spec.tolerance(L.ext[i]) if np.isfinite(L.ext[i]) else 0.0
            if np.isfinite(err[i]) and err[i] <= tol:
                done[i] = True
                status[i] = Status.CONVERGED
                final_val[i], final_err[i] = L.ext[i], err[i]
            elif lev >= 3 and _diverging(history, refs, i, spec):
                done[i] = True
                status[i] = Status.DIVERGING
                final_val[i], final_err[i] = L.raw[i], np.inf
        if done.all():
            break
    last = history[-1]
    out = []
    for i in range(m):
        if not done[i]:
            v = last.ext[i] if np.isfinite(last.ext[i]) else last.raw[i]
            final_val[i], final_err[i] = v, errs[-1][i]
        hist = tuple((h.depth, float(h.raw[i]), float(h.ext[i]), float(e[i])) for h, e in zip(history, errs))
        out.append(MomentResult(float(final_val[i]), float(final_err[i]), status[i], hist))
    return out


def _diverging(history, refs, i, spec) -> bool:
    for j in range(-3, 0):
        prev, cur = history[j - 1].raw[i], history[j].raw[i]
        if not (prev != 0 and cur / prev > spec.divergence_factor):
            return False
        if not (refs[j][i] >= refs[j - 1][i]):
            return False
        ext = history[j].ext[i]
        if np.isfinite(ext) and refs[j][i] <= spec.tolerance(ext):
            return False
    return True


# ---------------------------------------------------------------------------
# evaluation helpers


def _as_2d(y, n: int) -> np.ndarray:
    """Coerce integrand output to shape (n, m)."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        return np.full((n, 1), float(y))
    if y.ndim == 1:
        return y.reshape(n, 1)
    return y.reshape(n, -1)


def _map_chunks(fn, chunks, workers: int):
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, chunks))


def _shell_starts(cell_shell: np.ndarray) -> np.ndarray:
    """Index of the first cell of every shell (cells are contiguous per shell)."""
    return np.flatnonzero(np.r_[True, cell_shell[1:] != cell_shell[:-1]])


def _reduce_cells(y, wk, wg, npc, starts):
    """Shell sums and shell cubature errors of values ``y`` (..., nodes, m).

    Nodes are grouped in contiguous cells of ``npc`` nodes and cells in
    contiguous shells beginning at ``starts``.  Returns arrays of shape
    (..., K, m).
    """
    lead = y.shape[:-2]
    m = y.shape[-1]
    ncell = y.shape[-2] // npc
    yc = y.reshape(lead + (ncell, npc, m))
    wkc = wk.reshape(ncell, npc)
    wgc = wg.reshape(ncell, npc)
    with np.errstate(invalid="ignore", over="ignore"):
        k = np.einsum("...cpm,cp->...cm", yc, wkc)
        g = np.einsum("...cpm,cp->...cm", yc, wgc)
        ra = np.einsum("...cpm,cp->...cm", np.abs(yc), np.abs(wkc))
        e = _cell_error(k, g, ra)
        ax = len(lead)
        return np.add.reduceat(k, starts, axis=ax), np.add.reduceat(e, starts, axis=ax)


# ---------------------------------------------------------------------------
# 1-D


def _combine(*parts: MomentResult) -> MomentResult:
    val = math.fsum(p.value for p in parts)
    err = math.fsum(p.error_estimate for p in parts)
    if any(p.status == Status.DIVERGING for p in parts):
        st = Status.DIVERGING
    elif all(p.converged for p in parts):
        st = Status.CONVERGED
    else:
        st = Status.NOT_CONVERGED
    return MomentResult(val, err, st, tuple(h for p in parts for h in p.history))


def integrate_1d(
    f: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    spec: QuadratureSpec = QuadratureSpec(),
    breaks: Sequence[float] = (),
    tail_power: float = 1.0,
) -> MomentResult:
    """Globally adaptive clustered Gauss-Kronrod integration of ``f`` on [a, b].

    ``b`` may be ``np.inf`` (with finite ``a``); the tail beyond ``a + 1`` is
    mapped to (0, 1] by ``x = a + w^(-p)`` with ``p = tail_power``; raise
    ``p`` for slowly decaying tails ``x^beta`` so that ``p(-beta-1) >= 3``.  Algebraic singularities are allowed at
    the endpoints and at ``breaks``; every segment is clustered at both ends.
    """
    if b == np.inf:
        if not np.isfinite(a):
            raise ValueError("only [a, inf) half lines are supported")
        # [a, a+1] directly, so an endpoint singularity at a keeps full
        # precision; the rest maps to (0, 1] by x = a + 1/w
        near = integrate_1d(f, a, a + 1.0, spec, breaks=[x for x in breaks if a < x < a + 1.0])

        p = float(tail_power)

        def g(w):
            # deep clustering can push nodes to w = 0 or overflow the
            # Jacobian; a zero integrand value there is taken as the limit
            w = np.asarray(w, float)
            pos = w > 0
            lw = np.log(np.where(pos, w, 1.0))
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                xo = np.exp(-p * lw)
                fx = np.asarray(f(a + xo), float)
                # dx/dw = p x / w, grouped so that f x stays finite
                val = p * (fx * xo) / np.where(pos, w, 1.0)
            return np.where(pos, np.where(fx == 0, 0.0, val), 0.0)

        far = integrate_1d(g, 0.0, 1.0, spec, breaks=[(x - a) ** (-1.0 / p) for x in breaks if x > a + 1.0])
        return _combine(near, far)
    if a == -np.inf:
        if not np.isfinite(b):
            raise ValueError("only (-inf, b] half lines are supported")
        return integrate_1d(lambda x: f(-x), -b, np.inf, spec, breaks=[-x for x in breaks], tail_power=tail_power)

    x0, wk0, wg0 = _unit_rule(spec.base_rule_order)

    def rule(lo, hi, u0, u1):
        # subinterval [u0, u1] of the clustered parameter range of segment [lo, hi]
        w = u0 + (u1 - u0) * x0
        p, q, d = _cluster(w)
        h = hi - lo
        x = np.where(w <= 0.5, lo + h * p, hi - h * q)
        y = np.asarray(f(x), float) * h * d * (u1 - u0)
        k, g = float(y @ wk0), float(y @ wg0)
        e = float(_cell_error(np.array(k), np.array(g), np.array(np.abs(y) @ wk0)))
        if u0 == 0.0 or u1 == 1.0:
            # cells at a possibly singular end see a fractional power of w,
            # where the squared heuristic is too optimistic
            e = max(e, abs(k - g))
        return k, e

    heap = []
    for lo, hi in _split(a, b, breaks):
        val, e = rule(lo, hi, 0.0, 1.0)
        heapq.heappush(heap, (-e, lo, hi, 0.0, 1.0, val))
    total = math.fsum(item[5] for item in heap)
    err = math.fsum(-item[0] for item in heap)
    hist = [(len(heap), total, total, err)]
    max_intervals = 50 * 2**spec.max_depth
    n_int = len(heap)
    while err > spec.tolerance(total) and n_int < max_intervals and np.isfinite(total):
        e, lo, hi, u0, u1, val = heapq.heappop(heap)
        if u1 - u0 < 1e-15:
            heapq.heappush(heap, (e, lo, hi, u0, u1, val))
            break
        um = 0.5 * (u0 + u1)
        v1, e1 = rule(lo, hi, u0, um)
        v2, e2 = rule(lo, hi, um, u1)
        heapq.heappush(heap, (-e1, lo, hi, u0, um, v1))
        heapq.heappush(heap, (-e2, lo, hi, um, u1, v2))
        n_int += 1
        total = total + v1 + v2 - val
        err = err + e1 + e2 + e
        if n_int % 64 == 0:
            total = math.fsum(item[5] for item in heap)
            err = math.fsum(-item[0] for item in heap)
    total = math.fsum(item[5] for item in heap)
    err = math.fsum(-item[0] for item in heap)
    hist.append((n_int, total, total, err))
    if not np.isfinite(total):
        return MomentResult(total, np.inf, Status.DIVERGING, tuple(hist))
    status = Status.CONVERGED if err <= spec.tolerance(total) else Status.NOT_CONVERGED
    return MomentResult(total, err, status, tuple(hist))


# ---------------------------------------------------------------------------
# 2-D


def integrate_2d_multi(
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    box: float | tuple[float, float] = 1.0,
    spec: QuadratureSpec = QuadratureSpec(),
    exponents: tuple[float, float] = (0.5, 0.5),
    breaks: tuple[Sequence[float], Sequence[float]] | None = None,
) -> list[MomentResult]:
    """Integrate a (possibly vector-valued) ``f(t, s)`` over ``[0,T1] x [0,T2]``.

    ``f`` must be finite away from the origin and accept flat arrays; a
    trailing axis of length ``m`` yields ``m`` results.  ``exponents`` set
    the power substitution ``u = (t/T1)^(2a)``, ``v = (s/T2)^(2b)``
    (``diagonal_reflect`` acts like ``power_origin`` here; it only changes
    the 4-D scheme).  ``breaks`` lists interior abscissae in t and s where
    ``f`` has algebraic singularities.
    """
    if np.isscalar(box):
        box = (float(box), float(box))
    rule, exponents = _rule_for(spec, exponents, breaks, box)
    npc = (2 * spec.base_rule_order + 1) ** 2
    shells: list[np.ndarray] = []
    cerrs: list[np.ndarray] = []

    def step(lev):
        k0, k1 = len(shells), SHELLS_PER_LEVEL * (lev + 1)
        u, v, wk, wg, shell, cell, cell_shell = rule.nodes(k0, k1)
        t, s, jac = _power_map(u, v, box, exponents)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            y = _as_2d(f(t, s), len(t)) * jac[:, None]
        ks, es = _reduce_cells(y, wk, wg, npc, _shell_starts(cell_shell))
        shells.extend(ks)
        cerrs.extend(es)
        c = np.array(shells)
        raw = c.sum(0)
        tail, terr, _ = shell_tail(c)
        return _Level(k1, raw, raw + tail, np.array(cerrs).sum(0) + terr)

    first = step(0)
    cache = {0: first}
    return _run_levels(lambda lev: cache.pop(lev) if lev in cache else step(lev), spec, first.raw.shape[0])


def integrate_2d(f, box=1.0, spec: QuadratureSpec = QuadratureSpec(), exponents=(0.5, 0.5), breaks=None) -> MomentResult:
    """Scalar wrapper of :func:`integrate_2d_multi`."""
    res = integrate_2d_multi(f, box, spec, exponents, breaks)
    if len(res) != 1:
        raise ValueError("integrand is vector valued; use integrate_2d_multi")
    return res[0]


# ---------------------------------------------------------------------------
# 4-D

_QUADRANTS = {
    "separate": (((1, 1), 4.0),),
    "joint": (((1, 1), 2.0), ((1, -1), 2.0)),
    "none": (((1, 1), 1.0), ((1, -1), 1.0), ((-1, 1), 1.0), ((-1, -1), 1.0)),
}


def _quadrant_coords(sign, bt, bs, du, dv):
    if sign[0] > 0:
        t, tp, dt = bt + du, bt, du
    else:
        t, tp, dt = bt, bt + du, -du
    if sign[1] > 0:
        s, sp, ds = bs + dv, bs, dv
    else:
        s, sp, ds = bs, bs + dv, -dv
    return t, tp, s, sp, dt, ds


def integrate_4d_multi(
    f: Callable[..., np.ndarray],
    T: float,
    spec: QuadratureSpec = QuadratureSpec(),
    exponents: tuple[float, float] = (0.5, 0.5),
    symmetry: str = "joint",
    chunk: int = 1_000_000,
) -> list[MomentResult]:
    """Integrate ``f(t, t', s, s', dt, ds)`` over ``[0,T]^4``.

    ``dt = t - t'`` and ``ds = s - s'`` are passed exactly so the integrand
    can resolve the diagonal without cancellation.  The outer integral runs
    over ``(|dt|, |ds|)`` with shells at the diagonal set, the inner one over
    the base point ``(min(t,t'), min(s,s'))`` with shells at the origin.
    ``symmetry`` states which swap invariance the caller guarantees:

    * ``"separate"``: invariant under ``t<->t'`` and ``s<->s'`` individually;
      only ``{t'<t, s'<s}`` is integrated, times 4.
    * ``"joint"``: invariant under ``(t,s)<->(t',s')``; two quadrants, times 2.
    * ``"none"``: all four sign quadrants of ``(dt, ds)``.
    """
    if symmetry not in _QUADRANTS:
        raise ValueError(f"unknown symmetry {symmetry!r}")
    rule_o, ab = _rule_for(spec, exponents)
    rule_i, _ = _rule_for(spec, exponents)
    npc = (2 * spec.base_rule_order + 1) ** 2
    quads = _QUADRANTS[symmetry]
    state: dict = {"K": 0, "n_out": 0, "C": [None] * len(quads), "E": [None] * len(quads)}

    def inner_block(sign, du, dv, k0, k1):
        """Inner shell sums and errors, shape (len(du), k1-k0, m)."""
        U, V, WK, WG, _, _, cell_shell = rule_i.nodes(k0, k1)
        S = _shell_starts(cell_shell)
        per = max(1, chunk // max(1, len(U)))
        starts = list(range(0, len(du), per))

        def work(i0):
            a_, b_ = du[i0 : i0 + per, None], dv[i0 : i0 + per, None]
            bt, bs, jac = _power_map(U[None, :], V[None, :], (T - a_, T - b_), ab)
            t, tp, s, sp, dt, ds = _quadrant_coords(sign, bt, bs, a_, b_)
            t, tp, s, sp, dt, ds = np.broadcast_arrays(t, tp, s, sp, dt, ds)
            shape = t.shape
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                y = np.asarray(f(t.ravel(), tp.ravel(), s.ravel(), sp.ravel(), dt.ravel(), ds.ravel()), float)
                y = y.reshape(shape + (-1,)) * jac[..., None]
            return _reduce_cells(y, WK, WG, npc, S)

        if len(du) == 0:
            return None
        parts = _map_chunks(work, starts, spec.workers)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def step(lev):
        K_old, K_new = state["K"], SHELLS_PER_LEVEL * (lev + 1)
        u, v, wk, wg, _, _, cell_shell = rule_o.nodes(0, K_new)
        du, dv, jo = _power_map(u, v, (T, T), ab)
        n_old = state["n_out"]
        S_out = _shell_starts(cell_shell)
        raw_tot = ext_tot = err_tot = 0.0
        for qi, (sign, mult) in enumerate(quads):
            if lev == 0:
                C, E = inner_block(sign, du, dv, 0, K_new)
            else:
                C, E = state["C"][qi], state["E"][qi]
                c1, e1 = inner_block(sign, du[:n_old], dv[:n_old], K_old, K_new)
                c2, e2 = inner_block(sign, du[n_old:], dv[n_old:], 0, K_new)
                C = np.concatenate([np.concatenate([C, c1], axis=1), c2], axis=0)
                E = np.concatenate([np.concatenate([E, e1], axis=1), e2], axis=0)
            state["C"][qi], state["E"][qi] = C, E
            g_raw = C.sum(1)
            tail, terr, _ = shell_tail(C)
            with np.errstate(invalid="ignore"):
                g_ext = g_raw + tail
                g_err = E.sum(1) + terr
            y_ext = g_ext * jo[:, None]
            with np.errstate(invalid="ignore"):
                o_shell, o_err = _reduce_cells(y_ext, wk, wg, npc, S_out)
                o_tail, o_terr, _ = shell_tail(o_shell)
                raw_tot = raw_tot + mult * ((g_raw * jo[:, None]) * wk[:, None]).sum(0)
                ext_tot = ext_tot + mult * (o_shell.sum(0) + o_tail)
                err_tot = err_tot + mult * (o_err.sum(0) + o_terr + (g_err * np.abs(jo * wk)[:, None]).sum(0))
        state["K"], state["n_out"] = K_new, len(du)
        err_tot = np.where(np.isfinite(err_tot), err_tot, np.inf)
        return _Level(K_new, np.atleast_1d(raw_tot), np.atleast_1d(ext_tot), np.atleast_1d(err_tot))

    first = step(0)
    cache = {0: first}
    return _run_levels(lambda lev: cache.pop(lev) if lev in cache else step(lev), spec, first.raw.shape[0])


def integrate_4d(f, T: float, spec: QuadratureSpec = QuadratureSpec(), exponents=(0.5, 0.5), symmetry: str = "joint") -> MomentResult:
    """Scalar wrapper of :func:`integrate_4d_multi`."""
    res = integrate_4d_multi(f, T, spec, exponents, symmetry)
    if len(res) != 1:
        raise ValueError("integrand is vector valued; use integrate_4d_multi")
    return res[0]


def integrate_4d_qmc(f, T: float, n: int = 2**20, exponents=(0.5, 0.5), symmetry: str = "joint", replicates: int = 8, seed: int = 0, batch: int = 2**18):
    """Randomized quasi-Monte Carlo cross-check for :func:`integrate_4d`.

    Uses the same increment coordinates and power substitutions; returns
    ``(mean, standard_error)`` over independently scrambled Sobol sets.
    """
    from scipy.stats import qmc

    a, b = exponents
    est = []
    for r in range(replicates):
        sob = qmc.Sobol(4, scramble=True, seed=np.random.default_rng([seed, r]))
        total = 0.0
        done = 0
        while done < n:
            m = min(batch, n - done)
            pts = sob.random(m)
            for sign, mult in _QUADRANTS[symmetry]:
                du, dv, jo = _power_map(pts[:, 0], pts[:, 1], (T, T), (a, b))
                bt, bs, ji = _power_map(pts[:, 2], pts[:, 3], (T - du, T - dv), (a, b))
                y = np.asarray(f(*_quadrant_coords(sign, bt, bs, du, dv)), float).reshape(m)
                total += mult * np.sum(y * jo * ji)
            done += m
        est.append(total / n)
    est = np.array(est)
    return float(est.mean()), float(est.std(ddof=1) / math.sqrt(replicates))


# ---------------------------------------------------------------------------
# special functions


def lower_incomplete_gamma(alpha: float, x: float) -> float:
    """Lower incomplete gamma ``int_0^x exp(-y) y^(alpha-1) dy``.

    Power series for ``x < alpha + 1``, Lentz continued fraction for the
    upper function otherwise.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 0.0
    lg = math.lgamma(alpha)
    if x < alpha + 1.0:
        term = 1.0 / alpha
        total = term
        ap = alpha
        for _ in range(10000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-17:
                break
        return total * math.exp(-x + alpha * math.log(x))
    # upper gamma by modified Lentz
    tiny = 1e-300
    bb = x + 1.0 - alpha
    c = 1.0 / tiny
    d = 1.0 / bb
    h = d
    for i in range(1, 10000):
        an = -i * (i - alpha)
        bb += 2.0
        d = an * d + bb
        d = tiny if abs(d) < tiny else d
        c = bb + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    upper = math.exp(-x + alpha * math.log(x) - lg) * h
    return math.exp(lg) * (1.0 - upper)


def gamma_bound_constant(alpha: float) -> float:
    """``max(1/alpha, Gamma(alpha))``, the constant in ``gamma(a, x) <= K x^eps``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return max(1.0 / alpha, float(special.gamma(alpha)))


def phi_H(H: float, u, v):
    """``u^2H v^2H - (u^2H + v^2H - |u-v|^2H)^2 / 4``; homogeneous of order 4H."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    a, b, c = u ** (2 * H), v ** (2 * H), np.abs(u - v) ** (2 * H)
    out = a * b - 0.25 * (a + b - c) ** 2
    return out if out.ndim else float(out)
