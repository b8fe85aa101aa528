"""Exact sampling of fractional Brownian motion on uniform grids.

Paths come from circulant embedding of the fractional Gaussian noise
covariance (Davies-Harte), with a dense Cholesky fallback whenever the
embedding spectrum has a genuinely negative eigenvalue.  Every coordinate
process draws from its own counter-based stream keyed by
``(seed, replicate, process, coordinate)``.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from flit.core import ProblemSpec

NEG_TOL = 1e-9  # relative tolerance on negative embedding eigenvalues
DUMP_MAGIC = b"FLITPATH"
DUMP_VERSION = 1


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.n

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.dt

    def index_of(self, t: float) -> int:
        i = int(round(t / self.dt))
        if not (0 <= i <= self.n) or abs(i * self.dt - t) > 1e-9 * self.T:
            raise ValueError(f"{t} is not a grid point")
        return i


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent Philox stream for ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, keys)])))


def fgn_autocov(H: float, n: int) -> np.ndarray:
    """Autocovariance of unit-step fractional Gaussian noise at lags 0..n."""
    k = np.arange(n + 1, dtype=float)
    return 0.5 * (np.abs(k + 1) ** (2 * H) - 2 * k ** (2 * H) + np.abs(k - 1) ** (2 * H))


@lru_cache(maxsize=64)
def circulant_spectrum(H: float, n: int) -> np.ndarray | None:
    """Eigenvalues of the size-2n circulant embedding, or None if not PSD."""
    g = fgn_autocov(H, n)
    row = np.concatenate([g, g[-2:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -NEG_TOL * lam.max():
        return None
    # the remaining negatives are rounding noise of size <= NEG_TOL * max
    return np.where(lam > 0, lam, 0.0)


@lru_cache(maxsize=64)
def _cholesky_factor(H: float, n: int) -> np.ndarray:
    t = np.arange(1, n + 1, dtype=float)
    C = 0.5 * (t[:, None] ** (2 * H) + t[None, :] ** (2 * H) - np.abs(t[:, None] - t[None, :]) ** (2 * H))
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"covariance matrix for H={H}, n={n} is not positive definite") from exc


def sample_fbm_1d(
    H: float,
    grid: TimeGrid,
    rng: np.random.Generator,
    size: int | None = None,
    method: str = "auto",
) -> np.ndarray:
    """Sample fBm at the grid points; shape (n+1,) or (size, n+1).

    ``method`` is ``auto`` (circulant with Cholesky fallback), ``circulant``
    (error if the embedding is not PSD) or ``cholesky``.
    """
    if not 0 < H < 1:
        raise ValueError("H must lie in (0, 1)")
    n = grid.n
    m = 1 if size is None else size
    scale = grid.dt**H
    lam = None if method == "cholesky" else circulant_spectrum(H, n)
    if lam is None and method == "circulant":
        raise RuntimeError("circulant embedding is not positive semidefinite")
    if lam is not None:
        M = 2 * n
        z = rng.standard_normal((m, M)) + 1j * rng.standard_normal((m, M))
        incr = np.fft.fft(np.sqrt(lam / M) * z, axis=1)[:, :n].real
        path = np.cumsum(incr, axis=1)
    else:
        L = _cholesky_factor(H, n)
        path = rng.standard_normal((m, n)) @ L.T
    out = np.concatenate([np.zeros((m, 1)), scale * path], axis=1)
    return out[0] if size is None else out


@dataclass(frozen=True)
class PathPair:
    b1: np.ndarray
    b2: np.ndarray
    grid: TimeGrid
    seed: int
    replicate: int = 0

    def __post_init__(self):
        for b in (self.b1, self.b2):
            b.setflags(write=False)


def sample_pair(spec: ProblemSpec, grid: TimeGrid, seed: int, replicate: int = 0, method: str = "auto") -> PathPair:
    """Two independent d-dimensional fBms; process i, coordinate j use stream (seed, replicate, i, j)."""
    if abs(grid.T - spec.T) > 1e-12 * spec.T:
        raise ValueError("grid horizon differs from spec.T")
    b = []
    for i, hv in enumerate((spec.h1, spec.h2)):
        b.append(np.stack([sample_fbm_1d(h, grid, substream(seed, replicate, i, j), method=method) for j, h in enumerate(hv)]))
    return PathPair(b[0], b[1], grid, seed, replicate)


# ---------------------------------------------------------------------------
# dump formats
#
# binary: magic "FLITPATH", then little-endian uint32 version, uint32 d,
# uint32 n, float64 T, uint64 seed, uint32 count; then for each pair the
# arrays b1 and b2 as (d, n+1) little-endian float64, row major.

_HEADER = struct.Struct("<8sIIIdQI")


def write_binary(path, pairs: list[PathPair]) -> None:
    if not pairs:
        raise ValueError("nothing to write")
    p0 = pairs[0]
    d, n1 = p0.b1.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, d, n1 - 1, p0.grid.T, int(p0.seed) & (2**64 - 1), len(pairs)))
        for p in pairs:
            fh.write(np.ascontiguousarray(p.b1, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(p.b2, dtype="<f8").tobytes())


def read_binary(path) -> list[PathPair]:
    raw = Path(path).read_bytes()
    magic, ver, d, n, T, seed, count = _HEADER.unpack_from(raw, 0)
    if magic != DUMP_MAGIC or ver != DUMP_VERSION:
        raise ValueError("not a path dump")
    grid = TimeGrid(T, n)
    arr = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(count, 2, d, n + 1)
    return [PathPair(arr[r, 0].copy(), arr[r, 1].copy(), grid, seed, r) for r in range(count)]


def to_csv(pairs: list[PathPair]) -> str:
    """Long format: replicate, process, coordinate, index, t, value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replicate", "process", "coordinate", "index", "t", "value"])
    for p in pairs:
        ts = p.grid.points
        for i, b in enumerate((p.b1, p.b2), start=1):
            for j in range(b.shape[0]):
                for k in range(b.shape[1]):
                    w.writerow([p.replicate, i, j, k, repr(float(ts[k])), repr(float(b[j, k]))])
    return buf.getvalue()
