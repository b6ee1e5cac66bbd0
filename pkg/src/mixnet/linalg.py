"""Dense, banded and rectangular (low-rank) expert matrices.

All products accumulate left to right over columns so that a banded matrix
and its zero-filled dense twin give bit-identical results.

Random numbers come from numpy's ``PCG64`` bit generator wrapped in a
``numpy.random.Generator``.  PCG64 (128-bit LCG state, XSL-RR output) is
specified independently of platform, so a seed reproduces the same stream
everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "Matrix",
    "BandedMatrix",
    "LowRankMatrix",
    "make_rng",
    "mat_apply",
    "banded_apply",
    "banded_param_count",
    "band_mask",
    "glorot_init",
]


class ShapeError(ValueError):
    """Raised when operand dimensions do not chain."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _as_vector(x, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != n:
        raise ShapeError(f"{what}: expected vector of length {n}, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class Matrix:
    """Row-major dense matrix of float64."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 2:
            raise ShapeError(f"Matrix needs 2-d data, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Matrix entries must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def param_count(self) -> int:
        return self.rows * self.cols

    def densify(self) -> np.ndarray:
        return self.data.copy()

    def apply(self, x) -> np.ndarray:
        return mat_apply(self, x)


@dataclass(frozen=True)
class LowRankMatrix(Matrix):
    """Dimension-reducing rectangular map (``rows < cols``)."""

    def __post_init__(self):
        super().__post_init__()
        if not self.rows < self.cols:
            raise ShapeError(
                f"LowRankMatrix must reduce dimension, got {self.rows}x{self.cols}"
            )

    @property
    def out_dim(self) -> int:
        return self.rows

    @property
    def in_dim(self) -> int:
        return self.cols


@dataclass(frozen=True)
class BandedMatrix:
    """Square matrix with nonzeros only within ``band`` diagonals of the main one.

    ``diagonals`` maps offset ``k = col - row`` in ``[-band, band]`` to the
    ``n - |k|`` stored entries of that diagonal, ordered by row.
    """

    n: int
    band: int
    diagonals: dict

    def __post_init__(self):
        if not 0 <= self.band <= self.n - 1:
            raise ValueError(f"band must lie in [0, {self.n - 1}], got {self.band}")
        diags = {}
        for k in range(-self.band, self.band + 1):
            if k not in self.diagonals:
                raise ShapeError(f"missing diagonal at offset {k}")
            d = np.array(self.diagonals[k], dtype=np.float64)
            if d.shape != (self.n - abs(k),):
                raise ShapeError(
                    f"diagonal {k}: expected length {self.n - abs(k)}, got {d.shape}"
                )
            if not np.all(np.isfinite(d)):
                raise ValueError("BandedMatrix entries must be finite")
            d.setflags(write=False)
            diags[k] = d
        if set(self.diagonals) - set(diags):
            raise ShapeError("diagonal offsets outside the band")
        object.__setattr__(self, "diagonals", diags)

    @classmethod
    def from_dense(cls, dense, band: int) -> "BandedMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        n = dense.shape[0]
        if dense.shape != (n, n):
            raise ShapeError(f"banded storage needs a square matrix, got {dense.shape}")
        return cls(n, band, {k: np.diagonal(dense, k).copy() for k in range(-band, band + 1)})

    @property
    def param_count(self) -> int:
        return sum(d.size for d in self.diagonals.values())

    def densify(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        idx = np.arange(self.n)
        for k, d in self.diagonals.items():
            rows = idx[max(0, -k): self.n - max(0, k)]
            out[rows, rows + k] = d
        return out

    def apply(self, x) -> np.ndarray:
        return banded_apply(self, x)


def mat_apply(m: Matrix, x) -> np.ndarray:
    """``y = m @ x`` with left-to-right accumulation over columns."""
    x = _as_vector(x, m.cols, f"mat_apply on {m.rows}x{m.cols} matrix")
    y = np.zeros(m.rows)
    for c in range(m.cols):
        y += m.data[:, c] * x[c]
    return y


def banded_apply(m: BandedMatrix, x) -> np.ndarray:
    """Banded product, bit-identical to ``mat_apply`` on ``m.densify()``.

    Per output row the contributions arrive in ascending column order; the
    skipped out-of-band terms are exact zeros in the dense path.
    """
    x = _as_vector(x, m.n, f"banded_apply on {m.n}x{m.n} matrix")
    y = np.zeros(m.n)
    for c in range(m.n):
        lo, hi = max(0, c - m.band), min(m.n - 1, c + m.band)
        for r in range(lo, hi + 1):
            k = c - r
            y[r] += m.diagonals[k][min(r, c)] * x[c]
    return y


def banded_param_count(n: int, b: int) -> int:
    """Stored entries of an ``n x n`` matrix with half-bandwidth ``b``."""
    if not 0 <= b <= n - 1:
        raise ValueError(f"band must lie in [0, {n - 1}], got {b}")
    return n * (2 * b + 1) - b * (b + 1)


def band_mask(n: int, b: int) -> np.ndarray:
    """Boolean ``n x n`` mask of entries with ``|row - col| <= b``."""
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= b


def glorot_init(rows: int, cols: int, rng: np.random.Generator) -> Matrix:
    """Glorot-uniform matrix, entries in ``[-s, s]`` with ``s = sqrt(6/(rows+cols))``."""
    return Matrix(glorot_array(rows, cols, rng))


def glorot_array(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ShapeError(f"glorot_init needs positive dims, got {rows}x{cols}")
    s = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-s, s, size=(rows, cols))
