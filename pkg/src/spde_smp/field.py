"""Discrete Dirichlet Laplacian on (0, 1): sine basis, semigroup, fractional powers, L^p norms.

Arrays of nodal values carry the spatial index on the last axis, so a single
field has shape ``(M,)`` and an ensemble of fields ``(..., M)``.  The
:class:`Field` wrapper is a thin validated view used at API boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy import fft


class GridError(ValueError):
    """Raised for invalid grids, mismatched grids or invalid operator arguments."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform interior grid on (0, 1) with homogeneous Dirichlet boundary values.

    The discrete operator is the three-point Laplacian ``A_h``; its eigenpairs are
    ``-lambda_k`` with ``lambda_k = (4/h^2) sin^2(k pi h / 2)`` and the discrete
    sine modes, orthonormal for the ``h``-weighted inner product.
    """

    M: int

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 2:
            raise GridError(f"interior point count must be an integer >= 2, got {self.M!r}")

    @property
    def h(self) -> float:
        return 1.0 / (self.M + 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.arange(1, self.M + 1) * self.h

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        k = np.arange(1, self.M + 1)
        return (4.0 / self.h**2) * np.sin(k * np.pi * self.h / 2.0) ** 2

    def mode(self, k: int) -> np.ndarray:
        """k-th discrete sine mode (1-based), unit norm in discrete L^2."""
        if not 1 <= k <= self.M:
            raise GridError(f"mode index {k} outside 1..{self.M}")
        return np.sqrt(2.0) * np.sin(k * np.pi * self.nodes)

    def transform(self, values: np.ndarray) -> np.ndarray:
        # orthonormal DST-I: sum of squared coefficients equals sum of squared nodal values
        return fft.dst(np.asarray(values, dtype=float), type=1, norm="ortho", axis=-1)

    def inverse(self, coeffs: np.ndarray) -> np.ndarray:
        return fft.idst(np.asarray(coeffs, dtype=float), type=1, norm="ortho", axis=-1)

    def semigroup_matrix(self, t: float) -> np.ndarray:
        """Dense symmetric matrix of ``e^{tA_h}``; cached per ``t``."""
        return _semigroup_matrix(self.M, float(t))

    def _check(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-1:] != (self.M,):
            raise GridError(f"trailing axis {values.shape[-1:]} does not match grid size {self.M}")
        return values

    def apply_semigroup(self, values: np.ndarray, t: float) -> np.ndarray:
        if t < 0:
            raise GridError(f"semigroup time must be non-negative, got {t}")
        values = self._check(values)
        if t == 0:
            return values.copy()
        return self.inverse(np.exp(-self.eigenvalues * t) * self.transform(values))

    def fractional_power(self, values: np.ndarray, eta: float, sign: int = +1) -> np.ndarray:
        """Apply ``(-A)^{eta}`` (``sign=+1``) or ``(-A)^{-eta}`` (``sign=-1``)."""
        if not 0.0 <= eta <= 1.0:
            raise GridError(f"fractional exponent must lie in [0, 1], got {eta}")
        if sign not in (1, -1):
            raise GridError(f"sign must be +1 or -1, got {sign}")
        values = self._check(values)
        if eta == 0:
            return values.copy()
        return self.inverse(self.eigenvalues ** (sign * eta) * self.transform(values))

    def lp_norm(self, values: np.ndarray, p: float = 2.0) -> np.ndarray | float:
        """Midpoint-rule ``(sum_i h |f_i|^p)^{1/p}`` along the last axis."""
        if p < 1:
            raise GridError(f"L^p norm needs p >= 1, got {p}")
        values = self._check(values)
        out = (self.h * np.sum(np.abs(values) ** p, axis=-1)) ** (1.0 / p)
        return float(out) if np.ndim(out) == 0 else out

    def pair(self, f: np.ndarray, g: np.ndarray) -> np.ndarray | float:
        """Discrete duality / L^2 pairing ``sum_i h f_i g_i`` along the last axis."""
        f = self._check(f)
        g = self._check(g)
        out = self.h * np.sum(f * g, axis=-1)
        return float(out) if np.ndim(out) == 0 else out


@lru_cache(maxsize=64)
def _semigroup_matrix(M: int, t: float) -> np.ndarray:
    grid = Grid1D(M)
    eye = np.eye(M)
    S = grid.transform(eye)  # symmetric orthogonal
    mat = (S * np.exp(-grid.eigenvalues * t)) @ S
    mat = 0.5 * (mat + mat.T)
    mat.setflags(write=False)
    return mat


def laplacian_matrix(grid: Grid1D) -> np.ndarray:
    """Three-point Dirichlet Laplacian ``A_h`` as a dense matrix (for checks)."""
    M, h = grid.M, grid.h
    A = (np.diag(-2.0 * np.ones(M)) + np.diag(np.ones(M - 1), 1) + np.diag(np.ones(M - 1), -1)) / h**2
    return A


@dataclass(frozen=True, eq=False)
class Field:
    """Nodal values of a real function on a :class:`Grid1D`."""

    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.M,):
            raise GridError(f"field needs shape ({self.grid.M},), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise GridError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid: Grid1D, fn) -> Field:
        return cls(grid, np.broadcast_to(fn(grid.nodes), (grid.M,)))

    def __add__(self, other: Field) -> Field:
        _same_grid(self, other)
        return Field(self.grid, self.values + other.values)

    def __mul__(self, c: float) -> Field:
        return Field(self.grid, c * self.values)

    __rmul__ = __mul__


def _same_grid(f: Field, g: Field) -> None:
    if f.grid != g.grid:
        raise GridError(f"grid mismatch: M={f.grid.M} vs M={g.grid.M}")


def apply_semigroup(f: Field, t: float) -> Field:
    return Field(f.grid, f.grid.apply_semigroup(f.values, t))


def fractional_power(f: Field, eta: float, sign: int = +1) -> Field:
    return Field(f.grid, f.grid.fractional_power(f.values, eta, sign))


def lp_norm(f: Field, p: float = 2.0) -> float:
    return f.grid.lp_norm(f.values, p)


def duality_pair(f: Field, g: Field) -> float:
    _same_grid(f, g)
    return f.grid.pair(f.values, g.values)


def smoothing_ratio(grid: Grid1D, values: np.ndarray, eta: float, times: np.ndarray) -> np.ndarray:
    """``t^eta |(-A)^eta e^{tA} f|_2 / |f|_2`` for each row of ``values`` and each ``t``.

    Returns an array of shape ``(len(values), len(times))``.
    """
    values = np.atleast_2d(grid._check(values))
    coeffs = grid.transform(values)
    lam = grid.eigenvalues
    times = np.asarray(times, dtype=float)
    # |(-A)^eta e^{tA} f|^2 = h * sum_k lam^{2 eta} e^{-2 lam t} c_k^2
    weights = lam[None, :] ** (2 * eta) * np.exp(-2.0 * np.outer(times, lam))
    num = np.sqrt(coeffs**2 @ weights.T)
    den = np.sqrt(np.sum(coeffs**2, axis=-1))[:, None]
    return times[None, :] ** eta * num / den


def smoothing_constant(grid: Grid1D, values: np.ndarray, eta: float, times: np.ndarray) -> float:
    """Largest measured smoothing ratio over a batch of fields and times."""
    return float(np.max(smoothing_ratio(grid, values, eta, times)))


def smoothing_bound(grid: Grid1D, eta: float, times: np.ndarray) -> float:
    """Operator-norm version of :func:`smoothing_constant` (sup over all fields)."""
    times = np.asarray(times, dtype=float)
    lam = grid.eigenvalues
    return float(np.max(times[:, None] ** eta * lam[None, :] ** eta * np.exp(-np.outer(times, lam))))
