"""Spike variations and the first/second variation processes.

The linearised equations share the state's exponential-Euler scheme:

    Y_{n+1} = e^{dt A}[Y + dt (b' Y + db) + sum_j (sigma_j' Y + dsigma_j) dW_j]
    Z_{n+1} = e^{dt A}[Z + dt (b' Z + b'' Y^2/2 + db' Y)
                         + sum_j (sigma_j' Z + sigma_j'' Y^2/2 + dsigma_j' Y) dW_j]

with all coefficients evaluated along the reference path ``(Xbar, ubar)`` and
the ``d``-differences switched on only where the perturbed control differs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coefficients import Problem, delta_arrays
from .field import Grid1D
from .forward import (
    BLOCK_SIZE,
    EnsembleError,
    NoiseEnsemble,
    StateEnsemble,
    TimeGrid,
    _column,
    as_control,
    state_step,
)


class SpikeError(ValueError):
    """Spike window not aligned with the time grid or not inside (0, T)."""


@dataclass(frozen=True)
class SpikeSpec:
    """Spike ``u^eps = v`` on ``[t_bar, t_bar + eps)``, ``ubar`` elsewhere."""

    t_bar: float
    eps: float
    v: float | np.ndarray

    def nodes(self, time_grid: TimeGrid) -> tuple[int, int]:
        """Return ``(n_bar, k)``: first spike node and number of spike steps."""
        if not (self.eps > 0 and self.t_bar > 0 and self.t_bar + self.eps < time_grid.T * (1 + 1e-12)):
            raise SpikeError(f"spike [{self.t_bar}, {self.t_bar + self.eps}] is not inside (0, {time_grid.T})")
        try:
            n_bar = time_grid.node_of(self.t_bar)
            n_end = time_grid.node_of(self.t_bar + self.eps)
        except EnsembleError as exc:
            raise SpikeError(str(exc)) from None
        if n_end >= time_grid.Nt:
            raise SpikeError("spike must end strictly before T")
        k = n_end - n_bar
        if k < 1:
            raise SpikeError(f"spike width {self.eps} is below one time step {time_grid.dt}")
        return n_bar, k


def spike(ubar, spec: SpikeSpec, time_grid: TimeGrid, P: int = 1, noise: NoiseEnsemble | None = None) -> np.ndarray:
    """Spike-perturbed control of shape ``(Nt, P)``.

    ``spec.v`` may be a scalar or, in tree mode, a per-path array that must be
    constant on the atoms of ``F_{t_bar}`` (a node-indexed control value).
    """
    n_bar, k = spec.nodes(time_grid)
    u = as_control(ubar, time_grid, P).copy()
    v = np.asarray(spec.v, dtype=float)
    if v.ndim == 1:
        if v.shape != (P,):
            raise SpikeError(f"path-indexed spike value needs shape ({P},), got {v.shape}")
        if noise is not None and noise.is_tree:
            blocks = v.reshape(2 ** (n_bar * noise.m), -1)
            if not np.all(blocks == blocks[:, :1]):
                raise SpikeError("spike value is not measurable with respect to F_{t_bar}")
    u[n_bar : n_bar + k] = v
    return u


def y_step(Y, b1, db, s1, ds, dW, E, dt):
    rhs = Y + dt * (b1 * Y + db)
    for j in range(len(s1)):
        rhs = rhs + (s1[j] * Y + ds[j]) * dW[j][:, None]
    return rhs @ E


def z_step(Z, Y, b1, b2, db1, s1, s2, ds1, dW, E, dt):
    Y2 = Y * Y
    rhs = Z + dt * (b1 * Z + 0.5 * b2 * Y2 + db1 * Y)
    for j in range(len(s1)):
        rhs = rhs + (s1[j] * Z + 0.5 * s2[j] * Y2 + ds1[j] * Y) * dW[j][:, None]
    return rhs @ E


def _reference_derivatives(problem: Problem, x, Xn, u):
    b1 = problem.b(x, Xn, u, 1)
    b2 = problem.b(x, Xn, u, 2)
    s1 = [s(x, Xn, u, 1) for s in problem.sigma]
    s2 = [s(x, Xn, u, 2) for s in problem.sigma]
    return b1, b2, s1, s2


def solve_Y(state: StateEnsemble, u_eps) -> np.ndarray:
    """First variation ``Y`` of shape ``(Nt+1, P, M)`` along ``state`` for control ``u_eps``."""
    problem, grid, tg = state.problem, state.grid, state.time_grid
    u_eps = as_control(u_eps, tg, state.P)
    problem.controls.check(u_eps)
    x, E, dt = grid.nodes, grid.semigroup_matrix(tg.dt), tg.dt
    Y = np.zeros_like(state.X)
    for n in range(tg.Nt):
        ub, ue = _column(state.control[n]), _column(u_eps[n])
        b1, _, s1, _ = _reference_derivatives(problem, x, state.X[n], ub)
        d = delta_arrays(problem, x, state.X[n], ue, ub)
        Y[n + 1] = y_step(Y[n], b1, d.db, s1, d.dsigma, state.noise.step(n), E, dt)
    return Y


def solve_Z(state: StateEnsemble, Y: np.ndarray, u_eps) -> np.ndarray:
    """Second variation ``Z`` driven by ``Y`` (computed on the same noise)."""
    problem, grid, tg = state.problem, state.grid, state.time_grid
    if Y.shape != state.X.shape:
        raise EnsembleError("Y does not match the state ensemble")
    u_eps = as_control(u_eps, tg, state.P)
    x, E, dt = grid.nodes, grid.semigroup_matrix(tg.dt), tg.dt
    Z = np.zeros_like(state.X)
    for n in range(tg.Nt):
        ub, ue = _column(state.control[n]), _column(u_eps[n])
        b1, b2, s1, s2 = _reference_derivatives(problem, x, state.X[n], ub)
        d = delta_arrays(problem, x, state.X[n], ue, ub)
        Z[n + 1] = z_step(Z[n], Y[n], b1, b2, d.db1, s1, s2, d.dsigma1, state.noise.step(n), E, dt)
    return Z


# ---------------------------------------------------------------------------
# streaming order study


@dataclass
class VariationRow:
    eps: float
    p: float
    norm_Y: float
    norm_Z: float
    norm_remainder: float
    stderr_Y: float
    stderr_Z: float
    stderr_remainder: float


@dataclass
class OrderSlopes:
    slope_Y: float
    slope_Z: float
    slope_remainder: float
    table: list[VariationRow] = field(default_factory=list)


def _sup_moment(sums: np.ndarray, sq: np.ndarray, P: int, power: float) -> tuple[float, float]:
    """``max_n (E S_n)^{1/power}`` and a delta-method standard error at the argmax."""
    mean = sums / P
    n = int(np.argmax(mean))
    mu = mean[n]
    if mu <= 0:
        return 0.0, 0.0
    var = max(sq[n] / P - mu * mu, 0.0) / max(P - 1, 1)
    value = mu ** (1.0 / power)
    return float(value), float(value / (power * mu) * math.sqrt(var))


def _power_norm(grid: Grid1D, Y: np.ndarray, p: float) -> np.ndarray:
    # |Y|_p^p per path; integer even powers avoid the slow float pow
    if p == 2:
        return grid.h * np.einsum("ij,ij->i", Y, Y)
    if p == 4:
        Y2 = Y * Y
        return grid.h * np.einsum("ij,ij->i", Y2, Y2)
    return grid.h * np.sum(np.abs(Y) ** p, axis=-1)


def _chunk_sums(problem, grid, noise, ubar, n_bar, widths, v, p, lo, hi):
    """Per-node sums over paths ``lo:hi`` of |Y|_p^p, |Z|_p^p, |R|_2^2 and their squares."""
    tg = noise.time_grid
    Nt, dt = tg.Nt, tg.dt
    x, E = grid.nodes, grid.semigroup_matrix(dt)
    P = hi - lo
    dWall = noise.increments[lo:hi]
    u = ubar[:, lo:hi]
    v = v if np.ndim(v) == 0 else np.asarray(v)[lo:hi, None]
    out = np.zeros((len(widths), 6, Nt + 1))

    Xb = np.broadcast_to(problem.initial_state(grid), (P, grid.M)).copy()
    for n in range(n_bar):
        Xb = state_step(problem, grid, Xb, _column(u[n]), dWall[:, n, :].T, dt)
    Xe = [Xb.copy() for _ in widths]
    Y = [np.zeros_like(Xb) for _ in widths]
    Z = [np.zeros_like(Xb) for _ in widths]
    zero = np.zeros(problem.m)
    for n in range(n_bar, Nt):
        dW = dWall[:, n, :].T
        ub = _column(u[n])
        b1, b2, s1, s2 = _reference_derivatives(problem, x, Xb, ub)
        d = delta_arrays(problem, x, Xb, v, ub) if n < n_bar + max(widths) else None
        for i, k in enumerate(widths):
            on = n < n_bar + k
            if on:
                db, ds, db1, ds1, ue = d.db, d.dsigma, d.db1, d.dsigma1, v
            else:
                db, ds, db1, ds1, ue = 0.0, zero, 0.0, zero, ub
            Znew = z_step(Z[i], Y[i], b1, b2, db1, s1, s2, ds1, dW, E, dt)
            Y[i] = y_step(Y[i], b1, db, s1, ds, dW, E, dt)
            Z[i] = Znew
            Xe[i] = state_step(problem, grid, Xe[i], ue, dW, dt)
        Xb = state_step(problem, grid, Xb, ub, dW, dt)
        for i in range(len(widths)):
            nY = _power_norm(grid, Y[i], p)
            nZ = _power_norm(grid, Z[i], p)
            R = Xe[i] - Xb - Y[i] - Z[i]
            nR = _power_norm(grid, R, 2)
            out[i, :, n + 1] = (nY.sum(), (nY * nY).sum(), nZ.sum(), (nZ * nZ).sum(), nR.sum(), (nR * nR).sum())
    return out


def variation_table(
    problem: Problem,
    grid: Grid1D,
    noise: NoiseEnsemble,
    ubar,
    t_bar: float,
    v,
    eps_list,
    p: float = 4.0,
    threads: int = 1,
) -> list[VariationRow]:
    """Spike-width study: sup-in-time moments of ``Y``, ``Z`` and the remainder.

    For each width the perturbed state, ``Y`` and ``Z`` are propagated jointly
    with the reference state on common noise, without storing paths; paths are
    processed in blocks of ``BLOCK_SIZE`` and block sums are combined with
    exactly rounded summation, so results do not depend on ``threads``.
    """
    tg = noise.time_grid
    specs = [SpikeSpec(t_bar, float(e), v) for e in eps_list]
    nodes = [s.nodes(tg) for s in specs]
    n_bar = nodes[0][0]
    widths = [k for _, k in nodes]
    u = as_control(ubar, tg, noise.P)
    problem.controls.check(u)
    problem.controls.check(v)
    bounds = [(lo, min(lo + BLOCK_SIZE, noise.P)) for lo in range(0, noise.P, BLOCK_SIZE)]

    def work(b):
        return _chunk_sums(problem, grid, noise, u, n_bar, widths, v, p, *b)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    stacked = np.stack(parts)
    total = np.zeros(stacked.shape[1:])
    for idx in np.ndindex(*total.shape):
        total[idx] = math.fsum(stacked[(slice(None),) + idx])

    rows = []
    for i, spec in enumerate(specs):
        nY, sY = _sup_moment(total[i, 0], total[i, 1], noise.P, p)
        nZ, sZ = _sup_moment(total[i, 2], total[i, 3], noise.P, p)
        nR, sR = _sup_moment(total[i, 4], total[i, 5], noise.P, 2.0)
        if noise.is_tree:
            sY = sZ = sR = 0.0
        rows.append(VariationRow(spec.eps, p, nY, nZ, nR, sY, sZ, sR))
    return rows


def fit_slope(eps, values) -> float:
    """Least-squares slope of ``log values`` against ``log eps``."""
    le, lv = np.log(np.asarray(eps, float)), np.log(np.asarray(values, float))
    return float(np.polyfit(le, lv, 1)[0])


def order_slopes(
    problem: Problem,
    grid: Grid1D,
    noise: NoiseEnsemble,
    ubar,
    t_bar: float,
    v,
    eps_list,
    p: float = 4.0,
    threads: int = 1,
) -> OrderSlopes:
    """Convergence slopes of ``Y``, ``Z`` and the expansion remainder in the spike width."""
    eps = np.sort(np.asarray(eps_list, dtype=float))[::-1]
    if eps.size < 4:
        raise SpikeError(f"the eps ladder needs at least 4 points, got {eps.size}")
    ratios = eps[:-1] / eps[1:]
    if not np.allclose(ratios, ratios[0], rtol=1e-9):
        raise SpikeError("the eps ladder must be geometrically spaced")
    table = variation_table(problem, grid, noise, ubar, t_bar, v, eps, p, threads)
    e = [r.eps for r in table]
    return OrderSlopes(
        slope_Y=fit_slope(e, [r.norm_Y for r in table]),
        slope_Z=fit_slope(e, [r.norm_Z for r in table]),
        slope_remainder=fit_slope(e, [r.norm_remainder for r in table]),
        table=table,
    )
