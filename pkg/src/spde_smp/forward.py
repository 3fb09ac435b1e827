"""Noise ensembles, exponential-Euler state simulation and cost estimation.

Two noise modes share one code path.  ``gaussian-mc`` draws i.i.d. Gaussian
increments; ``binary-tree`` enumerates every sequence of ``+-sqrt(dt)``
increments with uniform weight, so ensemble means are exact expectations of the
discrete dynamics.  Tree paths are ordered with the first time step as the most
significant bit of the path index, so paths sharing a noise prefix are
contiguous and the filtration ``F_n`` corresponds to blocks of equal size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coefficients import Problem
from .field import Grid1D

GAUSSIAN = "gaussian-mc"
TREE = "binary-tree"
TREE_DEPTH_CAP = 22
BLOCK_SIZE = 1024
STREAM_POLICY = "seedsequence-block1024-v1"


class SimulationError(RuntimeError):
    """Raised on non-finite state values, with path and step diagnostics."""


class EnsembleError(ValueError):
    """Invalid noise request or mismatched ensemble / control / grid."""


@dataclass(frozen=True)
class TimeGrid:
    T: float
    Nt: int

    def __post_init__(self):
        if int(self.Nt) != self.Nt or self.Nt < 2:
            raise EnsembleError(f"need at least 2 time steps, got {self.Nt!r}")
        if not self.T > 0:
            raise EnsembleError(f"horizon must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.Nt

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.Nt + 1) * self.dt
        t[-1] = self.T
        return t

    def node_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of the node at time ``t``; raises if ``t`` is not grid-aligned."""
        k = t / self.dt
        n = int(round(k))
        if abs(k - n) > tol * max(1.0, abs(k)) or not 0 <= n <= self.Nt:
            raise EnsembleError(f"time {t} is not a node of the grid with dt={self.dt}")
        return n


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    """Brownian increments with layout ``(P, Nt, m)``."""

    mode: str
    increments: np.ndarray
    time_grid: TimeGrid
    seed: int | None = None
    policy: str = STREAM_POLICY

    @property
    def P(self) -> int:
        return self.increments.shape[0]

    @property
    def m(self) -> int:
        return self.increments.shape[2]

    @property
    def is_tree(self) -> bool:
        return self.mode == TREE

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.P, 1.0 / self.P)

    def step(self, n: int) -> np.ndarray:
        """Increments of step ``n`` as an array of shape ``(m, P)``."""
        return self.increments[:, n, :].T

    def subset(self, paths: np.ndarray | slice) -> NoiseEnsemble:
        return NoiseEnsemble(self.mode, self.increments[paths], self.time_grid, self.seed, self.policy)


def tree_increments(time_grid: TimeGrid, m: int) -> np.ndarray:
    depth = time_grid.Nt * m
    if depth > TREE_DEPTH_CAP:
        raise EnsembleError(f"tree of depth Nt*m = {depth} exceeds the enumeration cap {TREE_DEPTH_CAP}")
    idx = np.arange(2**depth, dtype=np.int64)
    shifts = depth - 1 - np.arange(depth)
    bits = (idx[:, None] >> shifts[None, :]) & 1
    signs = 1.0 - 2.0 * bits  # bit 0 -> +sqrt(dt)
    return (signs * math.sqrt(time_grid.dt)).reshape(2**depth, time_grid.Nt, m)


def _gaussian_block(seed: int, block: int, size: int, time_grid: TimeGrid, m: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(block,))
    rng = np.random.Generator(np.random.PCG64(ss))
    return rng.standard_normal((size, time_grid.Nt, m)) * math.sqrt(time_grid.dt)


def sample_noise(time_grid: TimeGrid, m: int, mode: str = GAUSSIAN, paths: int | None = None, seed: int = 0) -> NoiseEnsemble:
    """Draw (``gaussian-mc``) or enumerate (``binary-tree``) Brownian increments.

    Gaussian paths are generated in fixed blocks of ``BLOCK_SIZE`` paths, each
    from its own spawned seed stream, so the ensemble does not depend on how the
    work is later split across workers.
    """
    if m < 1:
        raise EnsembleError("noise dimension m must be >= 1")
    if mode in (TREE, "tree"):
        return NoiseEnsemble(TREE, tree_increments(time_grid, m), time_grid, seed)
    if mode not in (GAUSSIAN, "mc"):
        raise EnsembleError(f"unknown noise mode {mode!r}")
    if paths is None or paths < 1:
        raise EnsembleError("gaussian-mc needs a positive path count")
    seed = int(seed) % 2**64
    blocks = []
    for block, start in enumerate(range(0, paths, BLOCK_SIZE)):
        blocks.append(_gaussian_block(seed, block, min(BLOCK_SIZE, paths - start), time_grid, m))
    return NoiseEnsemble(GAUSSIAN, np.concatenate(blocks, axis=0), time_grid, seed)


def tree_conditional_mean(values: np.ndarray, n: int, m: int) -> np.ndarray:
    """Exact ``E[values | F_n]`` on a full binary tree, broadcast back to all paths.

    ``values`` has the path index on axis 0 and ``2^(Nt m)`` rows.
    """
    P = values.shape[0]
    atoms = 2 ** (n * m)
    if P % atoms:
        raise EnsembleError("ensemble size is not a full tree")
    blocks = values.reshape(atoms, P // atoms, *values.shape[1:])
    mean = blocks.mean(axis=1, keepdims=True)
    return np.broadcast_to(mean, blocks.shape).reshape(values.shape)


def tree_atom_means(values: np.ndarray, n: int, m: int) -> np.ndarray:
    """One value per ``F_n`` atom: block means of size ``P / 2^(n m)``."""
    atoms = 2 ** (n * m)
    return values.reshape(atoms, values.shape[0] // atoms, *values.shape[1:]).mean(axis=1)


def compensated_mean(values: np.ndarray) -> float:
    """Exactly rounded mean, independent of summation order."""
    values = np.asarray(values, dtype=float).ravel()
    return math.fsum(values) / values.size


def mean_and_stderr(values: np.ndarray, exact: bool) -> tuple[float, float]:
    values = np.asarray(values, dtype=float).ravel()
    mean = compensated_mean(values)
    if exact or values.size < 2:
        return mean, 0.0
    dev = values - mean
    var = math.fsum(dev * dev) / (values.size - 1)
    return mean, math.sqrt(var / values.size)


def as_control(control, time_grid: TimeGrid, P: int) -> np.ndarray:
    """Normalise a control to shape ``(Nt, P)``.

    Accepts a scalar, a deterministic open-loop trace of shape ``(Nt,)``, or a
    path-dependent array ``(Nt, P)``.
    """
    u = np.asarray(control, dtype=float)
    if u.ndim == 0:
        return np.full((time_grid.Nt, P), float(u))
    if u.shape == (time_grid.Nt,):
        return np.repeat(u[:, None], P, axis=1)
    if u.shape == (time_grid.Nt, P):
        return u
    raise EnsembleError(f"control of shape {u.shape} does not match (Nt={time_grid.Nt}, P={P})")


@dataclass(frozen=True, eq=False)
class StateEnsemble:
    """Simulated state paths ``X`` of shape ``(Nt+1, P, M)`` with their control and noise."""

    problem: Problem
    grid: Grid1D
    noise: NoiseEnsemble
    control: np.ndarray
    X: np.ndarray

    @property
    def time_grid(self) -> TimeGrid:
        return self.noise.time_grid

    @property
    def P(self) -> int:
        return self.X.shape[1]


def state_step(problem: Problem, grid: Grid1D, X: np.ndarray, u, dW: np.ndarray, dt: float) -> np.ndarray:
    """One exponential-Euler step ``e^{dt A}[X + dt b(X,u) + sum_j sigma_j(X,u) dW_j]``.

    ``X`` is ``(P, M)``, ``u`` a scalar or ``(P, 1)`` column, ``dW`` has shape ``(m, P)``.
    """
    x = grid.nodes
    rhs = X + dt * problem.b(x, X, u)
    for j, sig in enumerate(problem.sigma):
        rhs = rhs + sig(x, X, u) * dW[j][:, None]
    return rhs @ grid.semigroup_matrix(dt)


def _column(u_n: np.ndarray):
    # control slice of one step: scalar if constant across paths
    if u_n.size and np.all(u_n == u_n[0]):
        return float(u_n[0])
    return u_n[:, None]


def solve_state(problem: Problem, grid: Grid1D, control, noise: NoiseEnsemble, check: bool = True) -> StateEnsemble:
    """Simulate the mild state equation on every path of ``noise``."""
    if noise.m != problem.m:
        raise EnsembleError(f"noise has m={noise.m} components, problem needs {problem.m}")
    if not math.isclose(noise.time_grid.T, problem.T):
        raise EnsembleError("noise horizon differs from the problem horizon")
    tg = noise.time_grid
    u = as_control(control, tg, noise.P)
    if check:
        problem.controls.check(u)
    X = np.empty((tg.Nt + 1, noise.P, grid.M))
    X[0] = problem.initial_state(grid)
    for n in range(tg.Nt):
        X[n + 1] = state_step(problem, grid, X[n], _column(u[n]), noise.step(n), tg.dt)
        if not np.all(np.isfinite(X[n + 1])):
            bad = int(np.argwhere(~np.isfinite(X[n + 1]))[0, 0])
            raise SimulationError(f"non-finite state on path {bad} at step {n + 1}")
    return StateEnsemble(problem, grid, noise, u, X)


def integrate(grid: Grid1D, values: np.ndarray) -> np.ndarray:
    """Midpoint-rule integral over (0, 1) along the last axis."""
    return grid.h * np.sum(values, axis=-1)


def path_costs(problem: Problem, grid: Grid1D, X: np.ndarray, control: np.ndarray, dt: float) -> np.ndarray:
    """Per-path discrete cost: left-endpoint time sum of ``int l`` plus ``int h`` at ``T``."""
    x = grid.nodes
    Nt = control.shape[0]
    running = np.zeros(X.shape[1])
    for n in range(Nt):
        running += dt * integrate(grid, problem.l(x, X[n], _column(control[n])))
    return running + integrate(grid, problem.h(x, X[Nt]))


def cost(problem: Problem, state: StateEnsemble) -> tuple[float, float]:
    """Cost ``J`` and its standard error (zero in tree mode, where ``J`` is exact)."""
    if state.control.shape != (state.time_grid.Nt, state.P):
        raise EnsembleError("control does not match the state ensemble")
    values = path_costs(problem, state.grid, state.X, state.control, state.time_grid.dt)
    return mean_and_stderr(values, exact=state.noise.is_tree)
