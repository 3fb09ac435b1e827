"""First adjoint BSDE and the second-order quadratic form ``<P_t f, g>``.

Discrete adjoint
----------------
With ``E = e^{dt A}`` (symmetric, so ``A* = A``) the backward recursion is

    p_N       = h'(Xbar_N)
    pbar_n    = E_n[E p_{n+1}]                    (predictable part of p)
    q_{j,n}   = E_n[E p_{n+1} dW_{j,n}] / dt
    p_n       = (1 + dt b'_n) pbar_n + dt sum_j sigma_j'_n q_{j,n} + dt l'_n

which is the exact discrete transpose of the forward linearised scheme: for any
first variation ``Y`` driven by ``(db, dsigma)``,

    E<h', Y_N> + sum_n dt E<l'_n, Y_n> = sum_n dt E[<db_n, pbar_n> + sum_j <dsigma_{j,n}, q_{j,n}>].

``E_n`` is exact on a binary tree and a least-squares regression on
polynomials of the leading sine coefficients of the state otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .coefficients import Problem
from .field import Grid1D
from .forward import (
    EnsembleError,
    StateEnsemble,
    _column,
    mean_and_stderr,
    state_step,
    tree_atom_means,
    tree_conditional_mean,
)

TREE_EXACT = "tree-exact"
REGRESSION = "regression"
NESTED_MC = "nested-mc"


class RegressionError(RuntimeError):
    """Least-squares design too ill-conditioned for a reliable conditional expectation."""


class QuadFormError(ValueError):
    """Invalid conditioning node, inputs or inner-sample request."""


# ---------------------------------------------------------------------------
# regression backend


@dataclass(frozen=True)
class Basis:
    """Polynomials of degree <= ``degree`` in the first ``size`` sine coefficients."""

    grid: Grid1D
    size: int = 4
    degree: int = 2

    def __post_init__(self):
        if not 1 <= self.size <= self.grid.M:
            raise ValueError(f"basis size must lie in 1..{self.grid.M}")
        if self.degree not in (1, 2):
            raise ValueError("basis degree must be 1 or 2")

    def features(self, X: np.ndarray) -> np.ndarray:
        c = self.grid.transform(X)[:, : self.size]
        cols = [c]
        if self.degree == 2:
            cols.append(np.stack([c[:, i] * c[:, j] for i, j in combinations_with_replacement(range(self.size), 2)], axis=1))
        return np.concatenate(cols, axis=1)

    def describe(self) -> str:
        return f"sine coefficients 1..{self.size}, polynomial degree <= {self.degree}"


@dataclass
class StepFit:
    keep: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    rank: int
    cond: float
    residual: float

    def design(self, features: np.ndarray) -> np.ndarray:
        F = (features[:, self.keep] - self.mean) / self.scale
        return np.concatenate([np.ones((features.shape[0], 1)), F], axis=1)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.design(features) @ self.coef


def fit_step(features: np.ndarray, targets: np.ndarray, rcond: float = 1e-10, cond_max: float = 1e7) -> StepFit:
    """Least-squares fit of ``targets`` (rows = paths) on standardised features.

    Exactly degenerate directions (e.g. a deterministic state, or fewer distinct
    states than features) are truncated at ``rcond``; singular values between
    ``rcond`` and ``1/cond_max`` of the largest mark a nearly collinear design
    and raise :class:`RegressionError`.
    """
    sd = features.std(axis=0)
    keep = sd > 1e-12 * max(1.0, float(np.max(np.abs(features), initial=0.0)))
    mean = features[:, keep].mean(axis=0)
    scale = sd[keep]
    fit = StepFit(keep, mean, scale, None, 0, 1.0, 0.0)
    D = fit.design(features)
    U, s, Vt = np.linalg.svd(D, full_matrices=False)
    r = s > rcond * s[0]
    cond = float(s[0] / s[r][-1])
    if cond > cond_max:
        raise RegressionError(
            f"regression design condition number {cond:.3g} exceeds {cond_max:.3g} "
            f"(rank {int(r.sum())} of {D.shape[1]} columns, singular values {np.array2string(s, precision=3)})"
        )
    fit.coef = Vt[r].T @ ((U[:, r].T @ targets) / s[r][:, None])
    fit.rank, fit.cond = int(r.sum()), cond
    resid = targets - D @ fit.coef
    denom = math.sqrt(float(np.mean(targets**2))) or 1.0
    fit.residual = math.sqrt(float(np.mean(resid**2))) / denom
    return fit


# ---------------------------------------------------------------------------
# BSDE


@dataclass(eq=False)
class AdjointSolution:
    """``p`` ``(Nt+1, P, M)``, its predictable part ``pbar`` ``(Nt, P, M)``, ``q`` ``(Nt, m, P, M)``."""

    mode: str
    p: np.ndarray
    pbar: np.ndarray
    q: np.ndarray
    basis: Basis | None = None
    fits: list[StepFit] | None = None
    diagnostics: dict = field(default_factory=dict)

    def predict(self, n: int, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(pbar_n(X), q_n(X))`` at arbitrary states (regression mode only)."""
        if self.fits is None:
            raise QuadFormError("state-feedback evaluation of (p, q) needs a regression-mode adjoint")
        fit = self.fits[n]
        out = fit.predict(self.basis.features(X))
        M = X.shape[-1]
        m = self.q.shape[1]
        return out[:, :M], np.stack([out[:, (j + 1) * M : (j + 2) * M] for j in range(m)])


def solve_bsde(
    state: StateEnsemble,
    mode: str = TREE_EXACT,
    basis_size: int = 4,
    degree: int = 2,
    cond_max: float = 1e7,
) -> AdjointSolution:
    """Backward exponential-Euler solution of the first adjoint equation."""
    problem, grid, tg, noise = state.problem, state.grid, state.time_grid, state.noise
    if mode == TREE_EXACT and not noise.is_tree:
        raise EnsembleError("tree-exact conditional expectations need a binary-tree ensemble")
    if mode not in (TREE_EXACT, REGRESSION):
        raise ValueError(f"unknown adjoint mode {mode!r}")
    x, dt, E = grid.nodes, tg.dt, grid.semigroup_matrix(tg.dt)
    Nt, P, M, m = tg.Nt, state.P, grid.M, problem.m
    p = np.empty((Nt + 1, P, M))
    pbar = np.empty((Nt, P, M))
    q = np.empty((Nt, m, P, M))
    p[Nt] = problem.h(x, state.X[Nt], 0.0, 1)
    basis = Basis(grid, basis_size, degree) if mode == REGRESSION else None
    fits: list[StepFit] = [None] * Nt if mode == REGRESSION else None
    for n in range(Nt - 1, -1, -1):
        pe = p[n + 1] @ E
        dW = noise.step(n)
        if mode == TREE_EXACT:
            pbar[n] = tree_conditional_mean(pe, n, m)
            for j in range(m):
                q[n, j] = tree_conditional_mean(pe * dW[j][:, None], n, m) / dt
        else:
            targets = np.concatenate([pe] + [pe * dW[j][:, None] / dt for j in range(m)], axis=1)
            fits[n] = fit_step(basis.features(state.X[n]), targets, cond_max=cond_max)
            fitted = fits[n].predict(basis.features(state.X[n]))
            pbar[n] = fitted[:, :M]
            for j in range(m):
                q[n, j] = fitted[:, (j + 1) * M : (j + 2) * M]
        u = _column(state.control[n])
        rhs = (1.0 + dt * problem.b(x, state.X[n], u, 1)) * pbar[n] + dt * problem.l(x, state.X[n], u, 1)
        for j in range(m):
            rhs = rhs + dt * problem.sigma[j](x, state.X[n], u, 1) * q[n, j]
        p[n] = rhs
    sol = AdjointSolution(mode, p, pbar, q, basis, fits)
    sol.diagnostics = {
        "sup_E_p2": float(np.max(np.mean(grid.h * np.sum(p**2, axis=-1), axis=1))),
        "sum_E_q2": float(dt * np.sum(np.mean(grid.h * np.sum(q**2, axis=-1), axis=-1))),
    }
    if fits is not None:
        sol.diagnostics["basis"] = basis.describe()
        sol.diagnostics["residuals"] = [f.residual for f in fits]
        sol.diagnostics["max_condition"] = max(f.cond for f in fits)
        sol.diagnostics["ranks"] = [f.rank for f in fits]
    return sol


def adjoint_discrepancy(candidate: AdjointSolution, reference: AdjointSolution, h: float) -> dict[str, float]:
    """Relative mean-square distance of two adjoint solutions on the same ensemble.

    ``p``: ``sup_n E|p_n - p*_n|^2 / sup_n E|p*_n|^2``; ``q`` uses time sums instead of sups.
    """
    if candidate.p.shape != reference.p.shape:
        raise EnsembleError("adjoint solutions live on different ensembles")

    def msq(a):
        return h * np.sum(a * a, axis=-1).mean(axis=-1)

    dp = float(np.max(msq(candidate.p - reference.p)) / max(np.max(msq(reference.p)), 1e-300))
    dq = float(np.sum(msq(candidate.q - reference.q)) / max(np.sum(msq(reference.q)), 1e-300))
    return {"p": dp, "q": dq}


def hbar_fields(state: StateEnsemble, adjoint: AdjointSolution) -> tuple[np.ndarray, np.ndarray]:
    """``Hbar_n = l'' + b'' pbar_n + sum_j sigma_j'' q_{j,n}`` for ``n < Nt`` and ``hbar = h''(Xbar_T)``."""
    problem, grid, tg = state.problem, state.grid, state.time_grid
    if adjoint.p.shape != state.X.shape:
        raise EnsembleError("adjoint was solved on a different ensemble")
    x = grid.nodes
    H = np.empty((tg.Nt, state.P, grid.M))
    for n in range(tg.Nt):
        H[n] = _hbar_at(problem, x, state.X[n], _column(state.control[n]), adjoint.pbar[n], adjoint.q[n])
    return H, problem.h(x, state.X[tg.Nt], 0.0, 2).copy()


def _hbar_at(problem: Problem, x, X, u, pbar, q):
    H = problem.l(x, X, u, 2) + problem.b(x, X, u, 2) * pbar
    for j in range(problem.m):
        H = H + problem.sigma[j](x, X, u, 2) * q[j]
    return H


# ---------------------------------------------------------------------------
# linearised flow and the quadratic form


def flow_paths(problem: Problem, grid: Grid1D, dt: float, X: np.ndarray, u: np.ndarray, dW: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Homogeneous linearised flow started from ``f`` at the first node of ``X``.

    ``X`` is ``(L+1, R, M)``, ``u`` ``(L, R)``, ``dW`` ``(R, L, m)``; returns ``(L+1, R, M)``.
    """
    L = u.shape[0]
    x, E = grid.nodes, grid.semigroup_matrix(dt)
    Y = np.empty(X.shape[:1] + (X.shape[1], grid.M))
    Y[0] = f
    for s in range(L):
        us = _column(u[s])
        rhs = Y[s] + dt * problem.b(x, X[s], us, 1) * Y[s]
        for j, sig in enumerate(problem.sigma):
            rhs = rhs + sig(x, X[s], us, 1) * Y[s] * dW[:, s, j][:, None]
        Y[s + 1] = rhs @ E
    return Y


def linearized_flow(state: StateEnsemble, node: int, f: np.ndarray) -> np.ndarray:
    """``Y^{t_node, f}`` on every path: shape ``(Nt+1-node, P, M)``; ``f`` is ``(M,)`` or ``(P, M)``."""
    tg = state.time_grid
    if not 0 <= node <= tg.Nt:
        raise QuadFormError(f"node {node} outside 0..{tg.Nt}")
    f = np.broadcast_to(np.asarray(f, dtype=float), (state.P, state.grid.M))
    return flow_paths(
        state.problem, state.grid, tg.dt, state.X[node:], state.control[node:], state.noise.increments[:, node:], f
    )


@dataclass(eq=False)
class QuadFormHandle:
    """Evaluator of ``<P_{t_node} f, g>`` on a bundle of continuation rows.

    Rows are grouped by conditioning atom: ``n_groups`` groups of ``group_size``
    consecutive rows.  In ``tree-exact`` mode the rows are all tree paths and
    a group is an atom of ``F_node``; in ``nested-mc`` mode each group holds the
    inner continuations sampled from one outer path.
    """

    mode: str
    node: int
    problem: Problem
    grid: Grid1D
    dt: float
    X: np.ndarray
    u: np.ndarray
    dW: np.ndarray
    Hbar: np.ndarray
    hbar: np.ndarray
    n_groups: int
    group_size: int
    seed: int | None = None

    @property
    def exact(self) -> bool:
        return self.mode == TREE_EXACT

    def rows(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        M = self.grid.M
        R = self.n_groups * self.group_size
        if f.shape == (M,):
            return np.broadcast_to(f, (R, M))
        if f.shape == (self.n_groups, M):
            return np.repeat(f, self.group_size, axis=0)
        if f.shape == (R, M):
            blocks = f.reshape(self.n_groups, self.group_size, M)
            if not np.all(blocks == blocks[:, :1]):
                raise QuadFormError(f"direction is not measurable with respect to F at node {self.node}")
            return f
        raise QuadFormError(f"direction of shape {f.shape} does not match the handle")

    def flow(self, f) -> np.ndarray:
        return flow_paths(self.problem, self.grid, self.dt, self.X, self.u, self.dW, self.rows(f))

    def row_values(self, Yf: np.ndarray, Yg: np.ndarray, start: int = 0) -> np.ndarray:
        """Per-row ``sum_s dt <Hbar_s, Yf_s Yg_s> + <hbar, Yf_N Yg_N>`` (symmetric in f, g).

        With ``start > 0`` the flows begin ``start`` steps after the conditioning node.
        """
        h = self.grid.h
        prod = Yf * Yg
        L = self.u.shape[0]
        running = self.dt * h * np.einsum("srm,srm->r", self.Hbar[start:], prod[: L - start]) if L > start else 0.0
        return running + h * np.sum(self.hbar * prod[L - start], axis=-1)

    def group_stats(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        blocks = values.reshape(self.n_groups, self.group_size)
        means = blocks.mean(axis=1)
        if self.exact or self.group_size < 2:
            return means, np.zeros(self.n_groups)
        return means, blocks.std(axis=1, ddof=1) / math.sqrt(self.group_size)


@dataclass
class QuadFormResult:
    group_values: np.ndarray
    group_stderr: np.ndarray
    value: float
    stderr: float


def make_quadform(
    state: StateEnsemble,
    adjoint: AdjointSolution,
    node: int,
    mode: str = TREE_EXACT,
    inner: int = 256,
    seed: int = 0,
    outer: np.ndarray | None = None,
    hbar: tuple[np.ndarray, np.ndarray] | None = None,
) -> QuadFormHandle:
    """Build a quadratic-form evaluator conditioned at time node ``node``.

    ``nested-mc`` on a tree ensemble samples continuation branches of each
    ``F_node`` atom; on a Gaussian ensemble it simulates fresh Gaussian
    continuations of the outer paths listed in ``outer`` and evaluates
    ``(pbar, q)`` through the regression fits.  Inner noise for outer row ``i``
    comes from the seed stream ``(seed, node, i)``.
    """
    problem, grid, tg, noise = state.problem, state.grid, state.time_grid, state.noise
    if not 0 <= node <= tg.Nt:
        raise QuadFormError(f"conditioning node {node} outside 0..{tg.Nt}")
    H, hb = hbar if hbar is not None else hbar_fields(state, adjoint)
    m = problem.m
    common = dict(problem=problem, grid=grid, dt=tg.dt, node=node, seed=seed)
    if mode == TREE_EXACT:
        if not noise.is_tree:
            raise QuadFormError("tree-exact quadratic form needs a binary-tree ensemble")
        atoms = 2 ** (node * m)
        return QuadFormHandle(
            mode=mode, X=state.X[node:], u=state.control[node:], dW=noise.increments[:, node:],
            Hbar=H[node:], hbar=hb, n_groups=atoms, group_size=state.P // atoms, **common,
        )
    if mode != NESTED_MC:
        raise QuadFormError(f"unknown quadratic-form mode {mode!r}")
    if inner < 2:
        raise QuadFormError("nested Monte Carlo needs at least 2 inner samples per outer path")

    if noise.is_tree:
        atoms = 2 ** (node * m)
        block = state.P // atoms
        groups = np.arange(atoms) if outer is None else np.asarray(outer)
        idx = []
        for a in groups:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(node, int(a)))))
            idx.append(a * block + rng.integers(0, block, size=inner))
        idx = np.concatenate(idx)
        return QuadFormHandle(
            mode=mode, X=state.X[node:, idx], u=state.control[node:, idx], dW=noise.increments[idx, node:],
            Hbar=H[node:, idx], hbar=hb[idx], n_groups=len(groups), group_size=inner, **common,
        )

    if adjoint.fits is None:
        raise QuadFormError("nested Monte Carlo on a Gaussian ensemble needs a regression-mode adjoint")
    u_future = state.control[node:]
    if not np.all(u_future == u_future[:, :1]):
        raise QuadFormError("nested Monte Carlo on a Gaussian ensemble needs an open-loop reference control")
    groups = np.arange(min(state.P, 64)) if outer is None else np.asarray(outer)
    L = tg.Nt - node
    R = len(groups) * inner
    dW = np.empty((R, L, m))
    for g_i, i in enumerate(groups):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(node, int(i)))))
        dW[g_i * inner : (g_i + 1) * inner] = rng.standard_normal((inner, L, m)) * math.sqrt(tg.dt)
    X = np.empty((L + 1, R, grid.M))
    X[0] = np.repeat(state.X[node, groups], inner, axis=0)
    u = np.repeat(u_future[:, :1], R, axis=1)
    Hin = np.empty((L, R, grid.M))
    x = grid.nodes
    for s in range(L):
        us = float(u[s, 0])
        pb, qq = adjoint.predict(node + s, X[s])
        Hin[s] = _hbar_at(problem, x, X[s], us, pb, qq)
        X[s + 1] = state_step(problem, grid, X[s], us, dW[:, s, :].T, tg.dt)
    return QuadFormHandle(
        mode=mode, X=X, u=u, dW=dW, Hbar=Hin, hbar=problem.h(x, X[L], 0.0, 2).copy(),
        n_groups=len(groups), group_size=inner, **common,
    )


def p_quadform(handle: QuadFormHandle, f, g) -> QuadFormResult:
    """``<P_t f, g>`` per conditioning group, with its mean over groups."""
    Yf = handle.flow(f)
    Yg = Yf if g is f else handle.flow(g)
    vals = handle.row_values(Yf, Yg)
    means, ses = handle.group_stats(vals)
    value, _ = mean_and_stderr(means, exact=True)
    stderr = 0.0 if handle.exact else math.sqrt(float(np.sum(ses**2))) / handle.n_groups
    return QuadFormResult(means, ses, value, stderr)


def spike_quadratic(handle: QuadFormHandle, dsigma, db=None) -> QuadFormResult:
    """``E_t<P_{t+dt} Y, Y> / dt`` for the one-step jump ``Y = e^{dt A}(db dt + sum_j dsigma_j dW_j)``.

    This is the second-order cost response to switching the control on a single
    step, the discrete counterpart of ``<P_t dsigma, dsigma>`` (the drift part is
    ``O(dt)``; pass ``db=None`` to drop it).  Directions are ``(M,)``,
    ``(n_groups, M)`` or per-row arrays; ``dsigma`` holds one per noise component.
    """
    L = handle.u.shape[0]
    if L < 1:
        raise QuadFormError("the one-step jump needs a conditioning node before T")
    E = handle.grid.semigroup_matrix(handle.dt)
    jump = sum(handle.rows(ds) * handle.dW[:, 0, j][:, None] for j, ds in enumerate(dsigma))
    if db is not None:
        jump = jump + handle.dt * handle.rows(db)
    jump = jump @ E
    Y = flow_paths(handle.problem, handle.grid, handle.dt, handle.X[1:], handle.u[1:], handle.dW[:, 1:], jump)
    means, ses = handle.group_stats(handle.row_values(Y, Y, start=1) / handle.dt)
    value, _ = mean_and_stderr(means, exact=True)
    stderr = 0.0 if handle.exact else math.sqrt(float(np.sum(ses**2))) / handle.n_groups
    return QuadFormResult(means, ses, value, stderr)


def materialize_p(handle: QuadFormHandle) -> np.ndarray:
    """Dense ``K[group, i, j] = <P e_i, e_j>`` in the nodal basis (grids with M <= 16 only)."""
    M = handle.grid.M
    if M > 16:
        raise QuadFormError("dense materialisation is limited to grids with M <= 16")
    flows = [handle.flow(np.eye(M)[i]) for i in range(M)]
    K = np.empty((handle.n_groups, M, M))
    for i in range(M):
        for j in range(i, M):
            means, _ = handle.group_stats(handle.row_values(flows[i], flows[j]))
            K[:, i, j] = K[:, j, i] = means
    return K


def markov_consistency(state: StateEnsemble, adjoint: AdjointSolution, Y: np.ndarray, node: int, hbar=None) -> tuple[float, float]:
    """Both sides of the restart identity for a variation ``Y`` unforced after ``node``.

    Returns ``(direct, via_P)`` with ``direct = E[sum_{s>=node} dt <Hbar_s, Y_s^2> + <hbar, Y_N^2>]``
    and ``via_P = E<P_node Y_node, Y_node>``.
    """
    H, hb = hbar if hbar is not None else hbar_fields(state, adjoint)
    h, dt, Nt = state.grid.h, state.time_grid.dt, state.time_grid.Nt
    Y2 = Y[node:] * Y[node:]
    per_path = dt * h * np.einsum("srm,srm->r", H[node:], Y2[:-1]) + h * np.sum(hb * Y2[-1], axis=-1)
    direct, _ = mean_and_stderr(per_path, exact=True)
    handle = make_quadform(state, adjoint, node, TREE_EXACT, hbar=(H, hb))
    via = p_quadform(handle, Y[node], Y[node]).value
    return direct, via


def p_continuity(state: StateEnsemble, adjoint: AdjointSolution, node: int, lags, f, g, hbar=None) -> np.ndarray:
    """``E|<(P_{t+k dt} - P_t) f, g>|`` for each lag ``k`` (tree ensembles)."""
    H = hbar if hbar is not None else hbar_fields(state, adjoint)
    base = make_quadform(state, adjoint, node, TREE_EXACT, hbar=H)
    base_vals = np.repeat(p_quadform(base, f, g).group_values, base.group_size)
    out = []
    for k in lags:
        hk = make_quadform(state, adjoint, node + int(k), TREE_EXACT, hbar=H)
        vals = np.repeat(p_quadform(hk, f, g).group_values, hk.group_size)
        out.append(mean_and_stderr(np.abs(vals - base_vals), exact=True)[0])
    return np.asarray(out)


@dataclass
class FractionalReport:
    eta: float
    nodes: list[int]
    times: list[float]
    compensated: list[float]
    uncompensated: list[float]
    max_ratio: float
    median_ratio: float

    @property
    def band(self) -> float:
        """Ratio of the largest to the smallest compensated value across nodes."""
        vals = np.asarray(self.compensated)
        return float(vals.max() / vals.min()) if vals.min() > 0 else math.inf


def fractional_ratio(handle: QuadFormHandle, f, g, eta: float, T: float) -> tuple[float, float]:
    """Largest per-group ``|<P (-A)^eta f, (-A)^eta g>| / (|f|_4 |g|_4 [bracket])``.

    Returns ``(compensated, uncompensated)``: the first includes the factor
    ``(T - t)^{2 eta}``.  The bracket is ``(sum_s dt E_t|Hbar_s|^2)^{1/2} + (E_t|hbar|^2)^{1/2}``.
    """
    if not 0 < eta < 0.25:
        raise QuadFormError(f"eta must lie in (0, 1/4), got {eta}")
    grid = handle.grid
    F = grid.fractional_power(np.asarray(f, float), eta)
    G = grid.fractional_power(np.asarray(g, float), eta)
    res = p_quadform(handle, F, G)
    nf, ng = grid.lp_norm(np.asarray(f, float), 4), grid.lp_norm(np.asarray(g, float), 4)
    nf = np.broadcast_to(nf, (handle.n_groups,)) if np.ndim(nf) == 0 else nf
    ng = np.broadcast_to(ng, (handle.n_groups,)) if np.ndim(ng) == 0 else ng
    H2 = handle.dt * grid.h * np.sum(handle.Hbar**2, axis=(0, 2)) if handle.u.shape[0] else np.zeros(handle.hbar.shape[0])
    h2 = grid.h * np.sum(handle.hbar**2, axis=-1)
    H2g, _ = handle.group_stats(H2)
    h2g, _ = handle.group_stats(h2)
    bracket = np.sqrt(H2g) + np.sqrt(h2g)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(bracket > 0, np.abs(res.group_values) / (nf * ng * bracket), 0.0)
    t = handle.node * handle.dt
    return float(np.max(raw) * (T - t) ** (2 * eta)), float(np.max(raw))


def p_fractional_diagnostic(state: StateEnsemble, adjoint: AdjointSolution, f, g, eta: float, nodes, hbar=None) -> FractionalReport:
    """Fractional-power pairing diagnostic across conditioning nodes (tree ensembles)."""
    H = hbar if hbar is not None else hbar_fields(state, adjoint)
    comp, unc = [], []
    for n in nodes:
        c, u = fractional_ratio(make_quadform(state, adjoint, int(n), TREE_EXACT, hbar=H), f, g, eta, state.time_grid.T)
        comp.append(c)
        unc.append(u)
    return FractionalReport(
        eta=eta,
        nodes=[int(n) for n in nodes],
        times=[float(state.time_grid.times[int(n)]) for n in nodes],
        compensated=comp,
        uncompensated=unc,
        max_ratio=float(np.max(comp)),
        median_ratio=float(np.median(comp)),
    )
