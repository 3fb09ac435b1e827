"""Hamiltonian, maximum-principle gap, cost-expansion residuals and exact tree optima."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adjoint import (
    NESTED_MC,
    TREE_EXACT,
    AdjointSolution,
    QuadFormHandle,
    hbar_fields,
    make_quadform,
    solve_bsde,
    spike_quadratic,
)
from .coefficients import Problem, delta_arrays
from .field import Grid1D
from .forward import (
    EnsembleError,
    NoiseEnsemble,
    StateEnsemble,
    _column,
    as_control,
    integrate,
    mean_and_stderr,
    path_costs,
    solve_state,
    state_step,
)
from .variation import SpikeSpec, solve_Y, solve_Z, spike

MAX_LEAVES = 10**6


class SearchSpaceError(ValueError):
    """Exhaustive control search would exceed the enumeration budget."""


def hamiltonian(problem: Problem, grid: Grid1D, u, X: np.ndarray, p: np.ndarray, q) -> np.ndarray | float:
    """``int [l(x,X,u) + b(x,X,u) p + sum_j sigma_j(x,X,u) q_j] dx``; batches over leading axes.

    ``q`` is a sequence of ``m`` arrays shaped like ``X``.
    """
    problem.controls.check(u)
    x = grid.nodes
    u = u if np.ndim(u) == 0 else np.asarray(u, float)[..., None]
    dens = problem.l(x, X, u) + problem.b(x, X, u) * p
    for j in range(problem.m):
        dens = dens + problem.sigma[j](x, X, u) * q[j]
    out = integrate(grid, dens)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class GapEntry:
    node: int
    t: float
    v: float
    v_label: str
    delta_h: float
    quad_term: float
    gap: float
    stderr: float
    min_gap: float
    self_gap: float
    group_gaps: np.ndarray = field(repr=False)


@dataclass
class SmpGapReport:
    entries: list[GapEntry]
    exact: bool

    @property
    def min_gap(self) -> float:
        return min(e.min_gap for e in self.entries)

    def verdict(self, tol: float = -1e-8) -> bool:
        """Tree: every pathwise gap >= tol.  MC: every mean gap >= -3 stderr."""
        if self.exact:
            return self.min_gap >= tol
        return all(e.gap >= -3.0 * e.stderr for e in self.entries)


def _group_rows(handle: QuadFormHandle, values: np.ndarray, outer: np.ndarray | None) -> np.ndarray:
    # one representative row per conditioning group
    if handle.exact:
        return values[:: handle.group_size]
    return values[outer] if outer is not None else values[: handle.n_groups]


def smp_gap(
    state: StateEnsemble,
    adjoint: AdjointSolution,
    node: int,
    v: float,
    handle: QuadFormHandle,
    outer: np.ndarray | None = None,
    include_quadratic: bool = True,
    drift_jump: bool = True,
) -> GapEntry:
    """Hamiltonian difference plus half the second-adjoint pairing of the noise jump.

    One value per conditioning group (tree atom, or outer path in nested mode):
    ``H(v) - H(ubar_t) + 1/2 <P dsigma, dsigma>`` with ``(p, q)`` taken as
    ``(pbar_t, q_t)``.  The quadratic term is evaluated on the one-step jump
    ``e^{dt A}(db dt + dsigma dW)`` (see :func:`spde_smp.adjoint.spike_quadratic`);
    with ``drift_jump=False`` only the noise part enters, so a control-free
    ``sigma`` leaves exactly the first-order Hamiltonian difference.
    """
    problem, grid = state.problem, state.grid
    if handle.node != node:
        raise EnsembleError(f"quadratic-form handle is conditioned at node {handle.node}, not {node}")
    problem.controls.check(v)
    X = _group_rows(handle, state.X[node], outer)
    ub = _group_rows(handle, state.control[node], outer)
    pb = _group_rows(handle, adjoint.pbar[node], outer)
    qq = [_group_rows(handle, adjoint.q[node, j], outer) for j in range(problem.m)]
    vv = np.full_like(ub, float(v))
    dH = hamiltonian(problem, grid, vv, X, pb, qq) - hamiltonian(problem, grid, ub, X, pb, qq)
    quad = np.zeros_like(dH)
    if include_quadratic:
        d = delta_arrays(problem, grid.nodes, X, vv[:, None], ub[:, None])
        if any(np.any(ds != 0) for ds in d.dsigma):
            quad = 0.5 * spike_quadratic(handle, d.dsigma, d.db if drift_jump else None).group_values
    gaps = dH + quad
    same = ub == float(v)
    gap, se = mean_and_stderr(gaps, exact=handle.exact)
    return GapEntry(
        node=node,
        t=node * handle.dt,
        v=float(v),
        v_label=problem.controls.label(v),
        delta_h=mean_and_stderr(dH, exact=True)[0],
        quad_term=mean_and_stderr(quad, exact=True)[0],
        gap=gap,
        stderr=se,
        min_gap=float(np.min(gaps)),
        self_gap=float(np.max(np.abs(gaps[same]), initial=0.0)),
        group_gaps=gaps,
    )


def smp_gap_report(
    state: StateEnsemble,
    adjoint: AdjointSolution,
    nodes=None,
    controls=None,
    mode: str = TREE_EXACT,
    inner: int = 256,
    outer: np.ndarray | None = None,
    seed: int = 0,
    include_quadratic: bool = True,
    drift_jump: bool = True,
) -> SmpGapReport:
    """Gap table over time nodes and control values (all of ``U`` by default)."""
    problem = state.problem
    if controls is None:
        if problem.controls.kind != "finite":
            raise EnsembleError("a box control space needs an explicit list of probe controls")
        controls = problem.controls.values
    nodes = range(state.time_grid.Nt) if nodes is None else nodes
    H = hbar_fields(state, adjoint)
    entries = []
    for n in nodes:
        handle = make_quadform(state, adjoint, int(n), mode, inner=inner, seed=seed, outer=outer, hbar=H)
        for v in controls:
            entries.append(smp_gap(state, adjoint, int(n), v, handle, outer, include_quadratic, drift_jump))
    return SmpGapReport(entries, exact=(mode == TREE_EXACT))


# ---------------------------------------------------------------------------
# cost expansions


@dataclass
class ExpansionRow:
    eps: float
    dJ: float
    first_order: float
    delta1: float
    delta2: float
    delta3: float
    delta3_l: float
    delta3_b: float
    delta3_sigma: float
    r: float
    r2: float
    stderr_r: float
    stderr_r2: float

    @property
    def r_ratio(self) -> float:
        return abs(self.r) / self.eps

    @property
    def r2_ratio(self) -> float:
        return abs(self.r2) / self.eps


def cost_expansion_residual(
    state: StateEnsemble,
    adjoint: AdjointSolution,
    t_bar: float,
    v,
    eps_list,
    hbar=None,
) -> list[ExpansionRow]:
    """Residuals of the adjoint-based and of the direct second-order cost expansions.

    ``r  = J(u^eps) - J(ubar) - E sum dt int[dl + db pbar + sum dsigma_j q_j] - Delta_3 / 2``
    ``r2 = J(u^eps) - J(ubar) - E sum dt int dl - Delta_1 - Delta_2``
    """
    problem, grid, tg, noise = state.problem, state.grid, state.time_grid, state.noise
    x, dt, N = grid.nodes, tg.dt, tg.Nt
    H, hb = hbar if hbar is not None else hbar_fields(state, adjoint)
    base = path_costs(problem, grid, state.X, state.control, dt)
    rows = []
    for eps in eps_list:
        u_eps = spike(state.control, SpikeSpec(t_bar, float(eps), v), tg, state.P, noise)
        pert = solve_state(problem, grid, u_eps, noise)
        Y = solve_Y(state, u_eps)
        Z = solve_Z(state, Y, u_eps)
        dJ = path_costs(problem, grid, pert.X, u_eps, dt) - base
        first = np.zeros(state.P)
        dl_sum = np.zeros(state.P)
        d1 = integrate(grid, problem.h(x, state.X[N], 0.0, 1) * (Y[N] + Z[N]))
        d2 = 0.5 * integrate(grid, problem.h(x, state.X[N], 0.0, 2) * Y[N] ** 2)
        d3l = integrate(grid, hb * Y[N] ** 2)
        d3b = np.zeros(state.P)
        d3s = np.zeros(state.P)
        for n in range(N):
            ub, ue = _column(state.control[n]), _column(u_eps[n])
            Xn, Y2 = state.X[n], Y[n] ** 2
            d = delta_arrays(problem, x, Xn, ue, ub)
            dens = d.dl + d.db * adjoint.pbar[n]
            for j in range(problem.m):
                dens = dens + d.dsigma[j] * adjoint.q[n, j]
            first += dt * integrate(grid, dens)
            dl_sum += dt * integrate(grid, d.dl)
            l2 = problem.l(x, Xn, ub, 2)
            d1 += dt * integrate(grid, problem.l(x, Xn, ub, 1) * (Y[n] + Z[n]))
            d2 += 0.5 * dt * integrate(grid, l2 * Y2)
            d3l += dt * integrate(grid, l2 * Y2)
            d3b += dt * integrate(grid, problem.b(x, Xn, ub, 2) * adjoint.pbar[n] * Y2)
            for j in range(problem.m):
                d3s += dt * integrate(grid, problem.sigma[j](x, Xn, ub, 2) * adjoint.q[n, j] * Y2)
        d3 = d3l + d3b + d3s
        r = dJ - first - 0.5 * d3
        r2 = dJ - dl_sum - d1 - d2
        exact = noise.is_tree
        mr, sr = mean_and_stderr(r, exact)
        mr2, sr2 = mean_and_stderr(r2, exact)
        mean = lambda a: mean_and_stderr(a, True)[0]  # noqa: E731
        rows.append(
            ExpansionRow(
                eps=float(eps), dJ=mean(dJ), first_order=mean(first), delta1=mean(d1), delta2=mean(d2),
                delta3=mean(d3), delta3_l=mean(d3l), delta3_b=mean(d3b), delta3_sigma=mean(d3s),
                r=mr, r2=mr2, stderr_r=sr, stderr_r2=sr2,
            )
        )
    return rows


def duality_residual(state: StateEnsemble, adjoint: AdjointSolution, u_eps) -> tuple[float, float]:
    """Both sides of the first-order pairing identity for the variation driven by ``u_eps``.

    ``LHS = E<h'(Xbar_T), Y_T> + E sum dt <l', Y_n>``,
    ``RHS = E sum dt [<db_n, pbar_n> + sum_j <dsigma_{j,n}, q_{j,n}>]``.
    """
    problem, grid, tg = state.problem, state.grid, state.time_grid
    x, dt, N = grid.nodes, tg.dt, tg.Nt
    Y = solve_Y(state, u_eps)
    ue_all = as_control(u_eps, tg, state.P)
    lhs = integrate(grid, problem.h(x, state.X[N], 0.0, 1) * Y[N])
    rhs = np.zeros(state.P)
    for n in range(N):
        ub, ue = _column(state.control[n]), _column(ue_all[n])
        lhs = lhs + dt * integrate(grid, problem.l(x, state.X[n], ub, 1) * Y[n])
        d = delta_arrays(problem, x, state.X[n], ue, ub)
        dens = d.db * adjoint.pbar[n]
        for j in range(problem.m):
            dens = dens + d.dsigma[j] * adjoint.q[n, j]
        rhs = rhs + dt * integrate(grid, dens)
    exact = state.noise.is_tree
    return mean_and_stderr(lhs, exact)[0], mean_and_stderr(rhs, exact)[0]


# ---------------------------------------------------------------------------
# exhaustive optimum on a tree


@dataclass
class BruteForceResult:
    control: np.ndarray
    J: float
    evaluations: int


def search_size(problem: Problem, Nt: int) -> int:
    return (len(problem.controls.values) * 2**problem.m) ** Nt


def brute_force_optimum(problem: Problem, grid: Grid1D, noise: NoiseEnsemble) -> BruteForceResult:
    """Exact minimiser of the discrete cost over all adapted (tree-node-indexed) controls.

    Subtrees are independent once the state at a node is fixed, so the search
    over all control maps reduces to a backward recursion over
    ``(|U| 2^m)^Nt`` state-control branches.  Ties go to the control listed
    first in ``U``.
    """
    if not noise.is_tree:
        raise EnsembleError("exhaustive control search needs a binary-tree ensemble")
    if problem.controls.kind != "finite":
        raise SearchSpaceError("exhaustive search needs a finite control set")
    tg = noise.time_grid
    Nt, dt, m = tg.Nt, tg.dt, problem.m
    if search_size(problem, Nt) > MAX_LEAVES:
        raise SearchSpaceError(f"search space of {search_size(problem, Nt)} branches exceeds {MAX_LEAVES}")
    x = grid.nodes
    nb = 2**m
    bits = (np.arange(nb)[None, :] >> (m - 1 - np.arange(m))[:, None]) & 1
    dW = (1.0 - 2.0 * bits) * math.sqrt(dt)  # (m, nb), child c in tree order
    U = problem.controls.values
    count = [0]

    def solve(n, X, prefix):
        count[0] += 1
        if n == Nt:
            return float(integrate(grid, problem.h(x, X))), []
        best_val, best_plan = math.inf, None
        children = np.broadcast_to(X, (nb, grid.M))
        for u in U:
            run = dt * float(integrate(grid, problem.l(x, X, u)))
            Xc = state_step(problem, grid, children, u, dW, dt)
            total, plan = 0.0, [(n, prefix, u)]
            for c in range(nb):
                val, sub = solve(n + 1, Xc[c], prefix * nb + c)
                total += val
                plan.extend(sub)
            val = run + total / nb
            if val < best_val:
                best_val, best_plan = val, plan
        return best_val, best_plan

    J, plan = solve(0, problem.initial_state(grid), 0)
    control = np.empty((Nt, noise.P))
    for n, prefix, u in plan:
        width = nb ** (Nt - n)
        control[n, prefix * width : (prefix + 1) * width] = u
    return BruteForceResult(control, J, count[0])


def perturb_control(control: np.ndarray, node: int, atom: int, value: float, m: int) -> np.ndarray:
    """Copy of a tree control with the value at one tree node (step, atom) replaced."""
    out = control.copy()
    width = control.shape[1] // 2 ** (node * m)
    out[node, atom * width : (atom + 1) * width] = value
    return out


def find_violation(
    problem: Problem, grid: Grid1D, noise: NoiseEnsemble, control: np.ndarray, tol: float = -1e-8, max_tries: int | None = None
):
    """Search one-node perturbations of ``control`` for one whose gap report goes negative.

    Returns ``(node, atom, value, report)`` for the first violating perturbation,
    or ``None``.
    """
    tg = noise.time_grid
    tries = 0
    for n in range(tg.Nt):
        for atom in range(2 ** (n * problem.m)):
            width = noise.P // 2 ** (n * problem.m)
            current = control[n, atom * width]
            for value in problem.controls.values:
                if value == current:
                    continue
                tries += 1
                if max_tries is not None and tries > max_tries:
                    return None
                pert = perturb_control(control, n, atom, value, problem.m)
                st = solve_state(problem, grid, pert, noise)
                adj = solve_bsde(st, TREE_EXACT)
                rep = smp_gap_report(st, adj)
                if rep.min_gap < tol:
                    return n, atom, value, rep
    return None


__all__ = [
    "BruteForceResult",
    "ExpansionRow",
    "GapEntry",
    "NESTED_MC",
    "SmpGapReport",
    "brute_force_optimum",
    "cost_expansion_residual",
    "duality_residual",
    "find_violation",
    "hamiltonian",
    "perturb_control",
    "smp_gap",
    "smp_gap_report",
]
