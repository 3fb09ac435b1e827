import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spde_smp.coefficients import load_preset, make_problem
from spde_smp.field import Grid1D
from spde_smp.forward import EnsembleError, TimeGrid, sample_noise, solve_state
from spde_smp.variation import (
    SpikeError,
    SpikeSpec,
    fit_slope,
    order_slopes,
    solve_Y,
    solve_Z,
    spike,
    variation_table,
)
from tests import oracles

TG8 = TimeGrid(1.0, 8)


def test_spike_examples():
    u = spike(0.0, SpikeSpec(0.25, 0.125, 0.0), TG8)
    assert np.array_equal(u, np.zeros((8, 1)))
    u = spike(0.0, SpikeSpec(0.25, 0.125, 1.0), TG8)
    assert np.flatnonzero(u[:, 0]).tolist() == [2]
    u = spike(-1.0, SpikeSpec(3 * 0.125, 0.25, 1.0), TG8)
    assert np.flatnonzero(u[:, 0] != -1.0).tolist() == [3, 4]


@pytest.mark.parametrize(
    "t_bar,eps",
    [(0.3, 0.125), (0.25, 0.1), (0.0, 0.125), (0.75, 0.25), (0.25, 0.0), (0.875, 0.125)],
)
def test_spike_rejects_misaligned_or_outside(t_bar, eps):
    with pytest.raises(SpikeError):
        SpikeSpec(t_bar, eps, 1.0).nodes(TG8)


def test_path_valued_spike_must_be_measurable():
    noise = sample_noise(TimeGrid(1.0, 4), 1, "tree")
    good = np.repeat([1.0, -1.0], 8)
    u = spike(0.0, SpikeSpec(0.25, 0.25, good), noise.time_grid, noise.P, noise)
    assert np.array_equal(u[1], good)
    with pytest.raises(SpikeError):
        spike(0.0, SpikeSpec(0.25, 0.25, np.tile([1.0, -1.0], 8)), noise.time_grid, noise.P, noise)
    with pytest.raises(SpikeError):
        spike(0.0, SpikeSpec(0.25, 0.25, np.ones(3)), noise.time_grid, noise.P, noise)


@pytest.fixture(scope="module")
def tree_case():
    problem = load_preset("tanh-drift")
    grid = Grid1D(7)
    noise = sample_noise(TimeGrid(1.0, 5), 1, "tree")
    return problem, grid, noise


def test_trivial_spike_gives_zero_variations(tree_case):
    problem, grid, noise = tree_case
    st_ = solve_state(problem, grid, 0.0, noise)
    u = spike(0.0, SpikeSpec(0.2, 0.4, 0.0), noise.time_grid, noise.P)
    Y = solve_Y(st_, u)
    Z = solve_Z(st_, Y, u)
    assert not Y.any() and not Z.any()


def test_variations_vanish_before_spike(tree_case):
    problem, grid, noise = tree_case
    st_ = solve_state(problem, grid, 0.0, noise)
    u = spike(0.0, SpikeSpec(0.4, 0.2, 1.0), noise.time_grid, noise.P)
    Y = solve_Y(st_, u)
    Z = solve_Z(st_, Y, u)
    assert not Y[:3].any() and not Z[:3].any()
    assert Y[3].any()


@pytest.mark.parametrize("name", ["tanh-drift", "sigma-switch"])
def test_tree_variations_match_prefix_walk(name):
    problem = load_preset(name)
    M, Nt = 7, 4
    grid = Grid1D(M)
    noise = sample_noise(TimeGrid(problem.T, Nt), 1, "tree")
    U = problem.controls.values

    def ubar(n, pre):
        return U[-1] if n % 2 == 0 or pre[-1] > 0 else U[0]

    def u_eps(n, pre):
        # node-indexed spike on steps 1 and 2
        if n in (1, 2):
            return U[0] if pre[0] > 0 else U[-1]
        return ubar(n, pre)

    walk = oracles.TreeWalk(problem, M, Nt, ubar)
    Yo, Zo = oracles.variation_walk(walk, u_eps)
    st_ = solve_state(problem, grid, oracles.control_array(noise.increments, ubar, Nt), noise)
    ue = oracles.control_array(noise.increments, u_eps, Nt)
    Y = solve_Y(st_, ue)
    Z = solve_Z(st_, Y, ue)
    for n in range(Nt + 1):
        for i in range(noise.P):
            pre = oracles.path_prefix(noise.increments, i, n)
            assert np.allclose(Y[n, i], Yo[n][pre], atol=1e-13)
            assert np.allclose(Z[n, i], Zo[n][pre], atol=1e-13)


def test_linear_in_forcing(tree_case):
    _, grid, noise = tree_case
    p1 = make_problem("a", "tanh(y) + u*sin(pi*x)", ["0.2*cos(y) + 0.8*u*sin(pi*x)"], "0", "0", "0.5*sin(pi*x)",
                      controls=(-1.0, 0.0, 1.0))
    p2 = make_problem("b", "tanh(y) + 2*u*sin(pi*x)", ["0.2*cos(y) + 1.6*u*sin(pi*x)"], "0", "0", "0.5*sin(pi*x)",
                      controls=(-1.0, 0.0, 1.0))
    u = spike(0.0, SpikeSpec(0.2, 0.4, 1.0), noise.time_grid, noise.P)
    Y1 = solve_Y(solve_state(p1, grid, 0.0, noise), u)
    Y2 = solve_Y(solve_state(p2, grid, 0.0, noise), u)
    assert np.allclose(Y2, 2 * Y1, atol=1e-15)


def test_first_variation_per_mode_closed_form():
    grid = Grid1D(31)
    tg = TimeGrid(1.0, 64)
    problem = make_problem("add", "u*sin(pi*x)", ["0.3"], "0", "0", "0", controls=(0.0, 1.0))
    noise = sample_noise(tg, 1, "mc", paths=3, seed=2)
    st_ = solve_state(problem, grid, 0.0, noise)
    t_bar, eps = 0.25, 0.125
    n_bar, k = SpikeSpec(t_bar, eps, 1.0).nodes(tg)
    Y = solve_Y(st_, spike(0.0, SpikeSpec(t_bar, eps, 1.0), tg, 3))
    lam = grid.eigenvalues[0]
    # discrete: Y_N = sum over spike steps of dt e^{-lam (N - n) dt} sin(pi x)
    coeff = sum(tg.dt * math.exp(-lam * (tg.Nt - n) * tg.dt) for n in range(n_bar, n_bar + k))
    s = np.sin(np.pi * grid.nodes)
    assert np.allclose(Y[-1], coeff * s, atol=1e-14)
    # continuous: int_{t_bar}^{t_bar+eps} e^{-lam (T - s)} ds, within O(dt)
    exact = (math.exp(-lam * (1 - t_bar - eps)) - math.exp(-lam * (1 - t_bar))) / lam
    assert coeff == pytest.approx(exact, rel=lam * tg.dt)


def test_second_variation_vanishes_for_affine_coefficients(tree_case):
    _, grid, noise = tree_case
    problem = make_problem("affine", "0.5*y + u*sin(pi*x)", ["0.3*y + 0.2*u"], "0", "0", "0.5*sin(pi*x)",
                           controls=(-1.0, 0.0, 1.0))
    st_ = solve_state(problem, grid, 0.0, noise)
    u = spike(0.0, SpikeSpec(0.2, 0.4, 1.0), noise.time_grid, noise.P)
    Y = solve_Y(st_, u)
    assert np.abs(Y).max() > 1e-3
    assert not solve_Z(st_, Y, u).any()


def test_solve_Z_checks_shapes(tree_case):
    problem, grid, noise = tree_case
    st_ = solve_state(problem, grid, 0.0, noise)
    with pytest.raises(EnsembleError):
        solve_Z(st_, np.zeros((3, 3, 3)), 0.0)


def test_order_slopes_validation(tree_case):
    problem, grid, noise = tree_case
    with pytest.raises(SpikeError, match="at least 4"):
        order_slopes(problem, grid, noise, 0.0, 0.2, 1.0, [0.4, 0.2, 0.2])
    tg = TimeGrid(1.0, 16)
    n16 = sample_noise(tg, 1, "mc", paths=8, seed=0)
    with pytest.raises(SpikeError, match="geometric"):
        order_slopes(problem, grid, n16, 0.0, 0.25, 1.0, [0.5, 0.25, 0.1875, 0.0625])


def test_variation_table_matches_stored_processes(tree_case):
    problem, grid, noise = tree_case
    st_ = solve_state(problem, grid, 0.0, noise)
    eps = [0.4, 0.2]
    rows = variation_table(problem, grid, noise, 0.0, 0.2, 1.0, eps, p=4.0)
    for row, e in zip(rows, eps):
        u = spike(0.0, SpikeSpec(0.2, e, 1.0), noise.time_grid, noise.P)
        Y = solve_Y(st_, u)
        Z = solve_Z(st_, Y, u)
        R = solve_state(problem, grid, u, noise).X - st_.X - Y - Z
        nY = max(np.mean(grid.h * np.sum(Y[n] ** 4, axis=1)) ** 0.25 for n in range(6))
        nZ = max(np.mean(grid.h * np.sum(Z[n] ** 4, axis=1)) ** 0.25 for n in range(6))
        nR = max(np.mean(grid.h * np.sum(R[n] ** 2, axis=1)) ** 0.5 for n in range(6))
        assert row.norm_Y == pytest.approx(nY, rel=1e-12)
        assert row.norm_Z == pytest.approx(nZ, rel=1e-12)
        assert row.norm_remainder == pytest.approx(nR, rel=1e-9)
        assert row.stderr_Y == row.stderr_Z == row.stderr_remainder == 0.0


def test_variation_table_independent_of_threads():
    problem = load_preset("tanh-drift")
    grid = Grid1D(7)
    noise = sample_noise(TimeGrid(1.0, 16), 1, "mc", paths=2500, seed=3)
    kw = dict(ubar=0.0, t_bar=0.25, v=1.0, eps_list=[0.5, 0.25, 0.125, 0.0625])
    a = variation_table(problem, grid, noise, threads=1, **kw)
    b = variation_table(problem, grid, noise, threads=3, **kw)
    assert a == b
    assert all(r.stderr_Y > 0 for r in a)


def test_tree_remainder_decays_superlinearly():
    # short horizon: spike widths stay below the relaxation time of the first mode
    problem = load_preset("tanh-drift", T=0.2)
    tg = TimeGrid(0.2, 12)
    noise = sample_noise(tg, 1, "tree")
    eps = [8 * tg.dt, 4 * tg.dt, 2 * tg.dt, tg.dt]
    for v in (1.0, -1.0):
        res = order_slopes(problem, Grid1D(15), noise, 0.0, 2 * tg.dt, v, eps)
        ratios = [r.norm_remainder / r.eps for r in res.table]
        assert all(b < a for a, b in zip(ratios, ratios[1:]))
        assert res.slope_remainder >= 1.05


def test_fit_slope_on_exact_power_law():
    e = np.array([0.5, 0.25, 0.125, 0.0625])
    assert fit_slope(e, 3 * e**1.5) == pytest.approx(1.5, abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([1.0, -1.0]), st.integers(1, 3))
def test_mc_variations_are_zero_before_spike(v, start):
    problem = load_preset("tanh-drift")
    tg = TimeGrid(1.0, 8)
    noise = sample_noise(tg, 1, "mc", paths=16, seed=start)
    st_ = solve_state(problem, Grid1D(7), 0.0, noise)
    u = spike(0.0, SpikeSpec(start * tg.dt, 2 * tg.dt, v), tg, 16)
    Y = solve_Y(st_, u)
    assert not Y[: start + 1].any() and Y[start + 1].any()
