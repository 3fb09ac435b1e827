import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spde_smp.coefficients import (
    PRESETS,
    Coefficient,
    ControlError,
    ControlSpace,
    ExpressionError,
    ProblemError,
    delta_arrays,
    delta_coefficients,
    eval_nemytskii,
    load_preset,
    make_problem,
    parse_expression,
    validate_problem,
)
from spde_smp.field import Field, Grid1D

G = Grid1D(15)
ZERO = Field(G, np.zeros(15))


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_passes_derivative_validation(name):
    problem = load_preset(name)
    report = validate_problem(problem)
    assert report.ok, report.failures()
    assert all(np.isfinite(v) for v in report.derivative_sup.values())
    assert problem.T == 1.0


def test_preset_shapes():
    td = load_preset("tanh-drift")
    assert td.m == 1 and td.controls.values == (-1.0, 0.0, 1.0)
    assert td.sigma_depends_on_control()
    assert not load_preset("additive-control-free-sigma").sigma_depends_on_control()
    dec = load_preset("decoupled")
    assert dec.controls.values == (-1.0, 1.0) and not dec.sigma_depends_on_control()
    sw = load_preset("sigma-switch")
    assert sw.controls.values == (-1.0, 1.0) and sw.sigma_depends_on_control()


def test_unknown_preset_and_overrides():
    with pytest.raises(ProblemError):
        load_preset("no-such-preset")
    p = load_preset("sigma-switch", T=0.2)
    assert p.T == 0.2
    p = load_preset("decoupled", controls=(-1.0, 0.0, 1.0))
    assert p.controls.values == (-1.0, 0.0, 1.0)


def test_eval_examples():
    dec = load_preset("decoupled")
    X = Field(G, np.random.default_rng(0).standard_normal(15))
    for u in (-1.0, 1.0):
        assert np.array_equal(eval_nemytskii(dec, "b", X, u).values, np.zeros(15))
    td = load_preset("tanh-drift")
    out = eval_nemytskii(td, "b", ZERO, 1.0).values
    assert np.allclose(out, np.sin(np.pi * G.nodes), atol=1e-15)
    b1 = eval_nemytskii(td, "b", ZERO, 1.0, order=1).values
    assert np.allclose(b1, 1.0)
    # central-difference oracle on b
    step = 1e-6
    fd = (td.b(G.nodes, step, 1.0) - td.b(G.nodes, -step, 1.0)) / (2 * step)
    assert np.allclose(b1, fd, atol=1e-9)


def test_eval_errors():
    td = load_preset("tanh-drift")
    with pytest.raises(ProblemError):
        eval_nemytskii(td, "c", ZERO, 0.0)
    with pytest.raises(ProblemError):
        eval_nemytskii(td, "sigma", ZERO, 0.0, j=1)
    with pytest.raises(ControlError):
        eval_nemytskii(td, "b", ZERO, 0.5)


def test_delta_examples():
    td = load_preset("tanh-drift")
    d = delta_coefficients(td, ZERO, 1.0, 0.0)
    assert np.allclose(d.db, np.sin(np.pi * G.nodes), atol=1e-15)
    same = delta_coefficients(td, ZERO, 1.0, 1.0)
    for arr in (same.db, same.db1, same.dl, *same.dsigma, *same.dsigma1):
        assert np.array_equal(arr, np.zeros(15))
    dec = load_preset("decoupled")
    X = Field(G, np.linspace(-2, 2, 15))
    for a in (-1.0, 1.0):
        for b in (-1.0, 1.0):
            assert np.array_equal(delta_coefficients(dec, X, a, b).dsigma[0], np.zeros(15))
    with pytest.raises(ControlError):
        delta_coefficients(td, ZERO, 2.0, 0.0)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_delta_matches_independent_recomputation(name):
    problem = load_preset(name)
    X = np.random.default_rng(1).standard_normal((3, 15))
    U = problem.controls.values
    for a in U:
        for b in U:
            d = delta_arrays(problem, G.nodes, X, a, b)
            assert np.array_equal(d.db, problem.b(G.nodes, X, a) - problem.b(G.nodes, X, b))
            assert np.array_equal(d.dl, problem.l(G.nodes, X, a) - problem.l(G.nodes, X, b))
            assert np.array_equal(d.dsigma[0], problem.sigma[0](G.nodes, X, a) - problem.sigma[0](G.nodes, X, b))
            assert np.array_equal(d.db1, problem.b(G.nodes, X, a, 1) - problem.b(G.nodes, X, b, 1))


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 0.99))
def test_symbolic_derivatives_match_finite_differences(y, x):
    c = Coefficient("0.2*cos(y) + 0.8*u*sin(pi*x) + tanh(y)**2 + expc(y)")
    step = 1e-5
    for k in (0, 1):
        fd = (c(x, y + step, 0.5, k) - c(x, y - step, 0.5, k)) / (2 * step)
        assert float(fd) == pytest.approx(float(c(x, y, 0.5, k + 1)), rel=1e-5, abs=1e-5)


def test_expc_is_clamped():
    c = Coefficient("expc(y)")
    assert float(c(0.5, 1.0)) == pytest.approx(np.exp(30 * np.tanh(1 / 30)))
    assert np.isfinite(c(0.5, 1e6)) and float(c(0.5, 1e6)) <= np.exp(30) * (1 + 1e-12)


@pytest.mark.parametrize("text", ["__import__('os')", "y.real", "exp(y)", "sin(y, u)", "z + 1", "y if u else 1", "lambda: 1"])
def test_grammar_rejects_outside_constructs(text):
    with pytest.raises(ExpressionError):
        parse_expression(text)


def test_terminal_cost_cannot_use_control():
    with pytest.raises(ExpressionError):
        make_problem("bad", "0", ["1"], "0", "u*y", "0")


def test_control_spaces():
    U = ControlSpace.finite(-1, 1)
    assert U.contains(1.0) and not U.contains(0.0)
    with pytest.raises(ControlError):
        U.check([1.0, 0.5])
    with pytest.raises(ControlError):
        ControlSpace.finite(1, 1)
    box = ControlSpace("box", bounds=(-1, 2))
    assert box.contains(0.3) and not box.contains(2.5)
    with pytest.raises(ControlError):
        ControlSpace("box", bounds=(1, 1))
    with pytest.raises(ControlError):
        ControlSpace("simplex")


def test_problem_requires_noise_and_positive_horizon():
    with pytest.raises(ProblemError):
        make_problem("p", "0", [], "0", "0", "0")
    with pytest.raises(ProblemError):
        make_problem("p", "0", ["1"], "0", "0", "0", T=0.0)


def test_validation_reports_derivative_bounds():
    bad = make_problem("bad", "y**3", ["1"], "0", "0", "0")
    assert validate_problem(bad).ok  # finite on the probe set
    assert validate_problem(bad).derivative_sup["b'"] == pytest.approx(27.0)
