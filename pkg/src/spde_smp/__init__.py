"""Numerical checks of the stochastic maximum principle for controlled parabolic SPDEs on (0, 1)."""

from .adjoint import (
    NESTED_MC,
    REGRESSION,
    TREE_EXACT,
    AdjointSolution,
    QuadFormHandle,
    hbar_fields,
    make_quadform,
    materialize_p,
    p_fractional_diagnostic,
    p_quadform,
    solve_bsde,
    spike_quadratic,
)
from .coefficients import PRESETS, ControlSpace, Problem, load_preset, make_problem, validate_problem
from .field import Field, Grid1D
from .forward import TimeGrid, cost, sample_noise, solve_state
from .smp import brute_force_optimum, cost_expansion_residual, hamiltonian, smp_gap, smp_gap_report
from .variation import SpikeSpec, order_slopes, solve_Y, solve_Z, spike, variation_table

__all__ = [
    "AdjointSolution",
    "ControlSpace",
    "Field",
    "Grid1D",
    "NESTED_MC",
    "PRESETS",
    "Problem",
    "QuadFormHandle",
    "REGRESSION",
    "SpikeSpec",
    "TREE_EXACT",
    "TimeGrid",
    "brute_force_optimum",
    "cost",
    "cost_expansion_residual",
    "hamiltonian",
    "hbar_fields",
    "load_preset",
    "make_problem",
    "make_quadform",
    "materialize_p",
    "order_slopes",
    "p_fractional_diagnostic",
    "p_quadform",
    "sample_noise",
    "smp_gap",
    "smp_gap_report",
    "solve_Y",
    "solve_Z",
    "solve_bsde",
    "solve_state",
    "spike",
    "spike_quadratic",
    "validate_problem",
    "variation_table",
]
