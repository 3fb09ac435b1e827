"""Nemytskii coefficient bundles, control spaces and built-in problem presets.

Coefficients are written in a small infix grammar over the symbols ``x`` (space),
``y`` (state) and ``u`` (control) with the functions ``sin``, ``cos``, ``tanh``
and ``expc`` (a smoothly clamped exponential, ``expc(z) = exp(30 tanh(z/30))``),
the constant ``pi`` and numeric literals.  Derivatives in ``y`` are taken
symbolically, so every preset carries exact first and second derivatives.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy as sp

from .field import Field, Grid1D

X_SYM, Y_SYM, U_SYM = sp.symbols("x y u", real=True)
EXPC_CLAMP = 30.0

_FUNCTIONS: dict[str, Callable] = {
    "sin": sp.sin,
    "cos": sp.cos,
    "tanh": sp.tanh,
    "expc": lambda z: sp.exp(EXPC_CLAMP * sp.tanh(z / EXPC_CLAMP)),
}
_NAMES = {"x": X_SYM, "y": Y_SYM, "u": U_SYM, "pi": sp.pi}
_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a**b,
}


class ExpressionError(ValueError):
    """Expression outside the coefficient grammar."""


class ControlError(ValueError):
    """Control value outside the admissible set."""


class ProblemError(ValueError):
    """Unknown preset, unknown coefficient id, or failed validation."""


def parse_expression(text: str, allowed: tuple[str, ...] = ("x", "y", "u")) -> sp.Expr:
    """Parse ``text`` into a sympy expression, rejecting anything outside the grammar."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None

    def convert(node):
        if isinstance(node, ast.Expression):
            return convert(node.body)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](convert(node.left), convert(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            val = convert(node.operand)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return sp.nsimplify(node.value) if isinstance(node.value, int) else sp.Float(repr(node.value))
        if isinstance(node, ast.Name):
            if node.id == "pi" or node.id in allowed:
                return _NAMES[node.id]
            raise ExpressionError(f"symbol {node.id!r} not allowed in {text!r}")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
                raise ExpressionError(f"unknown function in {text!r}")
            if len(node.args) != 1 or node.keywords:
                raise ExpressionError(f"functions take exactly one argument in {text!r}")
            return _FUNCTIONS[node.func.id](convert(node.args[0]))
        raise ExpressionError(f"construct {type(node).__name__} not allowed in {text!r}")

    return sp.sympify(convert(tree))


def _vectorize(expr: sp.Expr) -> Callable[..., np.ndarray]:
    fn = sp.lambdify((X_SYM, Y_SYM, U_SYM), expr, modules="numpy")

    def evaluate(x, y, u):
        out = fn(x, y, u)
        shape = np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(u))
        return np.broadcast_to(np.asarray(out, dtype=float), shape)

    return evaluate


@dataclass(frozen=True, eq=False)
class Coefficient:
    """A scalar map ``(x, y, u) -> R`` with exact first and second ``y``-derivatives."""

    text: str
    allowed: tuple[str, ...] = ("x", "y", "u")
    _fns: tuple = field(init=False, repr=False)

    def __post_init__(self):
        expr = parse_expression(self.text, self.allowed)
        d1 = sp.diff(expr, Y_SYM)
        d2 = sp.diff(d1, Y_SYM)
        object.__setattr__(self, "_fns", tuple(_vectorize(e) for e in (expr, d1, d2)))

    @property
    def depends_on_control(self) -> bool:
        return U_SYM in parse_expression(self.text, self.allowed).free_symbols

    def __call__(self, x, y, u=0.0, order: int = 0) -> np.ndarray:
        return self._fns[order](x, y, u)


@dataclass(frozen=True)
class ControlSpace:
    """Admissible control actions: a finite labelled set or a closed interval."""

    kind: str
    values: tuple[float, ...] = ()
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind == "finite":
            vals = tuple(float(v) for v in self.values)
            if len(set(vals)) < 2 or len(set(vals)) != len(vals):
                raise ControlError("a finite control set needs at least 2 distinct values")
            object.__setattr__(self, "values", vals)
        elif self.kind == "box":
            if self.bounds is None or not self.bounds[0] < self.bounds[1]:
                raise ControlError("a box control space needs bounds lo < hi")
            object.__setattr__(self, "bounds", (float(self.bounds[0]), float(self.bounds[1])))
        else:
            raise ControlError(f"unknown control-space kind {self.kind!r}")

    @classmethod
    def finite(cls, *values: float) -> ControlSpace:
        return cls("finite", tuple(values))

    def contains(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "finite":
            return np.isin(u, np.asarray(self.values))
        return (u >= self.bounds[0]) & (u <= self.bounds[1])

    def check(self, u) -> None:
        ok = self.contains(u)
        if not np.all(ok):
            bad = np.asarray(u, dtype=float)[~ok].ravel()[0]
            raise ControlError(f"control value {bad!r} is not in U = {self.describe()}")

    def label(self, u: float) -> str:
        return repr(float(u))

    def describe(self) -> str:
        if self.kind == "finite":
            return "{" + ", ".join(self.label(v) for v in self.values) + "}"
        return f"[{self.bounds[0]!r}, {self.bounds[1]!r}]"


@dataclass(frozen=True, eq=False)
class Problem:
    """Coefficient bundle of the controlled SPDE and its cost."""

    name: str
    b: Coefficient
    sigma: tuple[Coefficient, ...]
    l: Coefficient
    h: Coefficient
    x0: str
    T: float
    controls: ControlSpace

    def __post_init__(self):
        if not self.sigma:
            raise ProblemError("at least one noise coefficient sigma_j is required")
        if not self.T > 0:
            raise ProblemError(f"horizon must be positive, got {self.T}")
        parse_expression(self.x0, ("x",))

    @property
    def m(self) -> int:
        return len(self.sigma)

    def initial_state(self, grid: Grid1D) -> np.ndarray:
        fn = _vectorize(parse_expression(self.x0, ("x",)))
        return np.array(fn(grid.nodes, 0.0, 0.0), dtype=float)

    def coefficient(self, which: str, j: int = 0) -> Coefficient:
        if which == "b":
            return self.b
        if which == "sigma":
            if not 0 <= j < self.m:
                raise ProblemError(f"noise index {j} outside 0..{self.m - 1}")
            return self.sigma[j]
        if which == "l":
            return self.l
        if which == "h":
            return self.h
        raise ProblemError(f"unknown coefficient id {which!r}")

    def sigma_depends_on_control(self) -> bool:
        return any(s.depends_on_control for s in self.sigma)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "b": self.b.text,
            "sigma": [s.text for s in self.sigma],
            "l": self.l.text,
            "h": self.h.text,
            "x0": self.x0,
            "T": self.T,
            "controls": list(self.controls.values) if self.controls.kind == "finite" else list(self.controls.bounds),
            "control_kind": self.controls.kind,
        }


def make_problem(
    name: str,
    b: str,
    sigma: list[str] | tuple[str, ...],
    l: str,
    h: str,
    x0: str,
    T: float = 1.0,
    controls: ControlSpace | tuple[float, ...] = (-1.0, 1.0),
) -> Problem:
    if not isinstance(controls, ControlSpace):
        controls = ControlSpace.finite(*controls)
    return Problem(
        name=name,
        b=Coefficient(b),
        sigma=tuple(Coefficient(s) for s in sigma),
        l=Coefficient(l),
        h=Coefficient(h, allowed=("x", "y")),
        x0=x0,
        T=float(T),
        controls=controls,
    )


PRESETS: dict[str, dict] = {
    # b = 0, constant noise; the control only enters the running cost
    "decoupled": dict(
        b="0",
        sigma=["0.5"],
        l="0.5*tanh(y)**2 + 0.2*(u - 0.5)**2",
        h="0.5*tanh(y)**2",
        x0="0.5*sin(pi*x)",
        T=1.0,
        controls=(-1.0, 1.0),
    ),
    "tanh-drift": dict(
        b="tanh(y) + u*sin(pi*x)",
        sigma=["0.2*cos(y) + 0.8*u*sin(pi*x)"],
        l="0.5*tanh(y)**2 + 0.05*u**2",
        h="0.5*tanh(y)**2",
        x0="0.5*sin(pi*x)",
        T=1.0,
        controls=(-1.0, 0.0, 1.0),
    ),
    "additive-control-free-sigma": dict(
        b="0.5*tanh(y) + u*sin(pi*x)",
        sigma=["0.3*cos(y) + 0.1"],
        l="0.5*tanh(y)**2 + 0.1*u*cos(pi*x)",
        h="0.5*tanh(y)**2",
        x0="0.5*sin(pi*x)",
        T=1.0,
        controls=(-1.0, 0.0, 1.0),
    ),
    # bang-bang instance: u = +1 pulls the state down but doubles the noise
    "sigma-switch": dict(
        b="0.5*tanh(y) - 1.5*u*sin(pi*x)",
        sigma=["(0.6 + 0.4*u)*sin(pi*x) + 0.1*sin(y)"],
        l="tanh(y)**2 + 0.3*u*(1 - 2*x)",
        h="tanh(y)**2",
        x0="0.5*sin(pi*x)",
        T=1.0,
        controls=(-1.0, 1.0),
    ),
}


@dataclass
class ValidationReport:
    """Outcome of :func:`validate_problem`: derivative consistency and derivative bounds."""

    max_fd_error: dict[str, float]
    derivative_sup: dict[str, float]
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(np.isfinite(v) and v <= self.tolerance for v in self.max_fd_error.values()) and all(
            np.isfinite(v) for v in self.derivative_sup.values()
        )

    def failures(self) -> list[str]:
        return [k for k, v in self.max_fd_error.items() if not (np.isfinite(v) and v <= self.tolerance)]


def _probe_points(problem: Problem, n: int = 41) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs = np.linspace(0.01, 0.99, 9)
    ys = np.linspace(-3.0, 3.0, n)
    if problem.controls.kind == "finite":
        us = np.asarray(problem.controls.values)
    else:
        us = np.linspace(*problem.controls.bounds, 5)
    xg, yg, ug = np.meshgrid(xs, ys, us, indexing="ij")
    return xg.ravel(), yg.ravel(), ug.ravel()


def validate_problem(problem: Problem, tol: float = 1e-4, step: float = 1e-4) -> ValidationReport:
    """Finite-difference check of the y-derivatives plus a boundedness probe."""
    x, y, u = _probe_points(problem)
    named = [("b", problem.b), ("l", problem.l), ("h", problem.h)]
    named += [(f"sigma_{j + 1}", s) for j, s in enumerate(problem.sigma)]
    fd_err: dict[str, float] = {}
    sup: dict[str, float] = {}
    for name, coef in named:
        vals = [coef(x, y, u, order=k) for k in range(3)]
        if not all(np.all(np.isfinite(v)) for v in vals):
            fd_err[name] = math.inf
            continue
        for k in (0, 1):
            fd = (coef(x, y + step, u, order=k) - coef(x, y - step, u, order=k)) / (2 * step)
            fd_err[name + "'" * (k + 1)] = float(np.max(np.abs(fd - vals[k + 1])))
        sup[f"{name}'"] = float(np.max(np.abs(vals[1])))
        sup[f"{name}''"] = float(np.max(np.abs(vals[2])))
    return ValidationReport(fd_err, sup, tol)


def load_preset(name: str, **overrides) -> Problem:
    """Build and validate a named preset; keyword overrides replace preset fields."""
    if name not in PRESETS:
        raise ProblemError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    spec = {**PRESETS[name], **overrides}
    problem = make_problem(name, **spec)
    report = validate_problem(problem)
    if not report.ok:
        raise ProblemError(f"preset {name!r} failed derivative validation: {report.failures()}")
    return problem


def eval_coefficient(problem: Problem, which: str, x: np.ndarray, X: np.ndarray, u, order: int = 0, j: int = 0):
    """Array-level Nemytskii evaluation ``x_i -> coef(x_i, X_i, u)`` (no control check)."""
    return problem.coefficient(which, j)(x, X, u, order=order)


def eval_nemytskii(problem: Problem, which: str, X: Field, u: float, order: int = 0, j: int = 0) -> Field:
    problem.controls.check(u)
    if which == "h":
        u = 0.0
    return Field(X.grid, eval_coefficient(problem, which, X.grid.nodes, X.values, u, order, j))


@dataclass(frozen=True)
class DeltaCoefficients:
    db: np.ndarray
    dsigma: tuple[np.ndarray, ...]
    db1: np.ndarray
    dsigma1: tuple[np.ndarray, ...]
    dl: np.ndarray


def delta_arrays(problem: Problem, x: np.ndarray, X: np.ndarray, u_pert, ubar) -> DeltaCoefficients:
    """Differences ``coef(x, X, u_pert) - coef(x, X, ubar)`` on arrays of any batch shape."""

    def diff(which, order=0, j=0):
        c = problem.coefficient(which, j)
        return c(x, X, u_pert, order) - c(x, X, ubar, order)

    return DeltaCoefficients(
        db=diff("b"),
        dsigma=tuple(diff("sigma", 0, j) for j in range(problem.m)),
        db1=diff("b", 1),
        dsigma1=tuple(diff("sigma", 1, j) for j in range(problem.m)),
        dl=diff("l"),
    )


def delta_coefficients(problem: Problem, Xbar: Field, u_pert: float, ubar: float) -> DeltaCoefficients:
    problem.controls.check(u_pert)
    problem.controls.check(ubar)
    return delta_arrays(problem, Xbar.grid.nodes, Xbar.values, u_pert, ubar)
