"""Experiment configuration in a flat ``key = value`` text format.

Keys (times in the units of the horizon ``T``; lists are comma separated)::

    preset        named coefficient preset (see ``PRESETS``)
    b, l, h, x0   inline expressions replacing the preset's (optional)
    sigma         inline noise coefficients, separated by ';' (optional)
    controls      finite control set "-1, 0, 1" or "box lo hi" (optional)
    T             horizon override (optional)
    M             interior grid nodes
    Nt            time steps
    mode          tree | mc
    paths         Monte Carlo path count (mc mode)
    seed          master seed
    t_bar, v      spike start time and spike control value
    eps           spike widths
    ubar          constant reference control (default: first element of U)
    reference     constant | optimum (tree mode: exhaustive optimum as reference)
    p             norm index for the variation study
    eta           fractional powers for the P diagnostic
    basis_size    leading sine coefficients in the regression basis
    inner         inner samples per outer path for nested Monte Carlo
    outer         outer paths probed by nested Monte Carlo
    threads       worker threads
    out           output directory
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .coefficients import PRESETS, ControlSpace, Problem, ProblemError, load_preset, make_problem, validate_problem
from .field import Grid1D
from .forward import TREE_DEPTH_CAP, TimeGrid
from .variation import SpikeError, SpikeSpec


class ConfigError(ValueError):
    """Unknown key, unparsable value or inconsistent configuration."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


@dataclass
class ExperimentConfig:
    preset: str = "tanh-drift"
    b: str | None = None
    sigma: tuple[str, ...] | None = None
    l: str | None = None
    h: str | None = None
    x0: str | None = None
    controls: str | None = None
    T: float | None = None
    M: int = 15
    Nt: int = 16
    mode: str = "tree"
    paths: int = 1024
    seed: int = 0
    t_bar: float = 0.25
    v: float = -1.0
    eps: tuple[float, ...] = (0.5, 0.25, 0.125, 0.0625)
    ubar: float | None = None
    reference: str = "constant"
    p: float = 4.0
    eta: tuple[float, ...] = (0.05, 0.1, 0.2)
    basis_size: int = 4
    inner: int = 128
    outer: int = 32
    threads: int = 1
    out: str = "runs/default"
    _problem: Problem | None = field(default=None, repr=False, compare=False)

    # ------------------------------------------------------------------ text

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name.startswith("_"):
                continue
            val = getattr(self, f.name)
            if val is None:
                continue
            if f.name == "sigma":
                text = "; ".join(val)
            elif isinstance(val, tuple):
                text = ", ".join(repr(float(x)) for x in val)
            elif isinstance(val, float):
                text = repr(val)
            else:
                text = str(val)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = val
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> ExperimentConfig:
        names = {f.name: f for f in dataclasses.fields(cls) if not f.name.startswith("_")}
        kwargs = {}
        for key, val in values.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                kwargs[key] = _parse_value(key, val)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {val!r} ({exc})") from None
        return cls(**kwargs)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, _problem=None, **changes)

    # ------------------------------------------------------------ validation

    @property
    def tree(self) -> bool:
        return self.mode == "tree"

    def problem(self) -> Problem:
        if self._problem is None:
            self._problem = self._build_problem()
        return self._problem

    def _build_problem(self) -> Problem:
        controls = _parse_controls(self.controls) if self.controls else None
        try:
            if self.preset == "custom":
                missing = [k for k in ("b", "sigma", "l", "h", "x0") if getattr(self, k) is None]
                if missing:
                    raise ConfigError(f"custom problem needs {', '.join(missing)}")
                problem = make_problem(
                    "custom", self.b, list(self.sigma), self.l, self.h, self.x0,
                    T=self.T if self.T is not None else 1.0, controls=controls or (-1.0, 1.0),
                )
                report = validate_problem(problem)
                if not report.ok:
                    raise ConfigError(f"coefficients failed derivative validation: {report.failures()}")
                return problem
            if self.preset not in PRESETS:
                raise ConfigError(f"unknown preset {self.preset!r}; available: {', '.join(sorted(PRESETS))}, custom")
            overrides = {k: getattr(self, k) for k in ("b", "l", "h", "x0", "T") if getattr(self, k) is not None}
            if self.sigma is not None:
                overrides["sigma"] = list(self.sigma)
            if controls is not None:
                overrides["controls"] = controls
            return load_preset(self.preset, **overrides)
        except (ProblemError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def grid(self) -> Grid1D:
        return Grid1D(self.M)

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.problem().T, self.Nt)

    def reference_control(self) -> float:
        U = self.problem().controls
        if self.ubar is not None:
            return self.ubar
        return U.values[0] if U.kind == "finite" else U.bounds[0]

    def validate(self) -> ExperimentConfig:
        """Re-check every cross-field constraint; returns ``self``."""
        problem = self.problem()
        if self.mode not in ("tree", "mc"):
            raise ConfigError(f"mode must be 'tree' or 'mc', got {self.mode!r}")
        if self.M < 2:
            raise ConfigError("M must be >= 2")
        if self.Nt < 2:
            raise ConfigError("Nt must be >= 2")
        if self.tree and self.Nt * problem.m > TREE_DEPTH_CAP:
            raise ConfigError(f"tree depth Nt*m = {self.Nt * problem.m} exceeds {TREE_DEPTH_CAP}")
        if not self.tree and self.paths < 2:
            raise ConfigError("mc mode needs at least 2 paths")
        if self.reference not in ("constant", "optimum"):
            raise ConfigError("reference must be 'constant' or 'optimum'")
        if self.reference == "optimum" and not self.tree:
            raise ConfigError("the exhaustive optimum is only available in tree mode")
        for name in ("v", "ubar"):
            val = getattr(self, name)
            if val is not None and not problem.controls.contains(val):
                raise ConfigError(f"{name} = {val!r} is not in U = {problem.controls.describe()}")
        if not self.p >= 1:
            raise ConfigError("norm index p must be >= 1")
        if any(not 0 < e < 0.25 for e in self.eta):
            raise ConfigError("every eta must lie in (0, 1/4)")
        if not 1 <= self.basis_size <= self.M:
            raise ConfigError(f"basis_size must lie in 1..{self.M}")
        if self.inner < 2 or self.outer < 1 or self.threads < 1:
            raise ConfigError("inner >= 2, outer >= 1 and threads >= 1 are required")
        if not self.eps:
            raise ConfigError("eps ladder is empty")
        tg = self.time_grid()
        try:
            for e in self.eps:
                SpikeSpec(self.t_bar, e, self.v).nodes(tg)
        except SpikeError as exc:
            raise ConfigError(f"spike ladder: {exc}") from None
        return self


def _parse_controls(text: str) -> ControlSpace:
    parts = text.replace(",", " ").split()
    try:
        if parts and parts[0] == "box":
            if len(parts) != 3:
                raise ConfigError("box controls need 'box lo hi'")
            return ControlSpace("box", bounds=(float(parts[1]), float(parts[2])))
        return ControlSpace.finite(*(float(p) for p in parts))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad control set {text!r}: {exc}") from None


_INT = {"M", "Nt", "paths", "seed", "basis_size", "inner", "outer", "threads"}
_FLOAT = {"T", "t_bar", "v", "ubar", "p"}
_LIST = {"eps", "eta"}


def _parse_value(key: str, text: str):
    if key in _INT:
        return int(text)
    if key in _FLOAT:
        return float(text)
    if key in _LIST:
        return _floats(text)
    if key == "sigma":
        return tuple(s.strip() for s in text.split(";") if s.strip())
    return text


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_text(fh.read())
