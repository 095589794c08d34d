"""Simulation configuration: flat [section] key=value text files.

Parsing materializes builders for every subsystem (mesh, micro sampling,
fluid model, boundary data, time grid, solver, adaptivity, output). Boundary
and initial traces are arithmetic expressions in x, y, t. Cross-field
validation happens here so the CLI can fail fast with exit code 2.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import coefficients, mesh as meshmod
from .adapt import AdaptPolicy
from .constitutive import BoundaryData, ConstitutiveError, FluidModel
from .macrofv import SolverConfig, TimeGrid
from .microcell import MicroConfig, MicroError


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


_EXPR_NAMES = {
    "pi": math.pi,
    "e": math.e,
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
    "tanh": np.tanh,
}


def _compile_expr(text, with_time):
    """Vectorized evaluator for an arithmetic expression in x, y (and t)."""
    code = compile(text, "<config expression>", "eval")
    for name in code.co_names:
        if name not in _EXPR_NAMES and name not in ("x", "y", "t"):
            raise ConfigError("unknown name %r in expression %r" % (name, text))

    if with_time:
        def evaluate(points, t):
            env = dict(_EXPR_NAMES, x=points[:, 0], y=points[:, 1], t=t)
            return np.broadcast_to(np.asarray(eval(code, {"__builtins__": {}}, env), dtype=float), (len(points),)).copy()
    else:
        def evaluate(points):
            env = dict(_EXPR_NAMES, x=points[:, 0], y=points[:, 1])
            return np.broadcast_to(np.asarray(eval(code, {"__builtins__": {}}, env), dtype=float), (len(points),)).copy()
    return evaluate


@dataclass
class SimConfig:
    domain: tuple
    nx: int
    ny: int
    micro: MicroConfig
    coefficient_spec: dict
    fluid_kwargs: dict
    boundary_exprs: dict
    t_end: float
    n_steps: int
    formulation: str
    solver: SolverConfig
    policy: AdaptPolicy
    adapt_cycles: int
    out_dir: str
    cadence: int
    use_exact_oracle: bool
    fine_epsilon: float
    fine_factor: int
    max_fine_dofs: int
    raw: object = field(repr=False, default=None)

    # -- builders -------------------------------------------------------------

    def build_mesh(self):
        return meshmod.build_structured(self.nx, self.ny, self.domain)

    def build_torus(self):
        return meshmod.build_torus(self.micro.m)

    def build_coefficient(self):
        spec = dict(self.coefficient_spec)
        kind = spec.pop("kind")
        if kind == "raster":
            path = spec.pop("raster_path")
            grid = np.loadtxt(path, delimiter=",", ndmin=2)
            f = coefficients.raster_field(grid, self.domain)
        else:
            f = coefficients.from_spec(kind, **spec)
        if not self.use_exact_oracle:
            f.exact_homogenized = None
        return f

    def build_model(self):
        try:
            return FluidModel(**self.fluid_kwargs)
        except ConstitutiveError as exc:
            raise ConfigError(str(exc)) from exc

    def build_boundary(self):
        return BoundaryData(
            sbar=_compile_expr(self.boundary_exprs["sbar"], with_time=True),
            pbar=_compile_expr(self.boundary_exprs["pbar"], with_time=True),
            s0=_compile_expr(self.boundary_exprs["s0"], with_time=False),
        )

    def build_grid(self):
        return TimeGrid.uniform(self.t_end, self.n_steps)

    def fine_mesh_resolution(self):
        """Fine-reference resolution: H_fine = epsilon / fine_factor, DOF guarded."""
        x0, y0, x1, y1 = self.domain
        h = self.fine_epsilon / self.fine_factor
        nx = max(1, int(round((x1 - x0) / h)))
        ny = max(1, int(round((y1 - y0) / h)))
        dofs = (nx + 1) * (ny + 1)
        if dofs > self.max_fine_dofs:
            raise ConfigError(
                "fine reference needs %d dofs > budget %d" % (dofs, self.max_fine_dofs)
            )
        return nx, ny


def _get(cp, section, key, cast, default=None):
    try:
        if not cp.has_option(section, key):
            if default is None:
                raise ConfigError("missing [%s] %s" % (section, key))
            return default
        raw = cp.get(section, key)
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except (ValueError, configparser.Error) as exc:
        raise ConfigError("bad value for [%s] %s: %s" % (section, key, exc)) from exc


def parse_config(path_or_text, is_text=False):
    """Parse and cross-validate one simulation configuration."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        if is_text:
            cp.read_string(path_or_text)
        else:
            if not cp.read(path_or_text):
                raise ConfigError("cannot read config file %s" % path_or_text)
    except configparser.Error as exc:
        raise ConfigError("malformed config: %s" % exc) from exc

    domain = (
        _get(cp, "domain", "x0", float, 0.0),
        _get(cp, "domain", "y0", float, 0.0),
        _get(cp, "domain", "x1", float, 1.0),
        _get(cp, "domain", "y1", float, 1.0),
    )
    if not (domain[2] > domain[0] and domain[3] > domain[1]):
        raise ConfigError("mesh domain is degenerate: %s" % (domain,))
    nx = _get(cp, "mesh", "nx", int, 8)
    ny = _get(cp, "mesh", "ny", int, 8)
    if nx < 1 or ny < 1:
        raise ConfigError("mesh subdivisions must be positive")

    try:
        micro = MicroConfig(
            epsilon=_get(cp, "micro", "epsilon", float, 0.125),
            kappa=_get(cp, "micro", "kappa", float, 0.125),
            kappa0=_get(cp, "micro", "kappa0", float, 0.0) or None,
            m=_get(cp, "micro", "m", int, 16),
        )
    except MicroError as exc:
        raise ConfigError(str(exc)) from exc

    kind = _get(cp, "coefficient", "kind", str, "constant")
    spec = {"kind": kind}
    if kind == "constant":
        spec["value"] = _get(cp, "coefficient", "value", float, 3.0)
    elif kind in ("layered", "rotated-layered", "checkerboard"):
        spec["epsilon"] = _get(cp, "coefficient", "epsilon", float, micro.epsilon)
        spec["lo"] = _get(cp, "coefficient", "lo", float, 1.0)
        spec["hi"] = _get(cp, "coefficient", "hi", float, 4.0)
        if kind == "layered":
            spec["fraction"] = _get(cp, "coefficient", "fraction", float, 0.5)
            spec["axis"] = _get(cp, "coefficient", "axis", int, 0)
        if kind == "rotated-layered":
            spec["fraction"] = _get(cp, "coefficient", "fraction", float, 0.5)
    elif kind == "smooth-periodic":
        spec["epsilon"] = _get(cp, "coefficient", "epsilon", float, micro.epsilon)
        spec["base"] = _get(cp, "coefficient", "base", float, 2.0)
        spec["amplitude"] = _get(cp, "coefficient", "amplitude", float, 1.0)
        spec["modulation"] = _get(cp, "coefficient", "modulation", float, 0.0)
    elif kind == "raster":
        spec["raster_path"] = _get(cp, "coefficient", "raster_path", str)
    else:
        raise ConfigError("unknown coefficient kind %r" % kind)

    relperm_kind = _get(cp, "fluids", "relperm", str, "corey")
    if relperm_kind != "corey":
        raise ConfigError("unknown relperm family %r" % relperm_kind)
    pc_kind = _get(cp, "fluids", "pc", str, "linear")
    if pc_kind == "linear":
        pc_model = ("linear", _get(cp, "fluids", "pc_entry", float, 1.0))
    elif pc_kind == "brooks-corey":
        pc_model = (
            "brooks-corey",
            _get(cp, "fluids", "pc_entry", float, 1.0),
            _get(cp, "fluids", "pc_lambda", float, 2.0),
        )
    elif pc_kind == "van-genuchten":
        pc_model = (
            "van-genuchten",
            _get(cp, "fluids", "pc_entry", float, 1.0),
            _get(cp, "fluids", "pc_n", float, 2.0),
        )
    else:
        raise ConfigError("unknown capillary pressure family %r" % pc_kind)
    fluid_kwargs = dict(
        mu_w=_get(cp, "fluids", "mu_w", float, 1.0),
        mu_n=_get(cp, "fluids", "mu_n", float, 1.0),
        rho_w=_get(cp, "fluids", "rho_w", float, 1000.0),
        rho_n=_get(cp, "fluids", "rho_n", float, 800.0),
        gravity=(
            _get(cp, "fluids", "gravity_x", float, 0.0),
            _get(cp, "fluids", "gravity_y", float, 0.0),
        ),
        phi0=_get(cp, "fluids", "phi0", float, 0.2),
        relperm=(
            "corey",
            _get(cp, "fluids", "corey_nw", float, 2.0),
            _get(cp, "fluids", "corey_nn", float, 2.0),
        ),
        pc_model=pc_model,
        lambda_floor=_get(cp, "fluids", "lambda_floor", float, 0.0),
    )

    boundary_exprs = {
        "sbar": _get(cp, "boundary", "sbar", str, "0.5"),
        "pbar": _get(cp, "boundary", "pbar", str, "0.0"),
        "s0": _get(cp, "boundary", "s0", str, None) or _get(cp, "boundary", "sbar", str, "0.5"),
    }
    for key, expr in boundary_exprs.items():
        _compile_expr(expr, with_time=(key != "s0"))

    t_end = _get(cp, "time", "t_end", float, 0.1)
    n_steps = _get(cp, "time", "n_steps", int, 4)
    if t_end <= 0 or n_steps < 1:
        raise ConfigError("time grid must have t_end > 0 and n_steps >= 1")

    formulation = _get(cp, "solver", "formulation", str, "kirchhoff")
    if formulation not in ("kirchhoff", "phases"):
        raise ConfigError("formulation must be 'kirchhoff' or 'phases'")
    solver = SolverConfig(
        tol=_get(cp, "solver", "tol", float, 1e-9),
        max_iter=_get(cp, "solver", "max_iter", int, 30),
        max_halvings=_get(cp, "solver", "max_halvings", int, 10),
        picard=_get(cp, "solver", "picard", bool, False),
    )

    policy = AdaptPolicy(
        theta_mark=_get(cp, "adapt", "theta_mark", float, 0.5),
        max_generations=_get(cp, "adapt", "max_generations", int, 30),
        cadence=_get(cp, "adapt", "cadence", str, "per-run"),
    )
    adapt_cycles = _get(cp, "adapt", "cycles", int, 2)

    out_dir = os.environ.get("HMMFLOW_OUTDIR") or _get(cp, "output", "directory", str, "out")
    cadence = _get(cp, "output", "cadence", int, 1)
    fine_epsilon = _get(cp, "oracle", "fine_epsilon", float, 0.0)
    if fine_epsilon <= 0.0:
        fine_epsilon = micro.epsilon

    return SimConfig(
        domain=domain,
        nx=nx,
        ny=ny,
        micro=micro,
        coefficient_spec=spec,
        fluid_kwargs=fluid_kwargs,
        boundary_exprs=boundary_exprs,
        t_end=t_end,
        n_steps=n_steps,
        formulation=formulation,
        solver=solver,
        policy=policy,
        adapt_cycles=adapt_cycles,
        out_dir=out_dir,
        cadence=cadence,
        use_exact_oracle=_get(cp, "oracle", "use_exact", bool, True),
        fine_epsilon=fine_epsilon,
        fine_factor=_get(cp, "oracle", "fine_factor", int, 8),
        max_fine_dofs=_get(cp, "oracle", "max_dofs", int, 200000),
        raw=cp,
    )
