"""Experiment configuration: one TOML file describes model, claim, grid,
solver and sweep; every run is reproducible from that file plus a seed.

Validation is strict: unknown keys and unresolvable registry names are
reported with their section path so typos fail loudly instead of silently
falling back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import tomli

from .hedging import ContingentClaim, make_claim
from .market import (
    G_FUNCTIONS,
    ApproximationKind,
    CoefficientSpec,
    DegenerateModelError,
    JumpSpec,
    MarketModel,
    PowerLawDensity,
    TiltedPowerLawDensity,
)
from .paths import TimeGrid
from .solver import BasisSpec, SolverConfig


class ConfigError(ValueError):
    pass


DENSITIES = {
    "power_law": (PowerLawDensity, ("alpha", "z_min", "z_max")),
    "tilted_power_law": (TiltedPowerLawDensity, ("alpha", "eta", "z_min", "z_max")),
}

KIND_BUILDERS = {
    "Original": lambda eps: ApproximationKind.original(),
    "TruncateAddB": ApproximationKind.truncate_add_b,
    "TruncateRescaleW": ApproximationKind.truncate_rescale_w,
    "TruncateOnly": ApproximationKind.truncate_only,
    "VarianceMatchedW": ApproximationKind.variance_matched_w,
}


@dataclass
class ExperimentConfig:
    model: MarketModel
    claim: ContingentClaim
    grid: TimeGrid
    n_paths: int
    epsilon_base: float | None
    max_exclusion_fraction: float
    solver: SolverConfig
    sweep_tag: str | None
    sweep_epsilons: tuple
    sweep_mvh: bool
    hedge_kind: ApproximationKind
    out_dir: str
    seed: int
    digest: str


_MISSING = object()


class _Section:
    """A dict wrapper that tracks consumed keys and names its path in
    every error."""

    def __init__(self, data, path):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a table, got {type(data).__name__}")
        self.data = data
        self.path = path
        self.seen = set()

    def take(self, key, default=_MISSING):
        self.seen.add(key)
        if key in self.data:
            return self.data[key]
        if default is _MISSING:
            raise ConfigError(f"{self.path}.{key}: required key is missing")
        return default

    def section(self, key, required=True):
        if key not in self.data:
            if required:
                raise ConfigError(f"{self.path}.{key}: required section is missing")
            self.seen.add(key)
            return None
        self.seen.add(key)
        return _Section(self.data[key], f"{self.path}.{key}")

    def finish(self):
        unknown = set(self.data) - self.seen
        if unknown:
            raise ConfigError(f"{self.path}: unknown keys {sorted(unknown)}")


def _number(section, key, default=None, positive=False):
    args = () if default is None else (default,)
    value = section.take(key, *args)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{section.path}.{key}: expected a number, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(f"{section.path}.{key}: must be positive, got {value}")
    return float(value)


def _time_function(section, key, default=None):
    """A coefficient curve: plain number (constant) or an affine table."""
    value = section.take(key, default)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, dict):
        sub = _Section(value, f"{section.path}.{key}")
        kind = sub.take("kind")
        if kind == "constant":
            level = _number(sub, "value")
            sub.finish()
            return level
        if kind == "affine":
            intercept = _number(sub, "intercept")
            slope = _number(sub, "slope")
            sub.finish()
            return lambda t: intercept + slope * t
        raise ConfigError(f"{section.path}.{key}.kind: unknown time function {kind!r}")
    raise ConfigError(f"{section.path}.{key}: expected a number or a table, got {value!r}")


def _build_jump(section) -> JumpSpec:
    g_name = section.take("g", "linear")
    if g_name not in G_FUNCTIONS:
        raise ConfigError(f"{section.path}.g: unknown loading {g_name!r}, "
                          f"choose from {sorted(G_FUNCTIONS)}")
    g = G_FUNCTIONS[g_name]
    atoms = section.take("atoms", None)
    density_name = section.take("density", None)
    if (atoms is None) == (density_name is None):
        raise ConfigError(f"{section.path}: specify exactly one of atoms or density")
    try:
        if atoms is not None:
            section.finish()
            return JumpSpec(atoms=[tuple(pair) for pair in atoms], g=g)
        if density_name not in DENSITIES:
            raise ConfigError(f"{section.path}.density: unknown density {density_name!r}, "
                              f"choose from {sorted(DENSITIES)}")
        cls, keys = DENSITIES[density_name]
        kwargs = {}
        for key in keys:
            value = section.take(key, None)
            if value is not None:
                kwargs[key] = float(value)
        section.finish()
        return JumpSpec(density=cls(**kwargs), g=g)
    except DegenerateModelError as exc:
        raise ConfigError(f"{section.path}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{section.path}: {exc}") from exc


def _build_kind(path, tag, epsilon) -> ApproximationKind:
    if tag not in KIND_BUILDERS:
        raise ConfigError(f"{path}: unknown kind tag {tag!r}, choose from {sorted(KIND_BUILDERS)}")
    if tag == "Original":
        return ApproximationKind.original()
    if epsilon is None:
        raise ConfigError(f"{path}: tag {tag!r} needs an epsilon")
    try:
        return KIND_BUILDERS[tag](float(epsilon))
    except (ValueError, DegenerateModelError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path, seed_override=None, out_override=None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return parse_config(raw, seed_override=seed_override, out_override=out_override)


def parse_config(raw: dict, seed_override=None, out_override=None) -> ExperimentConfig:
    top = _Section(raw, "config")

    seed = seed_override if seed_override is not None else top.take("seed", None)
    top.seen.add("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("config.seed: a seed is mandatory (integer); "
                          "runs must be reproducible")
    out_dir = out_override if out_override is not None else top.take("out_dir", "out")
    top.seen.add("out_dir")

    grid_sec = top.section("grid")
    horizon = _number(grid_sec, "T", positive=True)
    n_steps = grid_sec.take("n_steps")
    if not isinstance(n_steps, int) or n_steps < 1:
        raise ConfigError("config.grid.n_steps: expected a positive integer")
    grid_sec.finish()
    grid = TimeGrid(horizon, n_steps)

    model_sec = top.section("model")
    s0 = _number(model_sec, "s0", positive=True)
    coeffs = CoefficientSpec(
        a=_time_function(model_sec, "a", 0.0),
        b=_time_function(model_sec, "b", 0.0),
        r=_time_function(model_sec, "r", 0.0),
        gamma_tilde=_time_function(model_sec, "gamma_tilde", 0.0),
    )
    jump_sec = model_sec.section("jump", required=False)
    jump = JumpSpec.none() if jump_sec is None else _build_jump(jump_sec)
    model_sec.finish()
    try:
        model = MarketModel(s0, coeffs, jump, horizon)
    except DegenerateModelError as exc:
        raise ConfigError(f"config.model: {exc}") from exc

    claim_sec = top.section("claim")
    claim_name = claim_sec.take("name")
    claim_params = {k: claim_sec.take(k) for k in list(claim_sec.data) if k != "name"}
    try:
        claim = make_claim(claim_name, **claim_params)
    except ValueError as exc:
        raise ConfigError(f"config.claim: {exc}") from exc
    claim_sec.finish()

    paths_sec = top.section("paths")
    n_paths = paths_sec.take("n_paths")
    if not isinstance(n_paths, int) or n_paths < 2:
        raise ConfigError("config.paths.n_paths: expected an integer >= 2")
    eps_base = paths_sec.take("epsilon_base", None)
    if eps_base is not None:
        eps_base = float(eps_base)
    max_excl = _number(paths_sec, "max_exclusion_fraction", 1e-3)
    paths_sec.finish()

    solver_sec = top.section("solver", required=False)
    if solver_sec is None:
        solver = SolverConfig()
    else:
        form = solver_sec.take("basis", "poly")
        degree = solver_sec.take("degree", 3)
        decimals = solver_sec.take("decimals", 8)
        if form == "poly":
            basis = BasisSpec.poly(degree)
        elif form == "indicator":
            basis = BasisSpec.indicator(decimals)
        else:
            raise ConfigError(f"config.solver.basis: unknown basis {form!r}")
        try:
            solver = SolverConfig(
                basis=basis,
                ridge=_number(solver_sec, "ridge", 1e-8),
                mode=solver_sec.take("mode", "one_step"),
                implicit_sweeps=solver_sec.take("implicit_sweeps", 0),
                picard_tol=_number(solver_sec, "picard_tol", 1e-12),
            )
        except ValueError as exc:
            raise ConfigError(f"config.solver: {exc}") from exc
        solver_sec.finish()

    sweep_sec = top.section("sweep", required=False)
    if sweep_sec is None:
        sweep_tag, sweep_eps, sweep_mvh = None, (), True
    else:
        sweep_tag = sweep_sec.take("tag")
        eps_list = sweep_sec.take("epsilons")
        if not isinstance(eps_list, list) or len(eps_list) < 4:
            raise ConfigError("config.sweep.epsilons: need a list of at least 4 values")
        sweep_eps = tuple(float(e) for e in eps_list)
        sweep_mvh = bool(sweep_sec.take("mvh", True))
        _build_kind("config.sweep.tag", sweep_tag, sweep_eps[0])
        sweep_sec.finish()

    hedge_sec = top.section("hedge", required=False)
    if hedge_sec is None:
        hedge_kind = ApproximationKind.original()
    else:
        tag = hedge_sec.take("kind", "Original")
        epsilon = hedge_sec.take("epsilon", None)
        hedge_kind = _build_kind("config.hedge", tag, epsilon)
        hedge_sec.finish()

    top.finish()

    effective = dict(raw)
    effective["seed"] = seed
    effective.pop("out_dir", None)  # the output location does not alter results
    digest = hashlib.sha256(
        json.dumps(effective, sort_keys=True, default=repr).encode()
    ).hexdigest()[:12]

    return ExperimentConfig(
        model=model, claim=claim, grid=grid, n_paths=n_paths,
        epsilon_base=eps_base, max_exclusion_fraction=max_excl, solver=solver,
        sweep_tag=sweep_tag, sweep_epsilons=sweep_eps, sweep_mvh=sweep_mvh,
        hedge_kind=hedge_kind, out_dir=str(out_dir), seed=seed, digest=digest,
    )
