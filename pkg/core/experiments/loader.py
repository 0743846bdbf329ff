"""
Experiment Config Loader

Loads and validates plain-text `key = value` experiment configurations:
- schema with parsers, defaults and per-experiment requirements
- TURNPIKE_<KEY> environment overrides (echoed into the resolved config)
- field recipes for targets, controls and initial data

Files are read with python-dotenv (no interpolation); unknown keys are rejected.
"""

import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from dotenv import dotenv_values

from core.errors import ConfigError
from core.flow.params import PRESSURE_SCHEMES, FlowParams

EXPERIMENTS = ("steady", "evolve", "optimize", "lq", "decay", "stabilize", "turnpike", "gamma_convergence")
ENV_PREFIX = "TURNPIKE_"
RECIPE_KINDS = ("zero", "mode", "random", "file", "constructed", "auto", "none")

# Experiments whose stationary reference must be a fixed point of the stepper
COUPLED_BY_DEFAULT = ("turnpike", "gamma_convergence", "stabilize", "lq", "decay")

# Experiments run on the single horizon [0, t_final]
T_FINAL_EXPERIMENTS = ("evolve", "optimize", "lq", "stabilize")


# ===== Parsers =====

def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_float_list(text: str) -> List[float]:
    items = [item for item in text.replace(";", ",").split(",") if item.strip()]
    return [float(item) for item in items]


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def parser(text: str) -> Any:
        return None if text.strip().lower() in ("", "none", "null") else parse(text)
    return parser


def _choice(options: Tuple[str, ...]) -> Callable[[str], str]:
    def parser(text: str) -> str:
        value = text.strip()
        if value not in options:
            raise ValueError(f"expected one of {options}, got {value!r}")
        return value
    return parser


def parse_recipe(text: str) -> Tuple[str, Optional[str]]:
    """
    Split a field recipe into (kind, argument).

    zero | none | auto | constructed | mode:<amplitude> | random:<amplitude> | file:<path>
    """
    value = text.strip()
    kind, _, argument = value.partition(":")
    if kind not in RECIPE_KINDS:
        raise ValueError(f"unknown recipe {value!r}, expected one of {RECIPE_KINDS}")
    if kind in ("mode", "random"):
        amplitude = float(argument)
        if amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {amplitude}")
        return kind, argument
    if kind == "file":
        if not argument:
            raise ValueError("file recipe needs a path")
        return kind, argument
    if argument:
        raise ValueError(f"recipe {kind!r} takes no argument")
    return kind, None


def _parse_recipe_text(text: str) -> str:
    parse_recipe(text)
    return text.strip()


@dataclass(frozen=True)
class ConfigKey:
    parse: Callable[[str], Any]
    default: Any
    doc: str
    required: bool = False


CONFIG_SCHEMA: Dict[str, ConfigKey] = {
    "experiment": ConfigKey(_choice(EXPERIMENTS), None, "experiment to run", required=True),
    "n": ConfigKey(_parse_int, 32, "cells per side (power of two >= 8)"),
    "mu": ConfigKey(_parse_float, 0.1, "viscosity"),
    "dt": ConfigKey(_parse_float, 0.01, "time step"),
    "t_final": ConfigKey(_parse_float, 1.0, "horizon of single-horizon experiments"),
    "horizons": ConfigKey(_optional(_parse_float_list), None, "comma-separated horizons (turnpike, gamma_convergence)"),
    "pressure_scheme": ConfigKey(_choice(("auto",) + PRESSURE_SCHEMES), "auto", "auto, projection or coupled"),
    "convection": ConfigKey(_parse_bool, True, "include the convection term"),
    "cfl": ConfigKey(_parse_float, 0.5, "advective CFL bound used by validate"),
    "variant": ConfigKey(_choice(("unsteady", "steady", "time_independent")), "unsteady", "functional minimized by optimize"),
    "k": ConfigKey(_parse_float, 1.0, "control penalty of the evolutionary problems"),
    "alpha": ConfigKey(_parse_float, 1.0, "control penalty of the steady problem"),
    "admissible_radius": ConfigKey(_optional(_parse_float), None, "radius of the admissible L2 ball"),
    "target": ConfigKey(_parse_recipe_text, "zero", "target recipe"),
    "target_control": ConfigKey(_parse_recipe_text, "zero", "control whose steady state is the constructed target"),
    "control": ConfigKey(_parse_recipe_text, "zero", "forcing of steady/evolve/stabilize, base-flow forcing of lq/decay"),
    "y0": ConfigKey(_parse_recipe_text, "auto", "initial state recipe"),
    "q0": ConfigKey(_parse_recipe_text, "auto", "terminal weight recipe"),
    "seed": ConfigKey(_parse_int, 0, "seed of every random draw"),
    "max_iter": ConfigKey(_parse_int, 200, "optimizer iteration cap"),
    "tol": ConfigKey(_parse_float, 1e-8, "optimizer projected-gradient tolerance"),
    "steady_tol": ConfigKey(_parse_float, 1e-10, "steady solver residual tolerance"),
    "samples": ConfigKey(_parse_int, 4, "random samples (decay estimate, Rayleigh quotients)"),
    "decay_horizon": ConfigKey(_parse_float, 4.0, "horizon of decay-rate estimates"),
    "perturbation": ConfigKey(_parse_float, 0.04, "relative offset of generated turnpike initial data"),
    "offset": ConfigKey(_choice(("random", "mode")), "random", "shape of generated turnpike offsets"),
    "epsilon": ConfigKey(_optional(_parse_float), None, "closeness gate, default 0.1 |ybar|"),
    "tracking_gate": ConfigKey(_parse_float, 0.5, "largest accepted relative tracking residual"),
    "lq_tol": ConfigKey(_parse_float, 1e-9, "LQ sweep tolerance"),
    "snapshots": ConfigKey(_parse_int, 5, "field snapshots written per trajectory"),
    "threads": ConfigKey(_optional(_parse_int), None, "worker threads of horizon sweeps"),
    "output_dir": ConfigKey(_optional(str), None, "output root, default from the runtime config"),
}


@dataclass
class ExperimentConfig:
    values: Dict[str, Any]
    source: Optional[str] = None
    env_overrides: Dict[str, str] = field(default_factory=dict)
    cli_overrides: Dict[str, Any] = field(default_factory=dict)

    def __getattr__(self, name: str) -> Any:
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    @property
    def base_dir(self) -> str:
        return os.path.dirname(os.path.abspath(self.source)) if self.source else os.getcwd()

    def resolved_scheme(self) -> str:
        scheme = self.values["pressure_scheme"]
        if scheme != "auto":
            return scheme
        return "coupled" if self.values["experiment"] in COUPLED_BY_DEFAULT else "projection"

    def flow_params(self, t_final: Optional[float] = None) -> FlowParams:
        return FlowParams(
            mu=self.mu,
            dt=self.dt,
            t_final=t_final if t_final is not None else _default_horizon(self.values),
            n=self.n,
            pressure_scheme=self.resolved_scheme(),
            convection=self.convection,
            cfl=self.cfl,
        )

    def to_dict(self) -> Dict[str, Any]:
        """Resolved configuration: every key with its effective value."""
        data = dict(self.values)
        data["pressure_scheme_resolved"] = self.resolved_scheme()
        data["env_overrides"] = dict(self.env_overrides)
        data["cli_overrides"] = dict(self.cli_overrides)
        data["source"] = self.source
        return data


def _read_pairs(path: str) -> Dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError("config", f"file not found: {path}")
    raw = dotenv_values(path, interpolate=False)
    pairs = {}
    for key, value in raw.items():
        if value is None:
            raise ConfigError(key, "missing '=' and value")
        pairs[key.strip()] = value
    return pairs


def _default_horizon(values: Dict[str, Any]) -> float:
    """t_final where the experiment uses it, otherwise the first horizon (or one step)."""
    if values["experiment"] in T_FINAL_EXPERIMENTS:
        return values["t_final"]
    if values["horizons"]:
        return values["horizons"][0]
    return values["dt"]


def _check_requirements(values: Dict[str, Any]) -> None:
    experiment = values["experiment"]
    # horizons are checked against dt below
    t_final = values["t_final"] if experiment in T_FINAL_EXPERIMENTS else values["dt"]
    try:
        FlowParams(values["mu"], values["dt"], t_final, values["n"], convection=values["convection"], cfl=values["cfl"])
    except ValueError as exc:
        key, _, reason = str(exc).partition(": ")
        raise ConfigError(key, reason) from exc

    for key in ("k", "alpha", "steady_tol", "tol", "lq_tol", "decay_horizon"):
        if not values[key] > 0:
            raise ConfigError(key, f"must be > 0, got {values[key]!r}")
    for key in ("samples", "snapshots", "max_iter"):
        if values[key] < 0:
            raise ConfigError(key, f"must be >= 0, got {values[key]!r}")
    if values["admissible_radius"] is not None and not values["admissible_radius"] > 0:
        raise ConfigError("admissible_radius", "must be > 0 when set")

    if experiment in ("turnpike", "gamma_convergence"):
        horizons = values["horizons"]
        if not horizons:
            raise ConfigError("horizons", f"required for experiment={experiment}")
        if any(T <= 0 for T in horizons) or any(b <= a for a, b in zip(horizons, horizons[1:])):
            raise ConfigError("horizons", "must be positive and strictly increasing")
        for T in horizons:
            ratio = T / values["dt"]
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise ConfigError("horizons", f"{T} is not an integer multiple of dt={values['dt']}")
    if experiment == "gamma_convergence" and parse_recipe(values["q0"])[0] not in ("auto", "none"):
        raise ConfigError("q0", "the time-independent problem has no terminal term")
    if parse_recipe(values["target"])[0] in ("auto", "none"):
        raise ConfigError("target", "must be zero, mode, random, file or constructed")
    if parse_recipe(values["target_control"])[0] in ("auto", "none", "constructed"):
        raise ConfigError("target_control", "must be zero, mode, random or file")
    if parse_recipe(values["control"])[0] in ("auto", "none", "constructed"):
        raise ConfigError("control", "must be zero, mode, random or file")
    for key in ("y0", "q0"):
        if parse_recipe(values[key])[0] == "constructed":
            raise ConfigError(key, "constructed is only available for target")


def load_config(
    path: str,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """
    Load, override and validate an experiment configuration.

    Precedence: file < TURNPIKE_<KEY> environment < overrides (command line).
    Raises ConfigError naming the offending key.
    """
    environ = os.environ if environ is None else environ
    pairs = _read_pairs(path)
    unknown = sorted(set(pairs) - set(CONFIG_SCHEMA))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")

    env_overrides = {}
    for key in CONFIG_SCHEMA:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            pairs[key] = environ[env_key]
            env_overrides[key] = environ[env_key]

    values: Dict[str, Any] = {}
    for key, entry in CONFIG_SCHEMA.items():
        if key not in pairs:
            if entry.required:
                raise ConfigError(key, "required key missing")
            values[key] = entry.default
            continue
        try:
            values[key] = entry.parse(pairs[key])
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from exc

    cli_overrides = {key: value for key, value in (overrides or {}).items() if value is not None}
    for key, value in cli_overrides.items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(key, "unknown key")
        values[key] = value

    _check_requirements(values)
    return ExperimentConfig(values=values, source=path, env_overrides=env_overrides, cli_overrides=cli_overrides)


def validate_config(path: str, environ: Optional[Mapping[str, str]] = None) -> List[Dict[str, str]]:
    """
    Schema and cheap regime pre-checks without running any solver.

    Returns a list of {"level", "key", "message"}; empty for a clean config.
    """
    # Deferred: the checks build fields and need the experiment service.
    from .service import precheck

    try:
        config = load_config(path, environ=environ)
    except ConfigError as exc:
        return [{"level": "error", "key": exc.key, "message": exc.reason}]
    return precheck(config)
