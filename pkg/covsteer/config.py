"""
Runtime configuration for covsteer.

Settings live as module-level dicts, one per module section. Modules read
them lazily at call time::

    sdp_config = getattr(config, "sdp", {})
    solver = sdp_config.get("solver", "CLARABEL")

User files are merged over the defaults with :func:`load_config_file` and
each merged section is checked against its pydantic model; :func:`reset`
restores the defaults.
"""

import copy
import logging
from typing import Any, Dict, List, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, NonNegativeInt, PositiveFloat, PositiveInt
from pydantic import ValidationError as PydanticValidationError

from covsteer import __version__
from covsteer.errors import ProblemParseError

log = logging.getLogger(__name__)

DEFAULTS: Dict[str, Dict] = {
    "linalg": {
        # Invertible means min eigenvalue > singular_rtol * max(1, ||P||_2)
        "singular_rtol": 1e-10,
        "psd_tol": 1e-10,
        # Eigenvalues in [-clamp_tol, 0) are zeroed before factorizing
        "clamp_tol": 1e-10,
    },
    "sdp": {
        "solver": "CLARABEL",
        "fallback_solver": "SCS",
        "accept_inaccurate": True,
        "verbose": False,
        # Passed to the solver of the same name
        "solver_options": {
            "CLARABEL": {"tol_gap_abs": 1e-10, "tol_gap_rel": 1e-10, "tol_feas": 1e-10},
            "SCS": {"eps_abs": 1e-9, "eps_rel": 1e-9},
        },
    },
    "scp": {
        "w_max": 1e8,
        "workers": 1,
        # Converged iterates must also pass these checks on the recovered policy
        "gap_factor": 10.0,
        "consistency_tol": 1e-6,
        "terminal_tol": 1e-7,
    },
    "montecarlo": {
        "tolerance": 0.05,
        "mean_tolerance": 0.05,
        "check_stages": [0, 5, 10, 15, 19],
        "workers": 1,
        "chunk_size": 1000,
    },
    "export": {
        "position_block": [0, 1],
    },
}

SECTIONS = tuple(DEFAULTS)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LinalgSection(_Section):
    singular_rtol: PositiveFloat
    psd_tol: NonNegativeFloat
    clamp_tol: NonNegativeFloat


class SdpSection(_Section):
    solver: str
    fallback_solver: Optional[str]
    accept_inaccurate: bool
    verbose: bool
    solver_options: Dict[str, Dict[str, Any]]


class ScpSection(_Section):
    w_max: PositiveFloat
    workers: PositiveInt
    gap_factor: PositiveFloat
    consistency_tol: PositiveFloat
    terminal_tol: NonNegativeFloat


class MontecarloSection(_Section):
    tolerance: PositiveFloat
    mean_tolerance: PositiveFloat
    check_stages: List[NonNegativeInt]
    workers: PositiveInt
    chunk_size: PositiveInt


class ExportSection(_Section):
    position_block: List[NonNegativeInt] = Field(min_length=2, max_length=2)


SECTION_MODELS = {
    "linalg": LinalgSection,
    "sdp": SdpSection,
    "scp": ScpSection,
    "montecarlo": MontecarloSection,
    "export": ExportSection,
}

linalg: Dict = {}
sdp: Dict = {}
scp: Dict = {}
montecarlo: Dict = {}
export: Dict = {}

# Command line flags, filled by the CLI
kwargs: Dict = {}


def update_dict(target: Dict, source: Dict) -> Dict:
    """Recursively merge ``source`` into ``target`` in place."""
    for key, value in source.items():
        if isinstance(value, dict) and isinstance(target.get(key), dict):
            update_dict(target[key], value)
        else:
            target[key] = copy.deepcopy(value)
    return target


def reset() -> None:
    """Restore every section to its default values."""
    for section in SECTIONS:
        globals()[section] = copy.deepcopy(DEFAULTS[section])
    kwargs.clear()


def validate_section(section: str, values: Dict, source: str = "config") -> Dict:
    """
    Check a complete section against its model and return the coerced values.

    Numeric strings such as ``"1e8"`` (which YAML leaves as strings) are
    converted; anything else of the wrong type raises ProblemParseError.
    """
    try:
        checked = SECTION_MODELS[section].model_validate(values)
    except PydanticValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in (section, *first.get("loc", ())))
        raise ProblemParseError(f"Invalid setting '{key}' in {source}: {first.get('msg', e)}") from e
    return checked.model_dump()


def load_config_file(path) -> None:
    """Merge a user YAML configuration file over the current settings."""
    try:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
    except OSError as e:
        raise ProblemParseError(f"Cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ProblemParseError(f"Malformed config file {path}: {e}") from e

    if not isinstance(user, dict):
        raise ProblemParseError(f"Config file {path} must contain a mapping")

    merged = {}
    for section, values in user.items():
        if section not in SECTIONS:
            log.warning(f"Ignoring unknown config section '{section}' in {path}")
            continue
        if not isinstance(values, dict):
            raise ProblemParseError(f"Config section '{section}' in {path} must be a mapping")
        candidate = update_dict(copy.deepcopy(globals()[section]), values)
        merged[section] = validate_section(section, candidate, source=str(path))

    # Nothing is applied unless every section validates
    for section, values in merged.items():
        current = globals()[section]
        current.clear()
        current.update(values)
    log.debug(f"Loaded config file {path}")


def execution_start() -> None:
    """
    Code to execute after config files and command line flags have been
    parsed.

    Default values are registered only where a user file has not already set
    them, so customised settings are never clobbered.
    """
    log.info("Running covsteer v{}".format(__version__))

    for section in SECTIONS:
        current = globals()[section]
        for key, value in DEFAULTS[section].items():
            if key not in current:
                current[key] = copy.deepcopy(value)


reset()
