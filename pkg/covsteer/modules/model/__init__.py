from .model import (
    BoundaryConditions,
    Case,
    Dims,
    InitialCovariance,
    InitMode,
    Policy,
    ProblemSpec,
    ScpParams,
    StageModel,
    builtin_double_integrator,
    double_integrator_stage,
    dump_problem,
    load_problem,
    parse_problem,
    validate_problem,
)

__all__ = [
    "BoundaryConditions",
    "Case",
    "Dims",
    "InitialCovariance",
    "InitMode",
    "Policy",
    "ProblemSpec",
    "ScpParams",
    "StageModel",
    "builtin_double_integrator",
    "double_integrator_stage",
    "dump_problem",
    "load_problem",
    "parse_problem",
    "validate_problem",
]
