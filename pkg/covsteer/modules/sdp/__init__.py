from .sdp import (
    BackendResult,
    ConicBackend,
    ConicProgram,
    CvxpyBackend,
    ProgramKind,
    StageVars,
    Status,
    SubproblemSolution,
    TaggedConstraint,
    assemble_irm_iterate,
    assemble_relaxed,
    default_backend,
    dump_program,
    recover_gains,
    relaxation_gap,
    solve,
)

__all__ = [
    "BackendResult",
    "ConicBackend",
    "ConicProgram",
    "CvxpyBackend",
    "ProgramKind",
    "StageVars",
    "Status",
    "SubproblemSolution",
    "TaggedConstraint",
    "assemble_irm_iterate",
    "assemble_relaxed",
    "default_backend",
    "dump_program",
    "recover_gains",
    "relaxation_gap",
    "solve",
]
