from .scp import (
    ConvergenceTrace,
    IrmState,
    IterationRecord,
    PolicyCheck,
    RankData,
    ScpOutcome,
    check_recovered_policy,
    extract_rank_data,
    initialize_multipliers,
    run,
)

__all__ = [
    "ConvergenceTrace",
    "IrmState",
    "IterationRecord",
    "PolicyCheck",
    "RankData",
    "ScpOutcome",
    "check_recovered_policy",
    "extract_rank_data",
    "initialize_multipliers",
    "run",
]
