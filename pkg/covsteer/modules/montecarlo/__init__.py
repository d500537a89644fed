from .montecarlo import (
    MCReport,
    TrialState,
    reference_errors,
    run_ensemble,
    sample_initial,
    simulate_trial,
    trial_rng,
    trial_rows,
)

__all__ = [
    "MCReport",
    "TrialState",
    "reference_errors",
    "run_ensemble",
    "sample_initial",
    "simulate_trial",
    "trial_rng",
    "trial_rows",
]
