from .augmented import (
    AugmentedMoments,
    LegacyStage,
    Phase,
    PropagationMatrices,
    StageMoments,
    build_case1_init,
    build_case2_init,
    control_update_expanded,
    cov_control_update,
    cov_filter_update,
    cross_block,
    estimate_block,
    estimation_error_cov,
    filter_update,
    legacy_recursion,
    mean_step,
    propagate_moments,
    propagation_matrices,
    truth_block,
)

__all__ = [
    "AugmentedMoments",
    "LegacyStage",
    "Phase",
    "PropagationMatrices",
    "StageMoments",
    "build_case1_init",
    "build_case2_init",
    "control_update_expanded",
    "cov_control_update",
    "cov_filter_update",
    "cross_block",
    "estimate_block",
    "estimation_error_cov",
    "filter_update",
    "legacy_recursion",
    "mean_step",
    "propagate_moments",
    "propagation_matrices",
    "truth_block",
]
