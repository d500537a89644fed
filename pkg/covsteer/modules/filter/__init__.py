from .filter import (
    FilterSchedule,
    FilterStage,
    design_filter,
    innovation_cov,
    joseph_update,
    kalman_gain,
    time_update,
)

__all__ = [
    "FilterSchedule",
    "FilterStage",
    "design_filter",
    "innovation_cov",
    "joseph_update",
    "kalman_gain",
    "time_update",
]
