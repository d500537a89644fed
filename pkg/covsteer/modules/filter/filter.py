"""
===============================================
Offline Filter Design
===============================================

The Kalman gains and error covariances depend only on the initial filter
covariance and the noise statistics, never on the control, so the whole
schedule is computed before any optimization:
- (underweighted) Kalman gain
- Joseph-form measurement update, valid for any gain
- covariance time update and innovation covariance
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Tuple

import numpy as np

from covsteer.errors import DimensionError, PreconditionError
from covsteer.modules.linalg import spd_solve, symmetrize

if TYPE_CHECKING:
    from covsteer.modules.model import ProblemSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterStage:
    L: np.ndarray
    Ptilde_minus: np.ndarray
    Ptilde: np.ndarray
    Pinno: np.ndarray

    def __post_init__(self):
        for name in ("L", "Ptilde_minus", "Ptilde", "Pinno"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class FilterSchedule:
    stages: Tuple[FilterStage, ...]
    p: float

    def __len__(self) -> int:
        return len(self.stages)

    def gains(self) -> np.ndarray:
        return np.stack([s.L for s in self.stages])


def kalman_gain(Ptilde_minus, H, R, p: float = 1.0, stage=None) -> np.ndarray:
    """
    L = Ptilde^- H^T ((1/p) H Ptilde^- H^T + R)^{-1}.

    ``p = 1`` is the optimal gain; smaller ``p`` underweights the measurement.
    """
    if not 0 < p <= 1:
        raise PreconditionError(f"underweighting factor must lie in (0, 1], got {p}")
    Pm = np.atleast_2d(np.asarray(Ptilde_minus, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if H.shape[1] != Pm.shape[0] or R.shape != (H.shape[0], H.shape[0]):
        raise DimensionError(f"non-conformable shapes: Ptilde^- {Pm.shape}, H {H.shape}, R {R.shape}")

    HP = H @ Pm
    innovation = symmetrize(HP @ H.T / p + R)
    # innovation is symmetric, so L^T = innovation^{-1} H Ptilde^-
    return spd_solve(innovation, HP, name="innovation matrix", stage=stage).T


def joseph_update(Ptilde_minus, L, H, R) -> np.ndarray:
    """(I - L H) Ptilde^- (I - L H)^T + L R L^T; PSD for any gain."""
    Pm = np.atleast_2d(np.asarray(Ptilde_minus, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if L.shape != (Pm.shape[0], H.shape[0]) or H.shape[1] != Pm.shape[0] or R.shape != (H.shape[0],) * 2:
        raise DimensionError(f"non-conformable shapes: Ptilde^- {Pm.shape}, L {L.shape}, H {H.shape}, R {R.shape}")
    IKH = np.eye(Pm.shape[0]) - L @ H
    return symmetrize(IKH @ Pm @ IKH.T + L @ R @ L.T)


def time_update(Ptilde, A, G) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    return symmetrize(A @ np.atleast_2d(Ptilde) @ A.T + G @ G.T)


def innovation_cov(Ptilde_minus, H, R) -> np.ndarray:
    H = np.atleast_2d(np.asarray(H, dtype=float))
    return symmetrize(H @ np.atleast_2d(Ptilde_minus) @ H.T + np.atleast_2d(R))


def design_filter(spec: "ProblemSpec") -> FilterSchedule:
    """Run the filter recursion for k = 0..N-1 starting from the file's Ptilde0."""
    p = spec.underweight_p
    Pm = np.array(spec.boundary.init.Ptilde0, dtype=float)
    stages = []
    for k, stage in enumerate(spec.stages):
        L = kalman_gain(Pm, stage.H, stage.R, p, stage=k)
        Pt = joseph_update(Pm, L, stage.H, stage.R)
        stages.append(FilterStage(L=L, Ptilde_minus=Pm, Ptilde=Pt, Pinno=innovation_cov(Pm, stage.H, stage.R)))
        Pm = time_update(Pt, stage.A, stage.G)

    log.info(f"Designed filter schedule over {len(stages)} stages (p = {p})")
    log.debug(f"Filter error covariance traces: {[round(float(np.trace(s.Ptilde)), 6) for s in stages]}")
    return FilterSchedule(stages=tuple(stages), p=p)
