"""
===============================================
Augmented-State Statistics
===============================================

Moments of the stacked true state and estimate ``[x_k; xhat_k]``:
- initial a priori augmented covariances for the two sampling procedures
- mean propagation
- the augmented covariance filter update and control update
- re-propagation of a policy through both updates
- the prior-work recursion, which assumes the estimate is orthogonal to
  its error, used as an equivalence oracle and for comparison output

The update helpers only use ``@``, ``.T`` and a block builder, so the same
expressions are assembled over numpy arrays here and over cvxpy variables
by the subproblem module.
"""

import enum
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, List, NamedTuple, Optional

import numpy as np
from scipy.linalg import block_diag

from covsteer.errors import DimensionError, PreconditionError
from covsteer.modules.linalg import is_psd, symmetrize

if TYPE_CHECKING:
    from covsteer.modules.filter import FilterSchedule
    from covsteer.modules.model import Policy, ProblemSpec, StageModel

log = logging.getLogger(__name__)


class Phase(str, enum.Enum):
    APRIORI = "apriori"
    APOSTERIORI = "aposteriori"


@dataclass(frozen=True)
class AugmentedMoments:
    """Mean ``mu`` (shared by x, xhat and xhat^-) and the 2nx x 2nx covariance ``[[P, Sigma^T], [Sigma, Phat]]``."""

    mu: np.ndarray
    Paug: np.ndarray
    phase: Phase

    @property
    def nx(self) -> int:
        return self.mu.shape[0]

    @property
    def truth(self) -> np.ndarray:
        return truth_block(self.Paug)

    @property
    def estimate(self) -> np.ndarray:
        return estimate_block(self.Paug)

    @property
    def cross(self) -> np.ndarray:
        return cross_block(self.Paug)


class StageMoments(NamedTuple):
    prior: AugmentedMoments
    posterior: AugmentedMoments


class LegacyStage(NamedTuple):
    """A posteriori estimate and truth covariances from the orthogonality-based recursion."""

    Phat: np.ndarray
    P: np.ndarray


@dataclass(frozen=True)
class PropagationMatrices:
    Phi: np.ndarray
    Lblk: np.ndarray
    Ablk: np.ndarray
    Bblk: np.ndarray
    Kblk: np.ndarray
    Qblk: np.ndarray


def _half(Paug) -> int:
    n2 = Paug.shape[0]
    if n2 % 2 or Paug.shape[1] != n2:
        raise DimensionError(f"augmented covariance must be 2nx x 2nx, got {Paug.shape}")
    return n2 // 2


def truth_block(Paug):
    nx = _half(Paug)
    return Paug[:nx, :nx]


def estimate_block(Paug):
    nx = _half(Paug)
    return Paug[nx:, nx:]


def cross_block(Paug):
    """Sigma = Cov(xhat, x), the lower-left block."""
    nx = _half(Paug)
    return Paug[nx:, :nx]


def estimation_error_cov(Paug) -> np.ndarray:
    """Cov(x - xhat) = P + Phat - Sigma - Sigma^T, valid for any gain."""
    P, Phat, Sigma = truth_block(Paug), estimate_block(Paug), cross_block(Paug)
    return symmetrize(P + Phat - Sigma - Sigma.T)


def _require_psd(m, name: str) -> np.ndarray:
    arr = symmetrize(m)
    if not is_psd(arr, 1e-10 * max(1.0, float(np.linalg.norm(arr, 2)))):
        raise PreconditionError(f"{name} must be PSD")
    return arr


def build_case1_init(Ptilde0_minus, Phat0_minus) -> np.ndarray:
    """Estimate orthogonal to its error: [[Phat + Ptilde, Phat], [Phat, Phat]]."""
    Pt = _require_psd(Ptilde0_minus, "Ptilde0_minus")
    Ph = _require_psd(Phat0_minus, "Phat0_minus")
    if Pt.shape != Ph.shape:
        raise DimensionError(f"Ptilde0_minus {Pt.shape} and Phat0_minus {Ph.shape} differ in shape")
    return symmetrize(np.block([[Ph + Pt, Ph], [Ph, Ph]]))


def build_case2_init(Ptilde0_minus, P0) -> np.ndarray:
    """Estimation error orthogonal to the true state: [[P0, P0], [P0, P0 + Ptilde]]."""
    Pt = _require_psd(Ptilde0_minus, "Ptilde0_minus")
    P = _require_psd(P0, "P0")
    if Pt.shape != P.shape:
        raise DimensionError(f"Ptilde0_minus {Pt.shape} and P0 {P.shape} differ in shape")
    return symmetrize(np.block([[P, P], [P, P + Pt]]))


def propagation_matrices(stage: "StageModel", L, K=None) -> PropagationMatrices:
    A, B, G, H, R = stage.A, stage.B, stage.G, stage.H, stage.R
    nx, nu = B.shape
    L = np.asarray(L, dtype=float)
    if L.shape != (nx, H.shape[0]):
        raise DimensionError(f"gain has shape {L.shape}, expected {(nx, H.shape[0])}")
    K = np.zeros((nu, nx)) if K is None else np.asarray(K, dtype=float)
    if K.shape != (nu, nx):
        raise DimensionError(f"feedback gain has shape {K.shape}, expected {(nu, nx)}")

    LH = L @ H
    Z = np.zeros((nx, nx))
    return PropagationMatrices(
        Phi=np.block([[np.eye(nx), Z], [LH, np.eye(nx) - LH]]),
        Lblk=block_diag(Z, L @ R @ L.T),
        Ablk=block_diag(A, A),
        Bblk=block_diag(B, B),
        Kblk=np.block([[np.zeros((nu, nx)), K], [np.zeros((nu, nx)), K]]),
        Qblk=block_diag(G @ G.T, Z),
    )


def mean_step(mu, A, B, ubar) -> np.ndarray:
    return np.asarray(A) @ np.asarray(mu) + np.asarray(B) @ np.asarray(ubar)


def filter_update(Paug_minus, mats: PropagationMatrices):
    """Phi P^- Phi^T + Lblk, affine in ``Paug_minus``."""
    return mats.Phi @ Paug_minus @ mats.Phi.T + mats.Lblk


def control_update_expanded(Paug, mats: PropagationMatrices, U, Y, S, block: Callable = np.block):
    """
    Control update with the bilinear products replaced by U = K Phat,
    Y = K Phat K^T and S = K Sigma. Affine in (Paug, U, Y, S).
    """
    W = block([[S, U], [S, U]])
    YY = block([[Y, Y], [Y, Y]])
    return (
        mats.Ablk @ Paug @ mats.Ablk.T
        + mats.Bblk @ YY @ mats.Bblk.T
        + mats.Bblk @ W @ mats.Ablk.T
        + mats.Ablk @ W.T @ mats.Bblk.T
        + mats.Qblk
    )


def cov_filter_update(Paug_minus, stage: "StageModel", L) -> np.ndarray:
    """A posteriori augmented covariance after the measurement update."""
    return symmetrize(filter_update(np.asarray(Paug_minus, dtype=float), propagation_matrices(stage, L)))


def cov_control_update(Paug, stage: "StageModel", K) -> np.ndarray:
    """Next a priori augmented covariance under ``u = ubar + K (xhat - mu)``."""
    L0 = np.zeros((stage.A.shape[0], stage.H.shape[0]))
    mats = propagation_matrices(stage, L0, K)
    closed = mats.Ablk + mats.Bblk @ mats.Kblk
    return symmetrize(closed @ np.asarray(Paug, dtype=float) @ closed.T + mats.Qblk)


def propagate_moments(spec: "ProblemSpec", schedule: "FilterSchedule", policy: "Policy") -> List[StageMoments]:
    """Push the initial moments through both updates for k = 0..N-1."""
    if len(schedule.stages) < spec.N or policy.N < spec.N:
        raise DimensionError(
            f"schedule ({len(schedule.stages)}) and policy ({policy.N}) must cover N = {spec.N} stages"
        )
    mu = np.array(spec.boundary.mu0, dtype=float)
    Pm = np.array(spec.boundary.Paug0, dtype=float)
    moments = []
    for k, stage in enumerate(spec.stages):
        Pp = cov_filter_update(Pm, stage, schedule.stages[k].L)
        moments.append(
            StageMoments(
                prior=AugmentedMoments(mu, Pm, Phase.APRIORI),
                posterior=AugmentedMoments(mu, Pp, Phase.APOSTERIORI),
            )
        )
        if k < spec.N - 1:
            Pm = cov_control_update(Pp, stage, policy.K[k])
            mu = mean_step(mu, stage.A, stage.B, policy.ubar[k])
    return moments


def legacy_recursion(
    spec: "ProblemSpec",
    schedule: "FilterSchedule",
    policy: "Policy",
    force: bool = False,
    Phat0_minus: Optional[np.ndarray] = None,
) -> List[LegacyStage]:
    """
    Covariance trajectories under the orthogonality assumption:

        Phat_0     = Phat_0^- + L_0 P_inno_0 L_0^T
        Phat_{k+1} = (A + B K) Phat_k (A + B K)^T + L_{k+1} P_inno_{k+1} L_{k+1}^T
        P_k        = Phat_k + Ptilde_k

    Only valid for the optimal gain (p = 1); ``force=True`` evaluates it
    anyway so its mismatch with sampled statistics can be shown.
    """
    if schedule.p != 1.0:
        if not force:
            raise PreconditionError(
                f"the orthogonality-based recursion requires the optimal gain (p = 1), got p = {schedule.p}"
            )
        log.warning(f"Evaluating the orthogonality-based recursion with p = {schedule.p}; it will not match samples")

    if Phat0_minus is None:
        Phat0_minus = estimate_block(spec.boundary.Paug0)

    out = []
    fs = schedule.stages[0]
    Phat = symmetrize(Phat0_minus + fs.L @ fs.Pinno @ fs.L.T)
    for k, stage in enumerate(spec.stages):
        fs = schedule.stages[k]
        out.append(LegacyStage(Phat=Phat, P=symmetrize(Phat + fs.Ptilde)))
        if k < spec.N - 1:
            closed = stage.A + stage.B @ policy.K[k]
            nxt = schedule.stages[k + 1]
            Phat = symmetrize(closed @ Phat @ closed.T + nxt.L @ nxt.Pinno @ nxt.L.T)
    return out
