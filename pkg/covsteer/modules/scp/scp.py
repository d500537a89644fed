"""
===============================================
Sequential Convex Programming Loop
===============================================

Solves the relaxation, then repeats rank-minimization iterates with
augmented-Lagrangian multiplier and weight updates until the rank
surrogate and the objective both settle and the recovered policy
reproduces the subproblem's moments:
- per-stage rank data from the eigendecomposition of M_k
- multiplier initialization and updates
- one progress line per iteration and a machine-readable trace
- recovery of the policy and re-propagation of the predicted moments
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, List, NamedTuple, Optional, Tuple

import numpy as np

from covsteer import config
from covsteer.errors import NoConvergence, PreconditionError, SubproblemFailed
from covsteer.modules.augmented import StageMoments, propagate_moments
from covsteer.modules.filter import FilterSchedule, design_filter
from covsteer.modules.linalg import eig_sym, min_eig
from covsteer.modules.model import Policy
from covsteer.modules.sdp import (
    ConicBackend,
    StageVars,
    SubproblemSolution,
    assemble_irm_iterate,
    assemble_relaxed,
    recover_gains,
    relaxation_gap,
    solve,
)

if TYPE_CHECKING:
    from covsteer.modules.model import ProblemSpec

log = logging.getLogger(__name__)

NAN = float("nan")


def _finite_or_none(value: float) -> Optional[float]:
    return None if math.isnan(value) else value


class RankData(NamedTuple):
    """Eigenvectors of the m - nx smallest eigenvalues of M_k and the largest of those eigenvalues."""

    V: np.ndarray
    e: float


class PolicyCheck(NamedTuple):
    """Recovered policy, its re-propagated moments and how well they match the subproblem."""

    policy: Policy
    moments: List[StageMoments]
    drift: float
    terminal_margin: float


@dataclass
class IrmState:
    iteration: int
    eigvecs: List[np.ndarray]
    e_vals: np.ndarray
    lambdas: np.ndarray
    weight: float
    J_prev: float


@dataclass(frozen=True)
class IterationRecord:
    """
    One line of the convergence trace.

    ``weight`` is the penalty weight the iterate was solved with. Record 0 is
    the relaxed solve and carries 0. Record i >= 1 carries w0 * beta^(i-1):
    the weight is multiplied by beta after each iterate, so w0 * beta^i is
    the weight iterate i + 1 will use.

    ``gap_ratio`` is the largest per-stage relaxation gap divided by
    gap_factor * eps_rank * (1 + ||S_aug||_F). ``drift`` and
    ``terminal_margin`` are only filled on iterates where the rank surrogate
    and the objective had settled: the largest entrywise difference between
    the re-propagated and the subproblem augmented covariances, and
    min eig(Pf - P_{N-1}) of the re-propagated terminal covariance.
    """

    iteration: int
    max_e: float
    J: float
    delta_J: float
    weight: float
    gaps: Tuple[float, ...]
    wall_time: float
    gap_ratio: float = NAN
    drift: float = NAN
    terminal_margin: float = NAN

    @property
    def max_gap(self) -> float:
        return max(self.gaps) if self.gaps else NAN

    def as_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "max_e": self.max_e,
            "J": self.J,
            "delta_J": _finite_or_none(self.delta_J),
            "weight": self.weight,
            "gaps": list(self.gaps),
            "wall_time": self.wall_time,
            "gap_ratio": _finite_or_none(self.gap_ratio),
            "drift": _finite_or_none(self.drift),
            "terminal_margin": _finite_or_none(self.terminal_margin),
        }


@dataclass
class ConvergenceTrace:
    records: List[IterationRecord] = field(default_factory=list)
    converged: bool = False
    failed_iteration: Optional[int] = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: IterationRecord) -> None:
        self.records.append(record)

    @property
    def iterations(self) -> int:
        """IRM iterates executed, not counting the relaxed solve."""
        return max(0, len(self.records) - 1)

    def as_dict(self) -> dict:
        return {
            "converged": self.converged,
            "failed_iteration": self.failed_iteration,
            "records": [r.as_dict() for r in self.records],
        }


@dataclass(frozen=True)
class ScpOutcome:
    policy: Policy
    moments: List[StageMoments]
    trace: ConvergenceTrace
    solution: SubproblemSolution
    schedule: FilterSchedule


def initialize_multipliers(N: int) -> np.ndarray:
    return np.zeros(N)


def _stage_rank_data(stage: StageVars, nx: int) -> RankData:
    M = stage.M
    r = M.shape[0] - nx
    values, vectors = eig_sym(M)
    return RankData(V=vectors[:, :r], e=float(values[r - 1]))


def extract_rank_data(solution: SubproblemSolution, nx: int, nu: int, workers: Optional[int] = None) -> List[RankData]:
    """
    Per stage, the (m - nx)-th smallest eigenvalue of M_k and the eigenvectors
    of the m - nx smallest eigenvalues, m = 2 nx + nu.
    """
    if not solution.ok:
        raise PreconditionError(f"no rank data for a {solution.status.value} solution")
    m = 2 * nx + nu
    for k, s in enumerate(solution.stages):
        if s.M.shape != (m, m):
            raise PreconditionError(f"stage {k}: M has shape {s.M.shape}, expected {(m, m)}")

    if workers is None:
        workers = getattr(config, "scp", {}).get("workers", 1)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map keeps stage order
            return list(pool.map(lambda s: _stage_rank_data(s, nx), solution.stages))
    return [_stage_rank_data(s, nx) for s in solution.stages]


def _gap_ratio(solution: SubproblemSolution, gaps: Tuple[float, ...], scale: float) -> float:
    bounds = [scale * (1.0 + np.linalg.norm(s.S_aug)) for s in solution.stages]
    return max((g / b for g, b in zip(gaps, bounds)), default=NAN)


def _record(
    trace: ConvergenceTrace,
    iteration: int,
    solution: SubproblemSolution,
    e_vals: np.ndarray,
    J_prev: float,
    weight: float,
    started: float,
    gap_scale: float,
) -> IterationRecord:
    gaps = tuple(float(g) for g in relaxation_gap(solution))
    record = IterationRecord(
        iteration=iteration,
        max_e=float(np.max(e_vals)),
        J=solution.objective,
        delta_J=abs(solution.objective - J_prev) if not math.isnan(J_prev) else NAN,
        weight=weight,
        gaps=gaps,
        wall_time=time.perf_counter() - started,
        gap_ratio=_gap_ratio(solution, gaps, gap_scale),
    )
    trace.append(record)
    log.info(
        f"iter {iteration:3d}  max e = {record.max_e:.3e}  J = {record.J:.6f}  "
        f"|dJ| = {record.delta_J:.3e}  w = {record.weight:.3e}  gap ratio = {record.gap_ratio:.2f}"
    )
    return record


def _fail(trace: ConvergenceTrace, solution: SubproblemSolution, iteration: int) -> SubproblemFailed:
    trace.failed_iteration = iteration
    label = "relaxed subproblem" if iteration == 0 else f"rank-minimization iterate {iteration}"
    return SubproblemFailed(
        f"{label} ended with status {solution.status.value}",
        status=solution.status,
        iteration=iteration,
        trace=trace,
    )


def check_recovered_policy(spec: "ProblemSpec", schedule: FilterSchedule, solution: SubproblemSolution) -> PolicyCheck:
    """
    Recover K_k = U_k Phat_k^{-1}, push the initial moments through the
    closed loop and compare them with the subproblem's covariances.
    """
    policy = recover_gains(solution)
    moments = propagate_moments(spec, schedule, policy)
    drift = max(
        max(float(np.max(np.abs(m.prior.Paug - s.Paug_minus))), float(np.max(np.abs(m.posterior.Paug - s.Paug))))
        for m, s in zip(moments, solution.stages)
    )
    terminal_margin = min_eig(np.asarray(spec.boundary.Pf) - moments[-1].posterior.truth)
    return PolicyCheck(policy=policy, moments=moments, drift=drift, terminal_margin=terminal_margin)


def _describe(record: IterationRecord) -> str:
    text = f"max e = {record.max_e:.3e}, last |dJ| = {record.delta_J:.3e}, gap ratio = {record.gap_ratio:.2f}"
    if not math.isnan(record.drift):
        text += f", drift = {record.drift:.3e}, terminal margin = {record.terminal_margin:.3e}"
    return text


def run(spec: "ProblemSpec", backend: Optional[ConicBackend] = None) -> ScpOutcome:
    """
    Solve one output-feedback covariance steering problem.

    Iteration 0 is the relaxed solve. Iterate i >= 1 uses the eigenvectors of
    iterate i - 1, the current multipliers and the weight w0 * beta^(i-1);
    after the solve, lambda <- lambda + w e and w <- beta w.

    The loop stops at the first iterate where max_k e_k < eps_rank and
    |dJ| < eps_obj hold and, in addition, the relaxation gap is within
    ``scp.gap_factor`` * eps_rank * (1 + ||S_aug||_F) at every stage, the
    re-propagated covariances stay within ``scp.consistency_tol`` of the
    subproblem's and the re-propagated terminal covariance is below Pf up to
    ``scp.terminal_tol``. Otherwise it keeps iterating with a larger weight.
    """
    params = spec.scp
    nx, nu = spec.dims.nx, spec.dims.nu
    scp_config = getattr(config, "scp", {})
    w_max = scp_config.get("w_max", 1e8)
    gap_scale = scp_config.get("gap_factor", 10.0) * params.eps_rank
    consistency_tol = scp_config.get("consistency_tol", 1e-6)
    terminal_tol = scp_config.get("terminal_tol", 1e-7)
    started = time.perf_counter()

    schedule = design_filter(spec)
    trace = ConvergenceTrace()

    solution = solve(assemble_relaxed(spec, schedule), backend)
    if not solution.ok:
        raise _fail(trace, solution, 0)
    rank_data = extract_rank_data(solution, nx, nu)
    e_vals = np.array([rd.e for rd in rank_data])
    _record(trace, 0, solution, e_vals, NAN, 0.0, started, gap_scale)

    state = IrmState(
        iteration=0,
        eigvecs=[rd.V for rd in rank_data],
        e_vals=e_vals,
        lambdas=initialize_multipliers(spec.N),
        weight=params.w0,
        J_prev=solution.objective,
    )

    while True:
        state.iteration += 1
        if state.iteration > params.max_iters:
            raise NoConvergence(
                f"no convergence within {params.max_iters} iterations ({_describe(trace.records[-1])})",
                trace=trace,
            )
        if state.weight > w_max:
            raise NoConvergence(
                f"penalty weight {state.weight:.3e} exceeded the cap {w_max:.1e} ({_describe(trace.records[-1])})",
                trace=trace,
            )

        program = assemble_irm_iterate(
            spec,
            schedule,
            state.eigvecs,
            state.lambdas,
            state.weight,
            previous_e=state.e_vals if params.hard_decrease else None,
        )
        solution = solve(program, backend)
        if not solution.ok:
            raise _fail(trace, solution, state.iteration)

        rank_data = extract_rank_data(solution, nx, nu)
        e_vals = np.array([rd.e for rd in rank_data])
        record = _record(trace, state.iteration, solution, e_vals, state.J_prev, state.weight, started, gap_scale)

        state.lambdas = state.lambdas + state.weight * e_vals
        state.weight = state.weight * params.beta
        state.eigvecs = [rd.V for rd in rank_data]
        state.e_vals = e_vals
        state.J_prev = solution.objective

        if not (record.max_e < params.eps_rank and record.delta_J < params.eps_obj):
            continue

        check = check_recovered_policy(spec, schedule, solution)
        trace.records[-1] = replace(record, drift=check.drift, terminal_margin=check.terminal_margin)
        if record.gap_ratio <= 1.0 and check.drift <= consistency_tol and check.terminal_margin >= -terminal_tol:
            break
        log.info(
            f"iter {state.iteration:3d}  rank settled but the recovered policy is off "
            f"(gap ratio = {record.gap_ratio:.2f}, drift = {check.drift:.3e}, "
            f"terminal margin = {check.terminal_margin:.3e}), continuing"
        )

    trace.converged = True
    log.info(
        f"Converged after {trace.iterations} rank-minimization iterations "
        f"in {time.perf_counter() - started:.1f}s, J = {solution.objective:.6f}"
    )
    return ScpOutcome(policy=check.policy, moments=check.moments, trace=trace, solution=solution, schedule=schedule)
