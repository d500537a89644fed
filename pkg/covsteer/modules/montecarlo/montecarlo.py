"""
===============================================
Monte Carlo Validation
===============================================

Closed-loop simulation of the true state, the filter and the policy over an
ensemble of trials, compared against the predicted augmented moments:
- initial-condition sampling for each way the initial statistics are given
- single-trial and batched simulation
- ensemble statistics with per-stage discrepancy metrics
- an acceptance check against configurable tolerances

Each trial draws from its own counter-based stream keyed on (seed, trial), so
results do not depend on chunking or on the number of worker threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from covsteer import config
from covsteer.errors import DimensionError, PreconditionError, ToleranceExceeded
from covsteer.modules.augmented import propagate_moments
from covsteer.modules.linalg import min_eig, psd_factor
from covsteer.modules.model import InitMode

if TYPE_CHECKING:
    from covsteer.modules.filter import FilterSchedule
    from covsteer.modules.model import BoundaryConditions, Policy, ProblemSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrialState:
    """One closed-loop trajectory with the noise that produced it."""

    x: np.ndarray  # (N, nx) true state at each measurement
    xhat_minus: np.ndarray  # (N, nx)
    xhat: np.ndarray  # (N, nx)
    u: np.ndarray  # (N - 1, nu)
    v: np.ndarray  # (N, ny)
    w: np.ndarray  # (N - 1, nw)

    @property
    def N(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class MCReport:
    n_trials: int
    seed: int
    mode: InitMode
    emp_mean: np.ndarray
    emp_aug_cov: np.ndarray
    pred_mean: np.ndarray
    pred_aug_cov: np.ndarray
    mean_error: np.ndarray
    truth_cov_error: np.ndarray
    aug_cov_error: np.ndarray
    emp_control_mean: np.ndarray
    terminal_satisfied: bool
    trials: Tuple[TrialState, ...] = field(default=(), repr=False)

    @property
    def N(self) -> int:
        return self.emp_mean.shape[0]

    @property
    def emp_truth_cov(self) -> np.ndarray:
        nx = self.emp_mean.shape[1]
        return self.emp_aug_cov[:, :nx, :nx]

    def check(
        self,
        tolerance: Optional[float] = None,
        mean_tolerance: Optional[float] = None,
        stages: Optional[Sequence[int]] = None,
    ) -> None:
        """Raise ToleranceExceeded when a checked stage is outside the acceptance band."""
        mc_config = getattr(config, "montecarlo", {})
        tolerance = mc_config.get("tolerance", 0.05) if tolerance is None else tolerance
        mean_tolerance = mc_config.get("mean_tolerance", 0.05) if mean_tolerance is None else mean_tolerance
        if stages is None:
            stages = mc_config.get("check_stages", [0, 5, 10, 15, 19])
        stages = [k for k in stages if 0 <= k < self.N] or [self.N - 1]

        failures = []
        for k in stages:
            if self.truth_cov_error[k] > tolerance:
                failures.append(f"stage {k}: truth covariance error {self.truth_cov_error[k]:.3%} > {tolerance:.1%}")
            if self.mean_error[k] > mean_tolerance:
                failures.append(f"stage {k}: mean error {self.mean_error[k]:.3e} > {mean_tolerance:.1e}")
        if failures:
            raise ToleranceExceeded("; ".join(failures))
        log.info(f"Monte Carlo statistics agree with the prediction at stages {stages}")

    def as_dict(self) -> Dict:
        return {
            "n_trials": self.n_trials,
            "seed": self.seed,
            "mode": self.mode.value,
            "emp_mean": self.emp_mean.tolist(),
            "emp_aug_cov": self.emp_aug_cov.tolist(),
            "mean_error": self.mean_error.tolist(),
            "truth_cov_error": self.truth_cov_error.tolist(),
            "aug_cov_error": self.aug_cov_error.tolist(),
            "emp_control_mean": self.emp_control_mean.tolist(),
            "terminal_satisfied": self.terminal_satisfied,
        }


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, trial])))


def _rel_fro(emp: np.ndarray, pred: np.ndarray) -> float:
    denom = np.linalg.norm(pred)
    return float(np.linalg.norm(emp - pred) / denom) if denom > 0 else float(np.linalg.norm(emp))


def sample_initial(mode: Union[InitMode, str], boundary: "BoundaryConditions", rng: np.random.Generator):
    """
    Draw (x0, xhat0^-).

    case1 draws the estimate and adds an independent error, case2 draws the
    true state and adds the error to it, explicit draws both jointly from the
    augmented covariance.
    """
    mode = InitMode(mode)
    init = boundary.init
    mu0 = np.asarray(boundary.mu0)
    nx = mu0.shape[0]

    if mode is InitMode.EXPLICIT:
        F = psd_factor(boundary.Paug0)
        z = F @ rng.standard_normal(2 * nx)
        return mu0 + z[:nx], mu0 + z[nx:]

    z = rng.standard_normal(2 * nx)
    err = psd_factor(init.Ptilde0) @ z[nx:]
    if mode is InitMode.CASE1:
        if init.Phat0 is None:
            raise PreconditionError("case1 sampling needs the a priori estimate covariance Phat0")
        xhat = mu0 + psd_factor(init.Phat0) @ z[:nx]
        return xhat + err, xhat
    if init.P0 is None:
        raise PreconditionError("case2 sampling needs the true initial covariance P0")
    x = mu0 + psd_factor(init.P0) @ z[:nx]
    return x, x + err


class _Factors:
    """Measurement-noise square roots per stage, computed once per ensemble."""

    def __init__(self, spec: "ProblemSpec"):
        self.R = [psd_factor(stage.R) for stage in spec.stages]


def _mean_trajectory(spec: "ProblemSpec", policy: "Policy") -> np.ndarray:
    mu = [np.asarray(spec.boundary.mu0, dtype=float)]
    for k in range(spec.N - 1):
        stage = spec.stages[k]
        mu.append(stage.A @ mu[-1] + stage.B @ policy.ubar[k])
    return np.stack(mu)


def _check_lengths(spec: "ProblemSpec", schedule: "FilterSchedule", policy: "Policy") -> None:
    if len(schedule.stages) < spec.N or policy.N < spec.N:
        raise DimensionError(f"schedule ({len(schedule.stages)}) and policy ({policy.N}) must cover N = {spec.N}")


def _simulate_batch(spec, schedule, policy, mu, x0, xhat0, v, w) -> Tuple[np.ndarray, ...]:
    """
    Closed loop for T trials at once. ``v`` is (T, N, ny) measurement noise,
    ``w`` is (T, N - 1, nw) standard process noise.
    """
    N = spec.N
    x, xhat_minus = x0, xhat0
    xs, xms, xhs, us = [], [], [], []
    for k in range(N):
        stage = spec.stages[k]
        L = schedule.stages[k].L
        y = x @ stage.H.T + v[:, k]
        xhat = xhat_minus + (y - xhat_minus @ stage.H.T) @ L.T
        xs.append(x)
        xms.append(xhat_minus)
        xhs.append(xhat)
        if k < N - 1:
            u = policy.ubar[k] + (xhat - mu[k]) @ policy.K[k].T
            us.append(u)
            x = x @ stage.A.T + u @ stage.B.T + w[:, k] @ stage.G.T
            xhat_minus = xhat @ stage.A.T + u @ stage.B.T
    return (
        np.stack(xs, axis=1),
        np.stack(xms, axis=1),
        np.stack(xhs, axis=1),
        np.stack(us, axis=1),
    )


def _draw_noise(spec: "ProblemSpec", factors: _Factors, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    ny, nw = spec.dims.ny, spec.dims.nw
    zv = rng.standard_normal((spec.N, ny))
    v = np.stack([factors.R[k] @ zv[k] for k in range(spec.N)])
    w = rng.standard_normal((spec.N - 1, nw))
    return v, w


def simulate_trial(
    spec: "ProblemSpec",
    schedule: "FilterSchedule",
    policy: "Policy",
    init: Tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
) -> TrialState:
    """
    One closed-loop run: measure, update the estimate, apply
    u_k = ubar_k + K_k (xhat_k - mu_k), propagate; the last stage is
    measured and updated without a control.
    """
    _check_lengths(spec, schedule, policy)
    v, w = _draw_noise(spec, _Factors(spec), rng)
    x0, xhat0 = (np.asarray(a, dtype=float)[None] for a in init)
    x, xm, xh, u = _simulate_batch(spec, schedule, policy, _mean_trajectory(spec, policy), x0, xhat0, v[None], w[None])
    return TrialState(x=x[0], xhat_minus=xm[0], xhat=xh[0], u=u[0], v=v, w=w)


def _run_chunk(spec, schedule, policy, mu, mode, factors, seed, trials: range):
    x0, xhat0, vs, ws = [], [], [], []
    for trial in trials:
        rng = trial_rng(seed, trial)
        a, b = sample_initial(mode, spec.boundary, rng)
        v, w = _draw_noise(spec, factors, rng)
        x0.append(a)
        xhat0.append(b)
        vs.append(v)
        ws.append(w)
    vs, ws = np.stack(vs), np.stack(ws)
    x, xm, xh, u = _simulate_batch(spec, schedule, policy, mu, np.stack(x0), np.stack(xhat0), vs, ws)
    return x, xm, xh, u, vs, ws


def run_ensemble(
    spec: "ProblemSpec",
    schedule: "FilterSchedule",
    policy: "Policy",
    n_trials: int,
    seed: int = 0,
    mode: Optional[Union[InitMode, str]] = None,
    keep_trials: int = 0,
    workers: Optional[int] = None,
) -> MCReport:
    """
    Simulate ``n_trials`` closed-loop runs and compare the a posteriori
    ensemble statistics of [x; xhat] with the predicted moments.
    """
    if n_trials < 2:
        raise PreconditionError(f"need at least 2 trials, got {n_trials}")
    _check_lengths(spec, schedule, policy)
    mode = spec.boundary.init.mode if mode is None else InitMode(mode)
    mc_config = getattr(config, "montecarlo", {})
    workers = mc_config.get("workers", 1) if workers is None else workers
    chunk_size = max(1, int(mc_config.get("chunk_size", 1000)))

    mu = _mean_trajectory(spec, policy)
    factors = _Factors(spec)
    chunks = [range(i, min(i + chunk_size, n_trials)) for i in range(0, n_trials, chunk_size)]

    def job(trials):
        return _run_chunk(spec, schedule, policy, mu, mode, factors, seed, trials)

    if workers and workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, chunks))
    else:
        results = [job(c) for c in chunks]

    # stacked by trial index whatever the chunking
    x, xm, xh, u, vs, ws = (np.concatenate(parts) for parts in zip(*results))

    aug = np.concatenate([x, xh], axis=2)  # (T, N, 2nx)
    emp_mean = x.mean(axis=0)
    centered = aug - aug.mean(axis=0)
    emp_aug_cov = np.einsum("tki,tkj->kij", centered, centered) / (n_trials - 1)
    emp_aug_cov = 0.5 * (emp_aug_cov + emp_aug_cov.transpose(0, 2, 1))

    moments = propagate_moments(spec, schedule, policy)
    pred_mean = np.stack([m.posterior.mu for m in moments])
    pred_aug_cov = np.stack([m.posterior.Paug for m in moments])
    nx = spec.dims.nx

    mean_error = np.linalg.norm(emp_mean - pred_mean, axis=1)
    truth_cov_error = np.array([_rel_fro(e[:nx, :nx], p[:nx, :nx]) for e, p in zip(emp_aug_cov, pred_aug_cov)])
    aug_cov_error = np.array([_rel_fro(e, p) for e, p in zip(emp_aug_cov, pred_aug_cov)])

    tol = mc_config.get("tolerance", 0.05)
    Pf = np.asarray(spec.boundary.Pf)
    terminal_satisfied = bool(min_eig((1 + tol) * Pf - emp_aug_cov[-1][:nx, :nx]) >= 0)

    kept = tuple(
        TrialState(x=x[t], xhat_minus=xm[t], xhat=xh[t], u=u[t], v=vs[t], w=ws[t])
        for t in range(min(keep_trials, n_trials))
    )
    report = MCReport(
        n_trials=n_trials,
        seed=seed,
        mode=mode,
        emp_mean=emp_mean,
        emp_aug_cov=emp_aug_cov,
        pred_mean=pred_mean,
        pred_aug_cov=pred_aug_cov,
        mean_error=mean_error,
        truth_cov_error=truth_cov_error,
        aug_cov_error=aug_cov_error,
        emp_control_mean=u.mean(axis=0),
        terminal_satisfied=terminal_satisfied,
        trials=kept,
    )
    log.info(
        f"Monte Carlo: {n_trials} trials (seed {seed}, {mode.value} sampling); "
        f"terminal truth covariance error {truth_cov_error[-1]:.2%}, mean error {mean_error[-1]:.2e}"
    )
    return report


def reference_errors(report: MCReport, truth_covs: Sequence[np.ndarray]) -> np.ndarray:
    """Per-stage relative Frobenius error of the empirical truth covariance against another prediction."""
    if len(truth_covs) != report.N:
        raise DimensionError(f"expected {report.N} reference covariances, got {len(truth_covs)}")
    return np.array([_rel_fro(e, np.asarray(p)) for e, p in zip(report.emp_truth_cov, truth_covs)])


def trial_rows(report: MCReport) -> List[Dict]:
    """Flatten the kept trials into one row per (trial, stage)."""
    rows = []
    for t, trial in enumerate(report.trials):
        for k in range(trial.N):
            row = {"trial": t, "k": k}
            row.update({f"x_{i}": float(val) for i, val in enumerate(trial.x[k])})
            row.update({f"xhat_{i}": float(val) for i, val in enumerate(trial.xhat[k])})
            if k < trial.N - 1:
                row.update({f"u_{i}": float(val) for i, val in enumerate(trial.u[k])})
            else:
                row.update({f"u_{i}": None for i in range(trial.u.shape[1])})
            rows.append(row)
    return rows
