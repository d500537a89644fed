"""
===============================================
Convex Subproblem Assembly
===============================================

Builds one convex subproblem of the sequential loop as a conic program:
- the relaxed problem, in which the bilinear products K Phat, K Phat K^T,
  K Sigma and Sigma^T Phat^-1 Sigma are replaced by U, Y, S, Z and tied
  together only by the Schur-complement LMI
- an iterative-rank-minimization iterate, which adds a rank surrogate e_k
  per stage, the eigenvector-projection constraint and the augmented
  Lagrangian penalty

Programs are expressed with cvxpy and handed to a pluggable backend; the
default backend dispatches to one of cvxpy's conic solvers.
"""

import enum
import io
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import cvxpy as cp
import numpy as np

from covsteer import config
from covsteer.errors import DimensionError, PreconditionError
from covsteer.modules.augmented import control_update_expanded, filter_update, propagation_matrices
from covsteer.modules.linalg import check_invertible, schur_residual, spd_solve, symmetrize
from covsteer.modules.model import Policy

if TYPE_CHECKING:
    from covsteer.modules.filter import FilterSchedule
    from covsteer.modules.model import ProblemSpec

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    NUMERICAL_TROUBLE = "numerical_trouble"


class ProgramKind(str, enum.Enum):
    RELAXED = "relaxed"
    IRM = "irm"


@dataclass(frozen=True)
class StageVars:
    """Decoded values of one stage's decision variables."""

    Paug_minus: np.ndarray
    Paug: np.ndarray
    U: np.ndarray
    Y: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    ubar: np.ndarray
    mu: np.ndarray
    e: Optional[float] = None

    @property
    def nx(self) -> int:
        return self.Paug.shape[0] // 2

    @property
    def Phat(self) -> np.ndarray:
        return self.Paug[self.nx :, self.nx :]

    @property
    def Sigma(self) -> np.ndarray:
        return self.Paug[self.nx :, : self.nx]

    @property
    def U_aug(self) -> np.ndarray:
        return np.vstack([self.U, self.Sigma.T])

    @property
    def S_aug(self) -> np.ndarray:
        return symmetrize(np.block([[self.Y, self.S], [self.S.T, self.Z]]))

    @property
    def M(self) -> np.ndarray:
        """[[Phat, U_aug^T], [U_aug, S_aug]], of size 2nx + nu."""
        U_aug = self.U_aug
        return symmetrize(np.block([[self.Phat, U_aug.T], [U_aug, self.S_aug]]))


@dataclass(frozen=True)
class SubproblemSolution:
    stages: Tuple[StageVars, ...]
    objective: float
    status: Status
    kind: ProgramKind = ProgramKind.RELAXED
    solve_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass
class TaggedConstraint:
    kind: str  # eq, ineq, psd or soc
    name: str
    constraint: cp.Constraint


@dataclass
class ConicProgram:
    """
    Backend-neutral container: named variables, tagged constraints and the
    objective split into J and the rank penalty.
    """

    kind: ProgramKind
    N: int
    nx: int
    nu: int
    variables: Dict[str, cp.Variable]
    constraints: List[TaggedConstraint]
    objective_J: cp.Expression
    eps_cross: float
    penalty: Optional[cp.Expression] = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _problem: Optional[cp.Problem] = field(default=None, repr=False)

    def var(self, name: str, k: Optional[int] = None) -> cp.Variable:
        return self.variables[name if k is None else f"{name}[{k}]"]

    def objective(self) -> cp.Expression:
        return self.objective_J if self.penalty is None else self.objective_J + self.penalty

    def count(self, kind: Optional[str] = None, prefix: str = "") -> int:
        return sum(1 for c in self.constraints if (kind is None or c.kind == kind) and c.name.startswith(prefix))

    def problem(self) -> cp.Problem:
        if self._problem is None:
            self._problem = cp.Problem(cp.Minimize(self.objective()), [c.constraint for c in self.constraints])
        return self._problem


def _sym_eq(lhs, rhs) -> cp.Constraint:
    """Equality of two symmetric-matrix expressions, imposed on the upper triangle only."""
    d = lhs - rhs
    n = d.shape[0]
    if n == 1:
        return d == 0
    # upper_tri returns a column, flatten it to stack with the diagonal
    off_diag = cp.reshape(cp.upper_tri(d), (n * (n - 1) // 2,), order="F")
    return cp.hstack([cp.diag(d), off_diag]) == 0


def _psd(expr) -> cp.Constraint:
    return 0.5 * (expr + expr.T) >> 0


def _lmi_matrix(Paug, U, Y, S, Z, nx: int):
    Phat = Paug[nx:, nx:]
    Sigma = Paug[nx:, :nx]
    return cp.bmat([[Phat, U.T, Sigma], [U, Y, S], [Sigma.T, S.T, Z]])


class _Builder:
    def __init__(self, kind: ProgramKind, spec: "ProblemSpec"):
        self.kind = kind
        self.spec = spec
        self.variables: Dict[str, cp.Variable] = {}
        self.constraints: List[TaggedConstraint] = []

    def variable(self, name: str, shape, **kwargs) -> cp.Variable:
        v = cp.Variable(shape, name=name, **kwargs)
        self.variables[name] = v
        return v

    def add(self, kind: str, name: str, constraint: cp.Constraint) -> None:
        self.constraints.append(TaggedConstraint(kind, name, constraint))


def _assemble_core(
    spec: "ProblemSpec", schedule: "FilterSchedule", kind: ProgramKind
) -> Tuple[_Builder, cp.Expression]:
    N = spec.N
    nx, nu = spec.dims.nx, spec.dims.nu
    if len(schedule.stages) != N:
        raise DimensionError(f"filter schedule has {len(schedule.stages)} stages, expected {N}")

    b = _Builder(kind, spec)
    Pm, Pp, U, Y, S, Z, ubar, mu, t_u = ([] for _ in range(9))
    for k in range(N):
        Pm.append(b.variable(f"Paug_minus[{k}]", (2 * nx, 2 * nx), PSD=True))
        Pp.append(b.variable(f"Paug[{k}]", (2 * nx, 2 * nx), PSD=True))
        U.append(b.variable(f"U[{k}]", (nu, nx)))
        Y.append(b.variable(f"Y[{k}]", (nu, nu), PSD=True))
        S.append(b.variable(f"S[{k}]", (nu, nx)))
        Z.append(b.variable(f"Z[{k}]", (nx, nx), PSD=True))
        ubar.append(b.variable(f"ubar[{k}]", (nu,)))
        mu.append(b.variable(f"mu[{k}]", (nx,)))
        t_u.append(b.variable(f"t_u[{k}]", ()))

    bc = spec.boundary
    b.add("eq", "initial_mean", mu[0] == bc.mu0)
    b.add("eq", "initial_cov", _sym_eq(Pm[0], bc.Paug0))
    b.add("eq", "terminal_mean", mu[N - 1] == bc.muf)

    for k, stage in enumerate(spec.stages):
        mats = propagation_matrices(stage, schedule.stages[k].L)
        b.add("eq", f"filter_update[{k}]", _sym_eq(Pp[k], filter_update(Pm[k], mats)))
        if k < N - 1:
            b.add("eq", f"mean_dynamics[{k}]", mu[k + 1] == stage.A @ mu[k] + stage.B @ ubar[k])
            rhs = control_update_expanded(Pp[k], mats, U[k], Y[k], S[k], block=cp.bmat)
            b.add("eq", f"control_update[{k}]", _sym_eq(Pm[k + 1], rhs))
        b.add("psd", f"lmi[{k}]", _psd(_lmi_matrix(Pp[k], U[k], Y[k], S[k], Z[k], nx)))
        b.add("soc", f"ubar_norm[{k}]", cp.SOC(t_u[k], ubar[k]))

    b.add("psd", "terminal_cov", _psd(bc.Pf - Pp[N - 1][:nx, :nx]))

    eps = spec.scp.eps_cross
    J = sum(t_u) + sum(cp.trace(y) for y in Y) + eps * sum(cp.trace(z) for z in Z)
    return b, J


def assemble_relaxed(spec: "ProblemSpec", schedule: "FilterSchedule") -> ConicProgram:
    """The convex relaxation, with the rank condition on M_k dropped."""
    b, J = _assemble_core(spec, schedule, ProgramKind.RELAXED)
    return ConicProgram(
        kind=ProgramKind.RELAXED,
        N=spec.N,
        nx=spec.dims.nx,
        nu=spec.dims.nu,
        variables=b.variables,
        constraints=b.constraints,
        objective_J=J,
        eps_cross=spec.scp.eps_cross,
    )


def assemble_irm_iterate(
    spec: "ProblemSpec",
    schedule: "FilterSchedule",
    eigvecs: Sequence[np.ndarray],
    multipliers: Sequence[float],
    weight: float,
    previous_e: Optional[Sequence[float]] = None,
) -> ConicProgram:
    """
    The relaxed program plus, per stage, a surrogate e_k bounding the
    projected spectrum ``e_k I - V_k^T M_k V_k >= 0`` and the penalty
    ``lambda_k e_k + (w/2) e_k^2`` (the square through a rotated-cone epigraph).

    ``previous_e`` adds the hard decrease constraint e_k <= e_k^(i-1) when
    the problem enables it.
    """
    N = spec.N
    nx, nu = spec.dims.nx, spec.dims.nu
    m = 2 * nx + nu
    r = m - nx
    if len(eigvecs) != N or len(multipliers) != N:
        raise PreconditionError(f"need {N} eigenvector blocks and multipliers, got {len(eigvecs)}/{len(multipliers)}")
    for k, V in enumerate(eigvecs):
        if np.shape(V) != (m, r):
            raise PreconditionError(f"stage {k}: V must have shape {(m, r)}, got {np.shape(V)}")
    if weight < 0:
        raise PreconditionError(f"penalty weight must be non-negative, got {weight}")

    b, J = _assemble_core(spec, schedule, ProgramKind.IRM)
    e = b.variable("e", (N,))
    t_e = b.variable("t_e", (N,))
    for k in range(N):
        M = _lmi_matrix(
            b.variables[f"Paug[{k}]"],
            b.variables[f"U[{k}]"],
            b.variables[f"Y[{k}]"],
            b.variables[f"S[{k}]"],
            b.variables[f"Z[{k}]"],
            nx,
        )
        V = np.asarray(eigvecs[k], dtype=float)
        b.add("psd", f"rank_projection[{k}]", _psd(e[k] * np.eye(r) - V.T @ M @ V))
        # e^2 <= t  <=>  ||(2e, t - 1)|| <= t + 1
        b.add("soc", f"penalty_epigraph[{k}]", cp.SOC(t_e[k] + 1, cp.hstack([2 * e[k : k + 1], t_e[k : k + 1] - 1])))

    if previous_e is not None and spec.scp.hard_decrease:
        for k in range(N):
            b.add("ineq", f"hard_decrease[{k}]", e[k] <= float(previous_e[k]))

    lam = np.asarray(multipliers, dtype=float)
    penalty = lam @ e + 0.5 * weight * cp.sum(t_e)
    return ConicProgram(
        kind=ProgramKind.IRM,
        N=N,
        nx=nx,
        nu=nu,
        variables=b.variables,
        constraints=b.constraints,
        objective_J=J,
        eps_cross=spec.scp.eps_cross,
        penalty=penalty,
    )


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class BackendResult(NamedTuple):
    status: Status
    raw_status: str
    values: Dict[str, np.ndarray]
    solve_time: float


class ConicBackend(Protocol):
    """Accepts a ConicProgram, returns primal values and a status."""

    name: str

    def solve(self, program: ConicProgram) -> BackendResult: ...


class CvxpyBackend:
    """Default backend: hands the program to one of cvxpy's conic solvers."""

    def __init__(
        self,
        solver: Optional[str] = None,
        fallback_solver: Optional[str] = None,
        accept_inaccurate: Optional[bool] = None,
        verbose: Optional[bool] = None,
        solver_options: Optional[Dict] = None,
    ):
        sdp_config = getattr(config, "sdp", {})
        self.solver = solver or sdp_config.get("solver", "CLARABEL")
        self.fallback_solver = fallback_solver if fallback_solver is not None else sdp_config.get("fallback_solver")
        self.accept_inaccurate = (
            accept_inaccurate if accept_inaccurate is not None else sdp_config.get("accept_inaccurate", True)
        )
        self.verbose = verbose if verbose is not None else sdp_config.get("verbose", False)
        # Keyed by solver name, e.g. {"CLARABEL": {"tol_gap_abs": 1e-10}}
        options = solver_options if solver_options is not None else sdp_config.get("solver_options", {})
        self.solver_options = {name: dict(opts or {}) for name, opts in (options or {}).items()}

    @property
    def name(self) -> str:
        return f"cvxpy:{self.solver}"

    def options_for(self, solver: str) -> Dict:
        return dict(self.solver_options.get(solver, {}))

    def _pick_solver(self) -> str:
        installed = cp.installed_solvers()
        if self.solver in installed:
            return self.solver
        if self.fallback_solver in installed:
            log.warning(f"Solver {self.solver} is not installed, using {self.fallback_solver}")
            return self.fallback_solver
        raise PreconditionError(f"Neither {self.solver} nor {self.fallback_solver} is installed ({installed})")

    def _map_status(self, raw: str) -> Status:
        if raw == cp.OPTIMAL:
            return Status.OPTIMAL
        if raw == cp.OPTIMAL_INACCURATE:
            if self.accept_inaccurate:
                log.warning("Backend returned an inaccurate optimum; accepting it")
                return Status.OPTIMAL
            return Status.NUMERICAL_TROUBLE
        if raw in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return Status.INFEASIBLE
        return Status.NUMERICAL_TROUBLE

    def solve(self, program: ConicProgram) -> BackendResult:
        problem = program.problem()
        solver = self._pick_solver()
        start = time.perf_counter()
        try:
            problem.solve(solver=solver, verbose=self.verbose, **self.options_for(solver))
        except cp.error.SolverError as e:
            if not self.fallback_solver or self.fallback_solver == solver:
                log.warning(f"Solver {solver} failed: {e}")
                return BackendResult(Status.NUMERICAL_TROUBLE, "solver_error", {}, time.perf_counter() - start)
            log.warning(f"Solver {solver} failed ({e}); retrying with {self.fallback_solver}")
            try:
                problem.solve(
                    solver=self.fallback_solver, verbose=self.verbose, **self.options_for(self.fallback_solver)
                )
            except cp.error.SolverError as e2:
                log.warning(f"Fallback solver {self.fallback_solver} failed: {e2}")
                return BackendResult(Status.NUMERICAL_TROUBLE, "solver_error", {}, time.perf_counter() - start)
        elapsed = time.perf_counter() - start

        raw = str(problem.status)
        status = self._map_status(raw)
        values = {}
        if status is Status.OPTIMAL:
            values = {name: np.asarray(v.value, dtype=float) for name, v in program.variables.items()}
        return BackendResult(status, raw, values, elapsed)


def default_backend() -> ConicBackend:
    return CvxpyBackend()


def _objective_J(stages: Sequence[StageVars], eps: float) -> float:
    return float(
        sum(np.linalg.norm(s.ubar) for s in stages)
        + sum(np.trace(s.Y) for s in stages)
        + eps * sum(np.trace(s.Z) for s in stages)
    )


def solve(program: ConicProgram, backend: Optional[ConicBackend] = None) -> SubproblemSolution:
    """
    Solve a program and decode the per-stage variables.

    Non-optimal statuses come back with no stages and a NaN objective.
    """
    backend = backend or default_backend()
    with program.lock:
        result = backend.solve(program)

    if result.status is not Status.OPTIMAL:
        log.warning(f"{program.kind.value} subproblem ended with status {result.raw_status}")
        return SubproblemSolution((), float("nan"), result.status, program.kind, result.solve_time)

    vals = result.values
    e = vals.get("e")
    stages = []
    for k in range(program.N):
        stages.append(
            StageVars(
                Paug_minus=symmetrize(vals[f"Paug_minus[{k}]"]),
                Paug=symmetrize(vals[f"Paug[{k}]"]),
                U=vals[f"U[{k}]"].reshape(program.nu, program.nx),
                Y=symmetrize(vals[f"Y[{k}]"].reshape(program.nu, program.nu)),
                S=vals[f"S[{k}]"].reshape(program.nu, program.nx),
                Z=symmetrize(vals[f"Z[{k}]"]),
                ubar=vals[f"ubar[{k}]"].reshape(program.nu),
                mu=vals[f"mu[{k}]"].reshape(program.nx),
                e=None if e is None else float(e[k]),
            )
        )

    J = _objective_J(stages, program.eps_cross)
    log.debug(f"{program.kind.value} subproblem solved in {result.solve_time:.2f}s, J = {J:.6f}")
    return SubproblemSolution(tuple(stages), J, Status.OPTIMAL, program.kind, result.solve_time)


def recover_gains(solution: SubproblemSolution) -> Policy:
    """K_k = U_k Phat_k^{-1}; feedforward copied through."""
    if not solution.ok:
        raise PreconditionError(f"cannot recover gains from a {solution.status.value} solution")
    K = []
    for k, s in enumerate(solution.stages):
        Phat = check_invertible(s.Phat, name="Phat", stage=k)
        K.append(spd_solve(Phat, s.U.T, name="Phat", stage=k).T)
    return Policy(ubar=np.stack([s.ubar for s in solution.stages]), K=np.stack(K))


def relaxation_gap(solution: SubproblemSolution) -> np.ndarray:
    """Per-stage ||S_aug - U_aug Phat^{-1} U_aug^T||_F."""
    if not solution.ok:
        raise PreconditionError(f"no relaxation gap for a {solution.status.value} solution")
    return np.array(
        [np.linalg.norm(schur_residual(s.Phat, s.U_aug, s.S_aug, stage=k)) for k, s in enumerate(solution.stages)]
    )


def dump_program(program: ConicProgram, stream: Optional[io.TextIOBase] = None) -> str:
    """
    Text form of a program: header, variable list with shapes and attributes,
    objective, then one line per constraint with kind, name and expression.
    """
    out = io.StringIO()
    out.write(f"# covsteer conic program: kind={program.kind.value} N={program.N} nx={program.nx} nu={program.nu}\n")
    out.write("[variables]\n")
    for name, v in program.variables.items():
        attrs = [a for a in ("PSD", "symmetric") if v.attributes.get(a)]
        out.write(f"{name}\t{v.shape}\t{','.join(attrs) or '-'}\n")
    out.write("[objective]\n")
    out.write(f"minimize\t{program.objective()}\n")
    out.write("[constraints]\n")
    for c in program.constraints:
        out.write(f"{c.kind}\t{c.name}\t{c.constraint}\n")
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text
