"""
Tests for the sdp module.
"""

import io

import numpy as np
import pytest

from covsteer.errors import PreconditionError, SingularityError
from covsteer.modules.sdp import BackendResult, ProgramKind, StageVars, Status, SubproblemSolution


def _stage(Paug, U, Y, S, Z, ubar=None):
    nx = np.shape(Paug)[0] // 2
    U = np.atleast_2d(U)
    nu = U.shape[0]
    return StageVars(
        Paug_minus=np.asarray(Paug, dtype=float),
        Paug=np.asarray(Paug, dtype=float),
        U=U,
        Y=np.atleast_2d(Y),
        S=np.atleast_2d(S),
        Z=np.atleast_2d(Z),
        ubar=np.zeros(nu) if ubar is None else np.asarray(ubar, dtype=float),
        mu=np.zeros(nx),
    )


def _solution(*stages, status=Status.OPTIMAL):
    return SubproblemSolution(stages=tuple(stages), objective=0.0, status=status)


class StatusBackend:
    """Backend stub that reports a fixed non-optimal status."""

    name = "stub"

    def __init__(self, status):
        self.status = status
        self.calls = 0

    def solve(self, program):
        self.calls += 1
        return BackendResult(self.status, self.status.value, {}, 0.0)


def test_module_import():
    """Test that the sdp module can be imported."""
    from covsteer.modules.sdp import sdp

    assert hasattr(sdp, "assemble_relaxed")


@pytest.mark.parametrize("n,size", [(1, 1), (2, 3), (3, 6), (8, 36)])
def test_sym_eq_stacks_diagonal_and_upper_triangle(n, size):
    import cvxpy as cp

    from covsteer.modules.sdp.sdp import _sym_eq

    constraint = _sym_eq(cp.Variable((n, n)), np.eye(n))
    assert constraint.size == size


def test_sym_eq_ignores_lower_triangle():
    import cvxpy as cp

    from covsteer.modules.sdp.sdp import _sym_eq

    X = cp.Variable((2, 2))
    target = np.array([[1.0, 2.0], [5.0, 3.0]])
    problem = cp.Problem(cp.Minimize(cp.sum_squares(X[1, 0])), [_sym_eq(X, target)])
    problem.solve(solver="CLARABEL")
    np.testing.assert_allclose(X.value[0], [1.0, 2.0], atol=1e-6)
    np.testing.assert_allclose(X.value[1, 1], 3.0, atol=1e-6)
    assert abs(X.value[1, 0]) < 1e-6


def test_relaxed_constraint_counts_case1():
    """Every stage gets a filter update and an LMI; the control update links consecutive stages."""
    from covsteer.modules.filter import design_filter
    from covsteer.modules.model import builtin_double_integrator
    from covsteer.modules.sdp import assemble_relaxed

    spec = builtin_double_integrator("case1")
    program = assemble_relaxed(spec, design_filter(spec))
    N = spec.N
    assert program.kind is ProgramKind.RELAXED
    assert program.count("eq", "filter_update") == N
    assert program.count("eq", "control_update") == N - 1
    assert program.count("eq", "mean_dynamics") == N - 1
    assert program.count("psd", "lmi") == N
    assert program.count("soc", "ubar_norm") == N
    assert program.count("psd", "terminal_cov") == 1
    assert program.penalty is None

    psd_vars = [v for v in program.variables.values() if v.attributes.get("PSD")]
    assert len(psd_vars) == 4 * N
    assert program.var("Paug", 0).shape == (8, 8)
    assert program.var("U", N - 1).shape == (2, 4)


def test_relaxed_scalar_program_enumerated(scalar_spec):
    """N = 3, nx = nu = 1: every constraint listed by hand."""
    from covsteer.modules.filter import design_filter
    from covsteer.modules.sdp import assemble_relaxed

    program = assemble_relaxed(scalar_spec, design_filter(scalar_spec))
    names = [c.name for c in program.constraints]
    assert names == [
        "initial_mean",
        "initial_cov",
        "terminal_mean",
        "filter_update[0]",
        "mean_dynamics[0]",
        "control_update[0]",
        "lmi[0]",
        "ubar_norm[0]",
        "filter_update[1]",
        "mean_dynamics[1]",
        "control_update[1]",
        "lmi[1]",
        "ubar_norm[1]",
        "filter_update[2]",
        "lmi[2]",
        "ubar_norm[2]",
        "terminal_cov",
    ]
    assert program.var("Paug_minus", 0).shape == (2, 2)
    assert program.var("Y", 0).shape == (1, 1)


def test_irm_iterate_adds_rank_terms(scalar_spec):
    from covsteer.modules.filter import design_filter
    from covsteer.modules.sdp import assemble_irm_iterate

    schedule = design_filter(scalar_spec)
    V = [np.eye(3)[:, :2]] * 3
    program = assemble_irm_iterate(scalar_spec, schedule, V, np.zeros(3), 1.0)
    assert program.kind is ProgramKind.IRM
    assert program.count("psd", "rank_projection") == 3
    assert program.count("soc", "penalty_epigraph") == 3
    assert program.count(prefix="hard_decrease") == 0
    assert program.var("e").shape == (3,)
    assert program.penalty is not None


def test_irm_iterate_hard_decrease_toggle(scalar_spec_factory):
    from covsteer.modules.filter import design_filter
    from covsteer.modules.sdp import assemble_irm_iterate

    spec = scalar_spec_factory(hard_decrease=True)
    V = [np.eye(3)[:, :2]] * 3
    program = assemble_irm_iterate(spec, design_filter(spec), V, np.zeros(3), 1.0, previous_e=[1.0, 1.0, 1.0])
    assert program.count("ineq", "hard_decrease") == 3


def test_irm_iterate_rejects_bad_eigvecs(scalar_spec):
    from covsteer.modules.filter import design_filter
    from covsteer.modules.sdp import assemble_irm_iterate

    schedule = design_filter(scalar_spec)
    with pytest.raises(PreconditionError):
        assemble_irm_iterate(scalar_spec, schedule, [np.eye(3)[:, :1]] * 3, np.zeros(3), 1.0)
    with pytest.raises(PreconditionError):
        assemble_irm_iterate(scalar_spec, schedule, [np.eye(3)[:, :2]] * 2, np.zeros(3), 1.0)
    with pytest.raises(PreconditionError):
        assemble_irm_iterate(scalar_spec, schedule, [np.eye(3)[:, :2]] * 3, np.zeros(3), -1.0)


def test_dump_program(scalar_spec):
    from covsteer.modules.filter import design_filter
    from covsteer.modules.sdp import assemble_relaxed, dump_program

    program = assemble_relaxed(scalar_spec, design_filter(scalar_spec))
    stream = io.StringIO()
    text = dump_program(program, stream)
    assert stream.getvalue() == text
    assert text.startswith("# covsteer conic program: kind=relaxed N=3 nx=1 nu=1")
    assert "[variables]" in text and "[objective]" in text and "[constraints]" in text
    assert "Paug_minus[0]\t(2, 2)\tPSD" in text
    assert "psd\tlmi[2]\t" in text


def test_solve_surfaces_failure_without_values(scalar_spec):
    from covsteer.modules.filter import design_filter
    from covsteer.modules.sdp import assemble_relaxed, solve

    program = assemble_relaxed(scalar_spec, design_filter(scalar_spec))
    for status in (Status.INFEASIBLE, Status.NUMERICAL_TROUBLE):
        backend = StatusBackend(status)
        solution = solve(program, backend)
        assert solution.status is status
        assert solution.stages == ()
        assert np.isnan(solution.objective)
        assert backend.calls == 1


def test_recover_gains_trivial():
    from covsteer.modules.sdp import recover_gains

    Paug = np.diag([2.0, 2.0, 3.0, 0.5])
    zero = _stage(Paug, np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), ubar=[1.0, -1.0])
    ident = _stage(Paug, np.diag([3.0, 0.5]), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
    policy = recover_gains(_solution(zero, ident))
    np.testing.assert_allclose(policy.K[0], np.zeros((2, 2)))
    np.testing.assert_allclose(policy.K[1], np.eye(2), atol=1e-14)
    np.testing.assert_array_equal(policy.ubar[0], [1.0, -1.0])


def test_recover_gains_errors():
    from covsteer.modules.sdp import recover_gains

    ok = _stage(np.eye(2), [[0.0]], [[0.0]], [[0.0]], [[0.0]])
    singular = _stage(np.diag([1.0, 0.0]), [[0.0]], [[0.0]], [[0.0]], [[0.0]])
    with pytest.raises(SingularityError, match="stage 1"):
        recover_gains(_solution(ok, singular))
    with pytest.raises(PreconditionError):
        recover_gains(_solution(status=Status.INFEASIBLE))


def test_relaxation_gap_zero_stage():
    from covsteer.modules.sdp import relaxation_gap

    stage = _stage(np.eye(4), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
    np.testing.assert_array_equal(relaxation_gap(_solution(stage)), [0.0])


def test_relaxation_gap_detects_slack():
    from covsteer.modules.sdp import relaxation_gap

    tight = _stage([[1.0, 0.5], [0.5, 1.0]], [[0.2]], [[0.04]], [[0.1]], [[0.25]])
    loose = _stage([[1.0, 0.5], [0.5, 1.0]], [[0.2]], [[1.04]], [[0.1]], [[0.25]])
    gaps = relaxation_gap(_solution(tight, loose))
    assert gaps[0] < 1e-14
    np.testing.assert_allclose(gaps[1], 1.0, rtol=1e-12)


def test_lmi_schur_equivalence():
    """For Phat > 0, M is PSD exactly when the Schur residual is."""
    from covsteer.modules.linalg import is_psd, schur_residual

    rng = np.random.default_rng(11)
    for trial in range(100):
        F = rng.standard_normal((2, 2))
        Phat = F @ F.T + 0.5 * np.eye(2)
        Sigma = rng.standard_normal((2, 2))
        Paug = np.block([[np.eye(2) * 10, Sigma.T], [Sigma, Phat]])
        U = rng.standard_normal((1, 2))
        Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        d = rng.uniform(0.1, 1.0, 3)
        if trial % 2:
            d[rng.integers(3)] = -rng.uniform(0.1, 1.0)
        U_aug = np.vstack([U, Sigma.T])
        S_aug = U_aug @ np.linalg.solve(Phat, U_aug.T) + Q @ np.diag(d) @ Q.T
        stage = _stage(Paug, U, S_aug[:1, :1], S_aug[:1, 1:], S_aug[1:, 1:])
        residual = schur_residual(stage.Phat, stage.U_aug, stage.S_aug)
        assert is_psd(stage.M, 1e-9) == is_psd(residual, 1e-9) == (trial % 2 == 0)


def test_cvxpy_backend_reads_config():
    from covsteer import config
    from covsteer.modules.sdp import CvxpyBackend

    config.sdp["solver"] = "SCS"
    config.sdp["accept_inaccurate"] = False
    backend = CvxpyBackend()
    assert backend.solver == "SCS"
    assert backend.name == "cvxpy:SCS"
    assert backend._map_status("optimal_inaccurate") is Status.NUMERICAL_TROUBLE
    assert CvxpyBackend(accept_inaccurate=True)._map_status("optimal_inaccurate") is Status.OPTIMAL
    assert backend._map_status("infeasible") is Status.INFEASIBLE
    assert backend._map_status("unbounded") is Status.NUMERICAL_TROUBLE


def test_cvxpy_backend_tight_default_tolerances():
    from covsteer.modules.sdp import CvxpyBackend

    backend = CvxpyBackend()
    clarabel = backend.options_for("CLARABEL")
    for key in ("tol_gap_abs", "tol_gap_rel", "tol_feas"):
        assert clarabel[key] <= 1e-10
    assert backend.options_for("SCS")["eps_abs"] <= 1e-8
    assert backend.options_for("MOSEK") == {}


def test_cvxpy_backend_options_per_solver():
    from covsteer.modules.sdp import CvxpyBackend

    options = {"CLARABEL": {"max_iter": 50}, "SCS": {"eps_abs": 1e-4}}
    backend = CvxpyBackend(solver_options=options)
    assert backend.options_for("CLARABEL") == {"max_iter": 50}
    backend.options_for("CLARABEL")["max_iter"] = 1
    assert backend.solver_options["CLARABEL"]["max_iter"] == 50
    assert CvxpyBackend(solver_options={}).options_for("CLARABEL") == {}


def test_solve_relaxed_scalar_end_to_end(scalar_spec):
    """A feasible toy solves to optimality and its equalities hold outside the backend."""
    from covsteer.modules.augmented import control_update_expanded, filter_update, propagation_matrices
    from covsteer.modules.filter import design_filter
    from covsteer.modules.sdp import assemble_relaxed, solve

    schedule = design_filter(scalar_spec)
    solution = solve(assemble_relaxed(scalar_spec, schedule))
    assert solution.status is Status.OPTIMAL
    assert len(solution.stages) == scalar_spec.N
    np.testing.assert_allclose(solution.stages[0].mu, [0.0], atol=1e-6)
    np.testing.assert_allclose(solution.stages[-1].mu, [1.0], atol=1e-6)

    for k, stage in enumerate(scalar_spec.stages):
        s = solution.stages[k]
        mats = propagation_matrices(stage, schedule.stages[k].L)
        np.testing.assert_allclose(s.Paug, filter_update(s.Paug_minus, mats), atol=1e-6)
        if k < scalar_spec.N - 1:
            nxt = solution.stages[k + 1]
            np.testing.assert_allclose(nxt.Paug_minus, control_update_expanded(s.Paug, mats, s.U, s.Y, s.S), atol=1e-6)
    assert solution.stages[-1].Paug[0, 0] <= 1.0 + 1e-6


def test_solve_infeasible_toy(scalar_spec_factory):
    """With B = 0 the terminal mean cannot be reached."""
    from covsteer.modules.filter import design_filter
    from covsteer.modules.sdp import assemble_relaxed, solve

    spec = scalar_spec_factory(N=2, B=0.0, muf=5.0)
    solution = solve(assemble_relaxed(spec, design_filter(spec)))
    assert solution.status is Status.INFEASIBLE
    assert solution.stages == ()


@pytest.mark.slow
def test_solve_relaxed_case1():
    from covsteer.modules.filter import design_filter
    from covsteer.modules.linalg import min_eig
    from covsteer.modules.model import builtin_double_integrator
    from covsteer.modules.sdp import assemble_relaxed, solve

    spec = builtin_double_integrator("case1")
    solution = solve(assemble_relaxed(spec, design_filter(spec)))
    assert solution.status is Status.OPTIMAL
    P_last = solution.stages[-1].Paug[:4, :4]
    assert min_eig(spec.boundary.Pf - P_last) >= -1e-6
    assert solution.objective > 0
