#!/usr/bin/env python
"""
covsteer command line.

Three commands tie the modules together:
- ``solve`` loads a problem (or a builtin case), runs the sequential convex
  loop, optionally a Monte Carlo ensemble, and writes a JSON result file
- ``validate`` re-runs Monte Carlo against the policy stored in a result file
- ``export-plots`` writes plot-ready CSV series from a result file

Exit codes: 0 success, 1 internal error, 2 usage error, 3 parse or
validation error, 4 infeasible or numerical trouble, 5 no convergence,
6 Monte Carlo tolerance breach.

See the Click documentation for more command line flag types:
http://click.pocoo.org/5/
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional

import click
import numpy as np

from covsteer import config
from covsteer.errors import (
    CovSteerError,
    DimensionError,
    NoConvergence,
    NumericError,
    PreconditionError,
    ProblemParseError,
    ProblemValidationError,
    SingularityError,
    SubproblemFailed,
    ToleranceExceeded,
)
from covsteer.modules.augmented import estimation_error_cov, legacy_recursion
from covsteer.modules.filter import FilterSchedule, design_filter
from covsteer.modules.model import Case, Policy, builtin_double_integrator, dump_problem, load_problem, parse_problem
from covsteer.modules.montecarlo import reference_errors, run_ensemble, trial_rows
from covsteer.modules.scp import ConvergenceTrace, run
from covsteer.modules.sdp import assemble_relaxed, dump_program

log = logging.getLogger("covsteer")

FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_SOLVER = 4
EXIT_NO_CONVERGENCE = 5
EXIT_TOLERANCE = 6

# First match wins, so subclasses come before their bases
EXIT_CODES = (
    (ProblemParseError, EXIT_PARSE),
    (ProblemValidationError, EXIT_PARSE),
    (DimensionError, EXIT_PARSE),
    (SubproblemFailed, EXIT_SOLVER),
    (SingularityError, EXIT_SOLVER),
    (NumericError, EXIT_SOLVER),
    (NoConvergence, EXIT_NO_CONVERGENCE),
    (ToleranceExceeded, EXIT_TOLERANCE),
    (PreconditionError, EXIT_USAGE),
)


def exit_code_for(error: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(error, cls):
            return code
    return EXIT_INTERNAL


class CovSteerGroup(click.Group):
    """Maps covsteer errors onto the documented exit codes."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (click.exceptions.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except CovSteerError as e:
            code = exit_code_for(e)
            click.echo(f"Error: {e}", err=True)
            log.debug(f"{type(e).__name__} mapped to exit code {code}")
            ctx.exit(code)
        except Exception as e:
            log.exception(f"Internal error: {e}")
            ctx.exit(EXIT_INTERNAL)


def _setup_logging(verbose: bool) -> None:
    logger = logging.getLogger("covsteer")
    # one console handler, bound to whatever stderr is current
    for old in [h for h in logger.handlers if getattr(h, "_covsteer", False)]:
        logger.removeHandler(old)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("[%(levelname)-7s] %(name)s: %(message)s"))
    handler._covsteer = True  # type: ignore[attr-defined]
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


# Options shared by every command
config_option = click.option(
    "--config",
    "config_file",
    type=click.Path(dir_okay=False),
    default=None,
    help="YAML configuration file merged over the defaults.",
)
verbose_option = click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
seed_option = click.option("--seed", type=int, default=0, show_default=True, help="Monte Carlo seed.")
legacy_option = click.option(
    "--legacy-compare",
    is_flag=True,
    help="Also evaluate the orthogonality-based recursion, even for underweighted gains.",
)


def _start(config_file: Optional[str], verbose: bool, **flags) -> None:
    _setup_logging(verbose)
    config.reset()
    if config_file:
        config.load_config_file(config_file)
    config.kwargs.update(flags)
    config.execution_start()


@click.group(cls=CovSteerGroup)
def cli():
    """Output-feedback covariance steering."""


# ---------------------------------------------------------------------------
# Result file
# ---------------------------------------------------------------------------


def _tolist(a) -> List:
    return np.asarray(a).tolist()


def _filter_dict(schedule: FilterSchedule) -> Dict:
    return {
        "p": schedule.p,
        "stages": [
            {
                "L": _tolist(s.L),
                "Ptilde_minus": _tolist(s.Ptilde_minus),
                "Ptilde": _tolist(s.Ptilde),
                "Pinno": _tolist(s.Pinno),
            }
            for s in schedule.stages
        ],
    }


def build_result(spec, schedule, trace: ConvergenceTrace, outcome=None, legacy=None, report=None) -> Dict:
    result = {
        "format_version": FORMAT_VERSION,
        "spec": dump_problem(spec),
        "filter": _filter_dict(schedule),
        "policy": None,
        "predicted": None,
        "legacy": None,
        "trace": trace.as_dict(),
        "gain_norms": None,
        "montecarlo": None if report is None else report.as_dict(),
        "converged": bool(trace.converged),
    }
    if outcome is not None:
        result["policy"] = {"ubar": _tolist(outcome.policy.ubar), "K": _tolist(outcome.policy.K)}
        result["predicted"] = [
            {
                "mu": _tolist(m.posterior.mu),
                "Paug_minus": _tolist(m.prior.Paug),
                "Paug": _tolist(m.posterior.Paug),
                "estimation_error_cov": _tolist(estimation_error_cov(m.posterior.Paug)),
            }
            for m in outcome.moments
        ]
        result["gain_norms"] = _tolist(outcome.policy.gain_norms())
    if legacy is not None:
        result["legacy"] = [{"Phat": _tolist(s.Phat), "P": _tolist(s.P)} for s in legacy]
    return result


def write_result(result: Dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(result, fh, indent=1, default=_json_default)
    log.info(f"Wrote result file {path}")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_result(path) -> Dict:
    try:
        with open(path) as fh:
            result = json.load(fh)
    except OSError as e:
        raise ProblemParseError(f"Cannot read result file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ProblemParseError(f"Malformed result file {path}: {e}") from e
    if not isinstance(result, dict) or result.get("format_version") != FORMAT_VERSION:
        raise ProblemParseError(f"{path} is not a covsteer result file (format_version {FORMAT_VERSION})")
    return result


def _policy_from_result(result: Dict, path) -> Policy:
    policy = result.get("policy")
    if not policy:
        raise ProblemParseError(f"result file {path} holds no policy (the solve did not converge)")
    return Policy(np.array(policy["ubar"], dtype=float), np.array(policy["K"], dtype=float))


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


@cli.command()
@click.argument("problem", required=False, type=click.Path(dir_okay=False))
@click.option("--case", type=click.Choice([c.value for c in Case]), help="Builtin double-integrator case.")
@click.option("--mc", "n_trials", type=click.IntRange(min=0), default=0, help="Monte Carlo trials after solving.")
@seed_option
@legacy_option
@click.option(
    "--dump-program", "program_path", type=click.Path(dir_okay=False), help="Write the relaxed program as text."
)
@click.option("--dump-trials", "trials_path", type=click.Path(dir_okay=False), help="Write trial trajectories as CSV.")
@click.option("--keep-trials", type=click.IntRange(min=1), default=10, show_default=True, help="Trials to dump.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default="covsteer_result.json", show_default=True)
@config_option
@verbose_option
def solve(
    problem, case, n_trials, seed, legacy_compare, program_path, trials_path, keep_trials, output, config_file, verbose
):
    """Solve PROBLEM (a JSON/YAML problem file) or a builtin --case."""
    _start(config_file, verbose, case=case, mc=n_trials, seed=seed, legacy_compare=legacy_compare)
    if (problem is None) == (case is None):
        raise click.UsageError("give exactly one of PROBLEM or --case")
    if n_trials == 1:
        raise click.UsageError("--mc needs at least 2 trials")

    spec = builtin_double_integrator(case) if case else load_problem(problem)
    schedule = design_filter(spec)

    if program_path:
        with open(program_path, "w") as fh:
            n_constraints = write_program(spec, schedule, fh)
        log.info(f"Wrote relaxed program ({n_constraints} constraints) to {program_path}")

    try:
        outcome = run(spec)
    except (NoConvergence, SubproblemFailed) as e:
        if e.trace is not None:
            write_result(build_result(spec, schedule, e.trace), output)
        raise

    legacy = None
    if spec.underweight_p == 1.0 or legacy_compare:
        legacy = legacy_recursion(spec, outcome.schedule, outcome.policy, force=legacy_compare)

    report = None
    if n_trials:
        report = run_ensemble(
            spec, outcome.schedule, outcome.policy, n_trials, seed=seed, keep_trials=keep_trials if trials_path else 0
        )
        if trials_path:
            write_trials(report, trials_path)

    write_result(build_result(spec, outcome.schedule, outcome.trace, outcome, legacy, report), output)

    final = outcome.moments[-1].posterior
    click.echo(
        f"{spec.name or 'problem'}: converged after {outcome.trace.iterations} iterations, "
        f"J = {outcome.solution.objective:.6f}, "
        f"terminal mean error = {np.linalg.norm(final.mu - spec.boundary.muf):.2e}"
    )
    if report is not None:
        click.echo(
            f"Monte Carlo ({report.n_trials} trials): terminal truth covariance error "
            f"{report.truth_cov_error[-1]:.2%}"
        )


def write_program(spec, schedule, stream) -> int:
    program = assemble_relaxed(spec, schedule)
    dump_program(program, stream)
    return len(program.constraints)


def write_trials(report, path) -> None:
    rows = trial_rows(report)
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    log.info(f"Wrote {len(report.trials)} trial trajectories to {path}")


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


@cli.command()
@click.argument("result_file", type=click.Path(dir_okay=False))
@click.option("--mc", "n_trials", type=click.IntRange(min=2), default=10_000, show_default=True)
@seed_option
@legacy_option
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="Write the Monte Carlo report as JSON.")
@config_option
@verbose_option
def validate(result_file, n_trials, seed, legacy_compare, output, config_file, verbose):
    """Re-run Monte Carlo against the policy stored in RESULT_FILE."""
    _start(config_file, verbose, mc=n_trials, seed=seed, legacy_compare=legacy_compare)
    result = read_result(result_file)
    spec = parse_problem(result["spec"])
    policy = _policy_from_result(result, result_file)
    schedule = design_filter(spec)

    report = run_ensemble(spec, schedule, policy, n_trials, seed=seed)
    if output:
        with open(output, "w") as fh:
            json.dump(report.as_dict(), fh, indent=1)

    if legacy_compare:
        legacy = legacy_recursion(spec, schedule, policy, force=True)
        errors = reference_errors(report, [s.P for s in legacy])
        mc_config = getattr(config, "montecarlo", {})
        tolerance = mc_config.get("tolerance", 0.05)
        stages = [k for k in mc_config.get("check_stages", []) if 0 <= k < spec.N] or [spec.N - 1]
        bad = [k for k in stages if errors[k] > tolerance]
        click.echo(
            f"Orthogonality-based prediction vs Monte Carlo: terminal error {errors[-1]:.2%} "
            f"(tolerance {tolerance:.0%})"
        )
        if bad:
            raise ToleranceExceeded(
                "orthogonality-based prediction disagrees with Monte Carlo at stages "
                + ", ".join(f"{k} ({errors[k]:.2%})" for k in bad)
            )
        return

    report.check()
    click.echo(
        f"Monte Carlo ({n_trials} trials) agrees with the prediction: "
        f"terminal truth covariance error {report.truth_cov_error[-1]:.2%}"
    )


# ---------------------------------------------------------------------------
# export-plots
# ---------------------------------------------------------------------------


def ellipse_rows(predicted: List[Dict], block) -> List[Dict]:
    """Eigen data of the 2x2 position block of each a posteriori truth covariance."""
    i, j = block
    rows = []
    for k, stage in enumerate(predicted):
        P = np.array(stage["Paug"])
        sub = P[np.ix_([i, j], [i, j])]
        values, vectors = np.linalg.eigh(0.5 * (sub + sub.T))
        lam_minor, lam_major = (max(float(v), 0.0) for v in values)
        major = vectors[:, 1]
        rows.append(
            {
                "k": k,
                "lambda_major": lam_major,
                "lambda_minor": lam_minor,
                "semi_major": math.sqrt(lam_major),
                "semi_minor": math.sqrt(lam_minor),
                "angle_rad": math.atan2(major[1], major[0]),
            }
        )
    return rows


def _write_csv(path: Path, rows: List[Dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    log.info(f"Wrote {path}")


@cli.command("export-plots")
@click.argument("result_file", type=click.Path(dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@config_option
@verbose_option
def export_plots(result_file, out_dir, config_file, verbose):
    """Write plot-ready CSV series from RESULT_FILE into OUT_DIR."""
    _start(config_file, verbose)
    result = read_result(result_file)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    predicted = result.get("predicted")
    if predicted:
        _write_csv(
            out / "mean.csv",
            [{"k": k, **{f"mu_{i}": v for i, v in enumerate(s["mu"])}} for k, s in enumerate(predicted)],
        )
        block = getattr(config, "export", {}).get("position_block", [0, 1])
        nx = len(predicted[0]["mu"])
        if max(block) < nx:
            _write_csv(out / "ellipses.csv", ellipse_rows(predicted, block))
        else:
            click.echo(f"Position block {list(block)} does not fit nx = {nx}: ellipses.csv skipped")
        _write_csv(out / "gains.csv", [{"k": k, "spectral_norm": g} for k, g in enumerate(result["gain_norms"])])
    else:
        click.echo("No policy in the result file: mean, ellipse and gain series skipped")

    records = result.get("trace", {}).get("records", [])
    if records:
        _write_csv(
            out / "convergence.csv",
            [
                {
                    "iteration": r["iteration"],
                    "max_e": r["max_e"],
                    "J": r["J"],
                    "delta_J": "" if r["delta_J"] is None else r["delta_J"],
                    "weight": r["weight"],
                    "max_gap": max(r["gaps"]) if r["gaps"] else "",
                    "wall_time": r["wall_time"],
                }
                for r in records
            ],
        )

    mc = result.get("montecarlo")
    if mc and predicted:
        _write_csv(
            out / "mc_mean.csv",
            [
                {
                    "k": k,
                    **{f"emp_mu_{i}": v for i, v in enumerate(emp)},
                    **{f"pred_mu_{i}": v for i, v in enumerate(predicted[k]["mu"])},
                }
                for k, emp in enumerate(mc["emp_mean"])
            ],
        )
        _write_csv(
            out / "mc_covariance.csv",
            [
                {
                    "k": k,
                    "truth_cov_error": mc["truth_cov_error"][k],
                    "aug_cov_error": mc["aug_cov_error"][k],
                    "mean_error": mc["mean_error"][k],
                }
                for k in range(len(mc["emp_mean"]))
            ],
        )
    else:
        click.echo("No Monte Carlo data in the result file: mc_mean.csv and mc_covariance.csv skipped")


def main():
    cli(prog_name="covsteer")


if __name__ == "__main__":
    main()
