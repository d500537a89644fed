"""
Tests for the filter module.
"""

import numpy as np
import pytest

from covsteer.errors import DimensionError, PreconditionError, SingularityError


def test_module_import():
    """Test that the filter module can be imported."""
    from covsteer.modules.filter import filter

    assert hasattr(filter, "design_filter")


@pytest.mark.parametrize(
    "P,H,R,p,expected",
    [
        (1.0, 1.0, 1.0, 1.0, 0.5),
        (1.0, 1.0, 4.0, 1.0, 0.2),
        (1.0, 1.0, 1.0, 0.5, 1.0 / 3.0),
    ],
)
def test_kalman_gain_scalar(P, H, R, p, expected):
    """Scalar gains, with and without underweighting."""
    from covsteer.modules.filter import kalman_gain

    np.testing.assert_allclose(kalman_gain([[P]], [[H]], [[R]], p), [[expected]], rtol=1e-14)


def test_kalman_gain_noiseless_identity():
    """With H = I and R = 0 the gain is the identity."""
    from covsteer.modules.filter import kalman_gain

    np.testing.assert_allclose(kalman_gain(np.eye(2), np.eye(2), np.zeros((2, 2))), np.eye(2), atol=1e-15)


@pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
def test_kalman_gain_rejects_p(p):
    """Underweighting factors outside (0, 1] are rejected."""
    from covsteer.modules.filter import kalman_gain

    with pytest.raises(PreconditionError):
        kalman_gain([[1.0]], [[1.0]], [[1.0]], p)


def test_kalman_gain_singular_innovation():
    """A zero innovation covariance cannot be inverted."""
    from covsteer.modules.filter import kalman_gain

    with pytest.raises(SingularityError):
        kalman_gain([[0.0]], [[1.0]], [[0.0]], stage=3)


def test_kalman_gain_shape_mismatch():
    from covsteer.modules.filter import kalman_gain

    with pytest.raises(DimensionError):
        kalman_gain(np.eye(2), np.eye(3), np.eye(3))


@pytest.mark.parametrize(
    "L,R,expected",
    [
        (0.5, 1.0, 0.5),
        (0.2, 1.0, 0.68),
        (0.0, 1.0, 1.0),
    ],
)
def test_joseph_update_scalar(L, R, expected):
    """Joseph form for the optimal gain, a suboptimal gain and no update."""
    from covsteer.modules.filter import joseph_update

    np.testing.assert_allclose(joseph_update([[1.0]], [[L]], [[1.0]], [[R]]), [[expected]], rtol=1e-14)


def test_joseph_update_zero_gain_keeps_matrix():
    from covsteer.modules.filter import joseph_update

    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    np.testing.assert_array_equal(joseph_update(P, np.zeros((2, 1)), [[1.0, 0.0]], [[1.0]]), P)


def test_time_update_and_innovation():
    from covsteer.modules.filter import innovation_cov, time_update

    np.testing.assert_allclose(time_update([[1.0]], [[2.0]], [[1.0]]), [[5.0]])
    np.testing.assert_allclose(innovation_cov([[2.0]], [[3.0]], [[1.0]]), [[19.0]])


def test_joseph_matches_short_form_for_optimal_gain():
    """At p = 1 the Joseph form equals (I - L H) Ptilde^-."""
    from covsteer.modules.filter import joseph_update, kalman_gain

    rng = np.random.default_rng(4)
    for _ in range(20):
        F = rng.standard_normal((4, 4))
        Pm = F @ F.T + 0.1 * np.eye(4)
        H = rng.standard_normal((3, 4))
        R = np.diag(rng.uniform(0.1, 1.0, 3))
        L = kalman_gain(Pm, H, R)
        short = (np.eye(4) - L @ H) @ Pm
        np.testing.assert_allclose(joseph_update(Pm, L, H, R), short, atol=1e-12 * max(1.0, np.abs(Pm).max()))


def test_design_filter_case1_ordering():
    """Measurement updates never increase the error covariance."""
    from covsteer.modules.filter import design_filter
    from covsteer.modules.linalg import min_eig
    from covsteer.modules.model import builtin_double_integrator

    schedule = design_filter(builtin_double_integrator("case1"))
    assert len(schedule) == 20
    assert schedule.p == 1.0
    for s in schedule.stages:
        assert min_eig(s.Ptilde_minus - s.Ptilde) >= -1e-12
        assert s.L.shape == (4, 3)


def test_design_filter_starts_from_ptilde0():
    from covsteer.modules.filter import design_filter
    from covsteer.modules.model import builtin_double_integrator

    spec = builtin_double_integrator("case2")
    schedule = design_filter(spec)
    np.testing.assert_array_equal(schedule.stages[0].Ptilde_minus, spec.boundary.init.Ptilde0)


def test_design_filter_underweighted_gain_differs():
    """Case 3 uses p = 0.25, so its first gain differs from the optimal one."""
    from covsteer.modules.filter import design_filter, kalman_gain
    from covsteer.modules.model import builtin_double_integrator

    spec = builtin_double_integrator("case3")
    schedule = design_filter(spec)
    assert schedule.p == 0.25
    stage = spec.stages[0]
    optimal = kalman_gain(spec.boundary.init.Ptilde0, stage.H, stage.R, 1.0)
    assert np.linalg.norm(schedule.stages[0].L - optimal) > 1e-3


def test_design_filter_is_deterministic():
    """Two runs on the same problem give bit-identical schedules."""
    from covsteer.modules.filter import design_filter
    from covsteer.modules.model import builtin_double_integrator

    spec = builtin_double_integrator("case3")
    a, b = design_filter(spec), design_filter(spec)
    for sa, sb in zip(a.stages, b.stages):
        for name in ("L", "Ptilde_minus", "Ptilde", "Pinno"):
            assert np.array_equal(getattr(sa, name), getattr(sb, name))


def test_filter_stage_is_read_only():
    from covsteer.modules.filter import design_filter
    from covsteer.modules.model import builtin_double_integrator

    schedule = design_filter(builtin_double_integrator("case1"))
    with pytest.raises(ValueError):
        schedule.stages[0].L[0, 0] = 1.0
