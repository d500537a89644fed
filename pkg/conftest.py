"""
Pytest configuration shared by the module and repository tests.
"""

import numpy as np
import pytest

from covsteer import config


@pytest.fixture(autouse=True)
def reset():
    """
    Reset covsteer config after each test
    """
    yield
    config.reset()


def make_scalar_spec(N=3, A=1.0, B=1.0, G=0.1, H=1.0, R=0.1, mu0=0.0, muf=1.0, Pf=1.0, p=1.0, **scp):
    """A one-state, one-input problem small enough to enumerate by hand."""
    from covsteer.modules.model import (
        BoundaryConditions,
        Dims,
        InitialCovariance,
        InitMode,
        ProblemSpec,
        ScpParams,
        StageModel,
        validate_problem,
    )

    init = InitialCovariance(mode=InitMode.CASE1, Ptilde0=[[0.1]], Phat0=[[0.1]])
    spec = ProblemSpec(
        N=N,
        stages=(StageModel(A=[[A]], B=[[B]], G=[[G]], H=[[H]], R=[[R]]),) * N,
        boundary=BoundaryConditions(
            mu0=np.array([mu0]), Paug0=init.assemble(), muf=np.array([muf]), Pf=[[Pf]], init=init
        ),
        dims=Dims(1, 1, 1, 1),
        underweight_p=p,
        scp=ScpParams(**scp),
        name="scalar",
    )
    return validate_problem(spec)


@pytest.fixture
def scalar_spec():
    return make_scalar_spec()


@pytest.fixture
def scalar_spec_factory():
    return make_scalar_spec
