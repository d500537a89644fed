"""
===============================================
Problem Definition
===============================================

Stage matrices, noise statistics, boundary conditions and solver parameters
for one covariance-steering problem, plus:
- ingestion from a JSON-compatible problem file (validated with pydantic)
- serialization back to the same schema
- the builtin double-integrator cases
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator
from pydantic import ValidationError as PydanticValidationError

from covsteer import config
from covsteer.errors import ProblemDimensionError, ProblemParseError, ProblemValidationError
from covsteer.modules.augmented import build_case1_init, build_case2_init
from covsteer.modules.linalg import min_eig

log = logging.getLogger(__name__)


def _frozen(a, ndmin: int = 0) -> np.ndarray:
    arr = np.array(a, dtype=float, ndmin=ndmin)
    arr.setflags(write=False)
    return arr


class InitMode(str, enum.Enum):
    CASE1 = "case1"
    CASE2 = "case2"
    EXPLICIT = "explicit"


class Case(str, enum.Enum):
    """Builtin double-integrator scenarios."""

    CASE1 = "case1"
    CASE2 = "case2"
    CASE3 = "case3"


class Dims(NamedTuple):
    nx: int
    nu: int
    ny: int
    nw: int


@dataclass(frozen=True)
class StageModel:
    """Dynamics ``x+ = A x + B u + G w`` and measurement ``y = H x + v``, ``v ~ N(0, R)``."""

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "G", "H", "R"):
            object.__setattr__(self, name, _frozen(getattr(self, name), ndmin=2))

    def same_as(self, other: "StageModel") -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name)) for name in ("A", "B", "G", "H", "R")
        )


@dataclass(frozen=True)
class InitialCovariance:
    """
    How the initial a priori augmented covariance was specified.

    ``Ptilde0`` is the filter's own a priori error covariance and is carried
    in every mode; it is a design quantity and need not match any block of
    the augmented covariance.
    """

    mode: InitMode
    Ptilde0: np.ndarray
    Phat0: Optional[np.ndarray] = None
    P0: Optional[np.ndarray] = None
    Paug0: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", InitMode(self.mode))
        for name in ("Ptilde0", "Phat0", "P0", "Paug0"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(value, ndmin=2))

    def assemble(self) -> np.ndarray:
        """Build the 2nx x 2nx a priori augmented covariance."""
        if self.mode is InitMode.CASE1:
            return build_case1_init(self.Ptilde0, self.Phat0)
        if self.mode is InitMode.CASE2:
            return build_case2_init(self.Ptilde0, self.P0)
        return np.array(self.Paug0)


@dataclass(frozen=True)
class BoundaryConditions:
    mu0: np.ndarray
    Paug0: np.ndarray
    muf: np.ndarray
    Pf: np.ndarray
    init: InitialCovariance

    def __post_init__(self):
        object.__setattr__(self, "mu0", _frozen(self.mu0, ndmin=1))
        object.__setattr__(self, "muf", _frozen(self.muf, ndmin=1))
        object.__setattr__(self, "Paug0", _frozen(self.Paug0, ndmin=2))
        object.__setattr__(self, "Pf", _frozen(self.Pf, ndmin=2))


@dataclass(frozen=True)
class ScpParams:
    w0: float = 1.0
    beta: float = 1.2
    eps_rank: float = 1e-5
    eps_obj: float = 1e-5
    eps_cross: float = 1e-3
    max_iters: int = 200
    # adds the hard constraint e_k <= e_k^(i-1) to every iterate
    hard_decrease: bool = False


@dataclass(frozen=True)
class ProblemSpec:
    N: int
    stages: Tuple[StageModel, ...]
    boundary: BoundaryConditions
    dims: Dims
    underweight_p: float = 1.0
    scp: ScpParams = field(default_factory=ScpParams)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "dims", Dims(*self.dims))


@dataclass(frozen=True)
class Policy:
    """Feedforward ``ubar[k]`` and feedback gain ``K[k]`` for ``u_k = ubar_k + K_k (xhat_k - mu_k)``."""

    ubar: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ubar", _frozen(self.ubar, ndmin=2))
        object.__setattr__(self, "K", _frozen(self.K, ndmin=3))
        if self.ubar.shape[0] != self.K.shape[0]:
            raise ProblemDimensionError(
                f"policy has {self.ubar.shape[0]} feedforward terms but {self.K.shape[0]} gains", field="policy"
            )

    @property
    def N(self) -> int:
        return self.ubar.shape[0]

    def gain_norms(self) -> np.ndarray:
        """Spectral norm of each feedback gain."""
        return np.array([np.linalg.norm(K, 2) for K in self.K])

    @classmethod
    def zeros(cls, N: int, nu: int, nx: int) -> "Policy":
        return cls(np.zeros((N, nu)), np.zeros((N, nu, nx)))


# ---------------------------------------------------------------------------
# Problem file schema
# ---------------------------------------------------------------------------

Matrix = List[List[float]]


class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DimsSchema(_Schema):
    nx: PositiveInt
    nu: PositiveInt
    ny: PositiveInt
    nw: PositiveInt


class HorizonSchema(_Schema):
    N: int = Field(ge=2)


class StageSchema(_Schema):
    A: Matrix
    B: Matrix
    G: Matrix
    H: Matrix
    R: Matrix


class ConstantStagesSchema(_Schema):
    constant: StageSchema


class InitCovSchema(_Schema):
    mode: Literal["case1", "case2", "explicit"]
    Ptilde0: Matrix
    Phat0: Optional[Matrix] = None
    P0: Optional[Matrix] = None
    Paug0: Optional[Matrix] = None

    @model_validator(mode="after")
    def _check_mode_fields(self):
        required = {"case1": "Phat0", "case2": "P0", "explicit": "Paug0"}[self.mode]
        if getattr(self, required) is None:
            raise ValueError(f"init_cov mode '{self.mode}' requires '{required}'")
        return self


class BoundarySchema(_Schema):
    mu0: List[float]
    muf: List[float]
    Pf: Matrix
    init_cov: InitCovSchema


class FilterSchema(_Schema):
    underweight_p: float = Field(1.0, gt=0, le=1)


class ScpSchema(_Schema):
    w0: float = Field(1.0, gt=0)
    beta: float = Field(1.2, gt=1)
    eps_rank: float = Field(1e-5, gt=0)
    eps_obj: float = Field(1e-5, gt=0)
    eps_cross: float = Field(1e-3, ge=0)
    max_iters: int = Field(200, ge=1)
    hard_decrease: bool = False


class ProblemSchema(_Schema):
    name: str = ""
    dims: DimsSchema
    horizon: HorizonSchema
    stages: Union[ConstantStagesSchema, List[StageSchema]]
    boundary: BoundarySchema
    filter: FilterSchema = Field(default_factory=FilterSchema)
    scp: ScpSchema = Field(default_factory=ScpSchema)


def _translate_pydantic_error(e: PydanticValidationError) -> ProblemValidationError:
    first = e.errors()[0]
    loc = tuple(first.get("loc", ()))
    stage = None
    if loc and loc[0] == "stages":
        # union members add their own tag to the location, e.g. ('stages', 'list[StageSchema]', 3, 'B')
        stage = next((part for part in loc[1:] if isinstance(part, int)), None)
    field_path = ".".join(str(part) for part in loc) or None
    return ProblemValidationError(first.get("msg", str(e)), field=field_path, stage=stage)


def _matrix(rows, field_name: str, shape: Tuple[int, int], stage: Optional[int] = None) -> np.ndarray:
    try:
        arr = np.array(rows, dtype=float)
    except ValueError as e:
        raise ProblemDimensionError(f"ragged matrix: {e}", field=field_name, stage=stage) from e
    if arr.ndim == 1 and shape[0] == 1:
        arr = arr.reshape(1, -1)
    if arr.shape != shape:
        raise ProblemDimensionError(f"expected shape {shape}, got {arr.shape}", field=field_name, stage=stage)
    return arr


def _vector(values, field_name: str, n: int) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.shape != (n,):
        raise ProblemDimensionError(f"expected length {n}, got shape {arr.shape}", field=field_name)
    return arr


def _stage_from_schema(s: StageSchema, dims: Dims, stage: Optional[int]) -> StageModel:
    nx, nu, ny, nw = dims
    prefix = "stages.constant" if stage is None else f"stages.{stage}"
    return StageModel(
        A=_matrix(s.A, f"{prefix}.A", (nx, nx), stage),
        B=_matrix(s.B, f"{prefix}.B", (nx, nu), stage),
        G=_matrix(s.G, f"{prefix}.G", (nx, nw), stage),
        H=_matrix(s.H, f"{prefix}.H", (ny, nx), stage),
        R=_matrix(s.R, f"{prefix}.R", (ny, ny), stage),
    )


def parse_problem(data: Dict) -> ProblemSpec:
    """Validate a problem mapping against the schema and build a ProblemSpec."""
    if not isinstance(data, dict):
        raise ProblemParseError("Problem file must contain a mapping at the top level")
    try:
        schema = ProblemSchema.model_validate(data)
    except PydanticValidationError as e:
        raise _translate_pydantic_error(e) from e

    dims = Dims(schema.dims.nx, schema.dims.nu, schema.dims.ny, schema.dims.nw)
    nx = dims.nx
    N = schema.horizon.N

    if isinstance(schema.stages, ConstantStagesSchema):
        stage = _stage_from_schema(schema.stages.constant, dims, None)
        stages = (stage,) * N
    else:
        if len(schema.stages) != N:
            raise ProblemValidationError(f"expected {N} stages, got {len(schema.stages)}", field="stages")
        stages = tuple(_stage_from_schema(s, dims, k) for k, s in enumerate(schema.stages))

    ic = schema.boundary.init_cov
    init = InitialCovariance(
        mode=InitMode(ic.mode),
        Ptilde0=_matrix(ic.Ptilde0, "boundary.init_cov.Ptilde0", (nx, nx)),
        Phat0=None if ic.Phat0 is None else _matrix(ic.Phat0, "boundary.init_cov.Phat0", (nx, nx)),
        P0=None if ic.P0 is None else _matrix(ic.P0, "boundary.init_cov.P0", (nx, nx)),
        Paug0=None if ic.Paug0 is None else _matrix(ic.Paug0, "boundary.init_cov.Paug0", (2 * nx, 2 * nx)),
    )
    _check_psd(init.Ptilde0, "boundary.init_cov.Ptilde0")
    for name in ("Phat0", "P0"):
        if getattr(init, name) is not None:
            _check_psd(getattr(init, name), f"boundary.init_cov.{name}")

    boundary = BoundaryConditions(
        mu0=_vector(schema.boundary.mu0, "boundary.mu0", nx),
        Paug0=init.assemble(),
        muf=_vector(schema.boundary.muf, "boundary.muf", nx),
        Pf=_matrix(schema.boundary.Pf, "boundary.Pf", (nx, nx)),
        init=init,
    )
    scp = ScpParams(**schema.scp.model_dump())
    spec = ProblemSpec(
        N=N,
        stages=stages,
        boundary=boundary,
        dims=dims,
        underweight_p=schema.filter.underweight_p,
        scp=scp,
        name=schema.name,
    )
    return validate_problem(spec)


def load_problem(path) -> ProblemSpec:
    """Read, parse and validate a problem file (JSON or YAML)."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ProblemParseError(f"Cannot read problem file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ProblemParseError(f"Malformed problem file {path}: {e}") from e

    spec = parse_problem(data)
    log.info(f"Loaded problem '{spec.name or path}' with N={spec.N}, dims={tuple(spec.dims)}")
    return spec


def _check_psd(m: np.ndarray, field_name: str, stage: Optional[int] = None) -> None:
    tol = getattr(config, "linalg", {}).get("psd_tol", 1e-10)
    scale = max(1.0, float(np.linalg.norm(m, 2)))
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * scale):
        raise ProblemValidationError("matrix is not symmetric", field=field_name, stage=stage)
    lam = min_eig(m)
    if lam < -tol * scale:
        raise ProblemValidationError(f"matrix is not PSD (min eigenvalue {lam:.3e})", field=field_name, stage=stage)


def validate_problem(spec: ProblemSpec) -> ProblemSpec:
    """Check every ProblemSpec invariant; returns the spec unchanged."""
    nx, nu, ny, nw = spec.dims
    if spec.N < 2:
        raise ProblemValidationError(f"horizon must be at least 2, got {spec.N}", field="horizon.N")
    if len(spec.stages) != spec.N:
        raise ProblemValidationError(f"expected {spec.N} stages, got {len(spec.stages)}", field="stages")
    if not 0 < spec.underweight_p <= 1:
        raise ProblemValidationError(f"must lie in (0, 1], got {spec.underweight_p}", field="filter.underweight_p")

    scp = spec.scp
    if not scp.w0 > 0:
        raise ProblemValidationError(f"must be positive, got {scp.w0}", field="scp.w0")
    if not scp.beta > 1:
        raise ProblemValidationError(f"must exceed 1, got {scp.beta}", field="scp.beta")
    for name in ("eps_rank", "eps_obj"):
        if not getattr(scp, name) > 0:
            raise ProblemValidationError("must be positive", field=f"scp.{name}")
    if scp.eps_cross < 0:
        raise ProblemValidationError("must be non-negative", field="scp.eps_cross")
    if scp.max_iters < 1:
        raise ProblemValidationError("must be at least 1", field="scp.max_iters")

    expected = {"A": (nx, nx), "B": (nx, nu), "G": (nx, nw), "H": (ny, nx), "R": (ny, ny)}
    for k, stage in enumerate(spec.stages):
        for name, shape in expected.items():
            if getattr(stage, name).shape != shape:
                raise ProblemDimensionError(
                    f"expected shape {shape}, got {getattr(stage, name).shape}", field=f"stages.{k}.{name}", stage=k
                )
        _check_psd(stage.R, f"stages.{k}.R", stage=k)

    b = spec.boundary
    if b.mu0.shape != (nx,):
        raise ProblemDimensionError(f"expected length {nx}", field="boundary.mu0")
    if b.muf.shape != (nx,):
        raise ProblemDimensionError(f"expected length {nx}", field="boundary.muf")
    if b.Pf.shape != (nx, nx):
        raise ProblemDimensionError(f"expected shape {(nx, nx)}", field="boundary.Pf")
    if b.Paug0.shape != (2 * nx, 2 * nx):
        raise ProblemDimensionError(f"expected shape {(2 * nx, 2 * nx)}", field="boundary.Paug0")
    if b.init.Ptilde0.shape != (nx, nx):
        raise ProblemDimensionError(f"expected shape {(nx, nx)}", field="boundary.init_cov.Ptilde0")
    _check_psd(b.Pf, "boundary.Pf")
    _check_psd(b.Paug0, "boundary.Paug0")
    _check_psd(b.init.Ptilde0, "boundary.init_cov.Ptilde0")
    return spec


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _stage_to_dict(stage: StageModel) -> Dict:
    return {name: getattr(stage, name).tolist() for name in ("A", "B", "G", "H", "R")}


def dump_problem(spec: ProblemSpec) -> Dict:
    """Serialize a ProblemSpec to the problem-file schema."""
    first = spec.stages[0]
    if all(first.same_as(stage) for stage in spec.stages[1:]):
        stages: Union[Dict, List] = {"constant": _stage_to_dict(first)}
    else:
        stages = [_stage_to_dict(stage) for stage in spec.stages]

    init = spec.boundary.init
    init_cov: Dict = {"mode": init.mode.value, "Ptilde0": init.Ptilde0.tolist()}
    if init.mode is InitMode.CASE1:
        init_cov["Phat0"] = init.Phat0.tolist()
    elif init.mode is InitMode.CASE2:
        init_cov["P0"] = init.P0.tolist()
    else:
        init_cov["Paug0"] = spec.boundary.Paug0.tolist()

    scp = spec.scp
    return {
        "name": spec.name,
        "dims": dict(spec.dims._asdict()),
        "horizon": {"N": spec.N},
        "stages": stages,
        "boundary": {
            "mu0": spec.boundary.mu0.tolist(),
            "muf": spec.boundary.muf.tolist(),
            "Pf": spec.boundary.Pf.tolist(),
            "init_cov": init_cov,
        },
        "filter": {"underweight_p": spec.underweight_p},
        "scp": {
            "w0": scp.w0,
            "beta": scp.beta,
            "eps_rank": scp.eps_rank,
            "eps_obj": scp.eps_obj,
            "eps_cross": scp.eps_cross,
            "max_iters": scp.max_iters,
            "hard_decrease": scp.hard_decrease,
        },
    }


# ---------------------------------------------------------------------------
# Builtin double integrator
# ---------------------------------------------------------------------------


def double_integrator_stage(dt: float = 0.2) -> StageModel:
    """Planar double integrator with velocity measurements and no process noise."""
    A = np.eye(4)
    A[0, 2] = A[1, 3] = dt
    B = np.array([[dt, 0.0], [0.0, dt], [1.0, 0.0], [0.0, 1.0]])
    H = np.hstack([np.zeros((3, 1)), np.eye(3)])
    R = np.diag([1.0, 1.0, 1.0]) * 1e-2
    return StageModel(A=A, B=B, G=np.zeros((4, 4)), H=H, R=R)


def builtin_double_integrator(case: Union[Case, str], dt: float = 0.2, N: int = 20) -> ProblemSpec:
    """
    The double-integrator scenarios.

    Case 1 satisfies orthogonality between estimate and estimation error,
    Case 2 makes the error orthogonal to the true state, and Case 3 reuses
    the Case-1 structure with an underweighted Kalman gain (p = 0.25).
    """
    case = Case(case)
    if case is Case.CASE1:
        init = InitialCovariance(
            mode=InitMode.CASE1,
            Ptilde0=np.diag([2.0, 1.0, 1.4, 1.4]) * 1e-2,
            Phat0=np.diag([10.0, 10.0, 2.0, 2.0]) * 1e-2,
        )
        p = 1.0
    elif case is Case.CASE2:
        init = InitialCovariance(
            mode=InitMode.CASE2,
            Ptilde0=np.diag([8.0, 9.0, 0.6, 0.6]) * 1e-2,
            P0=np.diag([2.0, 1.0, 1.4, 1.4]) * 1e-2,
        )
        p = 1.0
    else:
        init = InitialCovariance(
            mode=InitMode.CASE1,
            Ptilde0=np.diag([2.0, 1.0, 1.4, 1.4]) * 1e-2,
            Phat0=np.diag([4.0, 2.0, 2.8, 2.8]) * 1e-2,
        )
        p = 0.25

    boundary = BoundaryConditions(
        mu0=np.array([1.0, 2.0, 3.0, 2.0]),
        Paug0=init.assemble(),
        muf=np.array([11.0, 3.0, 0.0, 0.0]),
        Pf=np.diag([6.0, 6.0, 0.6, 0.6]) * 1e-2,
        init=init,
    )
    spec = ProblemSpec(
        N=N,
        stages=(double_integrator_stage(dt),) * N,
        boundary=boundary,
        dims=Dims(nx=4, nu=2, ny=3, nw=4),
        underweight_p=p,
        scp=ScpParams(w0=1.0, beta=1.2, eps_rank=1e-5, eps_obj=1e-5, eps_cross=1e-3, max_iters=200),
        name=f"double_integrator_{case.value}",
    )
    return validate_problem(spec)
