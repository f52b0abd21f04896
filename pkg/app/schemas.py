from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import List, Optional
from app.models import MisfitKind, NormalizationMode, StopReason


# Solver outputs
class AlphaSolution(BaseModel):
    """Optimal shift and squared W2 distance between two circle densities"""
    model_config = ConfigDict(frozen=True)

    alpha_star: float = Field(..., gt=-1.0, lt=1.0, description="Minimizer of I on (-1, 1)")
    w2_squared: float = Field(..., ge=0.0, description="I(alpha*)")
    newton_iterations: int = Field(..., ge=0)
    residual: float = Field(..., ge=0.0, description="|I'(alpha*)|")
    # Identifies the (f, g) pair the solution was computed for
    pair_digest: Optional[str] = Field(default=None, exclude=True)


class BruteForceResult(BaseModel):
    """Exhaustive matching of equal-mass atoms on the circle"""
    cost: float
    permutation: List[int]
    best_shift: int = Field(..., description="Cyclic shift of the sorted matching with least cost")
    shift_cost: float
    attained_by_shift: bool


class GradientCheckReport(BaseModel):
    """Directional finite-difference check of a gradient"""
    samples: int
    epsilon: float
    relative_errors: List[float]
    max_relative_error: float


class BenchRow(BaseModel):
    """Median wall time of one W2 evaluation at grid size n"""
    n: int
    repeats: int
    median_seconds: float


# Inversion configuration and records
class InversionConfig(BaseModel):
    """Parameters of a Barzilai-Borwein reconstruction"""
    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    misfit: MisfitKind = MisfitKind.W2
    a: float = Field(2.0, gt=0.0, description="Shift constant of the trace normalization")
    normalization: NormalizationMode = NormalizationMode.FIXED
    a_range_factor: float = Field(1.5, gt=0.0)
    beta: float = Field(0.0, ge=0.0, description="Total variation weight")
    tv_kappa: float = Field(1e-6, gt=0.0)
    s_min: float = Field(1.0, gt=0.0)
    s_max: float = Field(1000.0, gt=0.0)
    s_stop: float = Field(1e-3, gt=0.0)
    scale_steps: bool = Field(
        True, description="Read s_min, s_max and s_stop relative to the objective at the start of each misfit phase"
    )
    memory: int = Field(5, ge=1, description="Nonmonotone memory M")
    tau: float = Field(1e-5, gt=0.0, lt=1.0)
    rho1: float = 0.4
    rho2: float = 0.6
    i_max: int = Field(500, ge=0)
    c0: float = Field(0.1, gt=0.0)
    c1: float = 10.0
    warm_start_m: int = Field(0, ge=0)
    max_backtracks: int = Field(60, ge=1)
    proxy_iterations: int = Field(10, ge=1)
    newton_eps: float = Field(1e-12, gt=0.0)
    n_currents: int = Field(5, ge=1)
    eps: float = Field(0.03, ge=0.0, description="Relative noise level")
    seed: int = Field(0, ge=0)
    refinement: int = Field(2, ge=1)
    phantom: str = "offset_disk"

    @field_validator("misfit", "normalization", mode="before")
    @classmethod
    def lower_enum(cls, value):
        return value.strip().lower() if isinstance(value, str) else value

    @model_validator(mode="after")
    def check_ranges(self) -> "InversionConfig":
        if not 0.0 < self.rho1 < self.rho2 < 1.0:
            raise ValueError("backtracking range needs 0 < rho1 < rho2 < 1")
        if self.s_min > self.s_max:
            raise ValueError("s_min must not exceed s_max")
        if self.c0 >= self.c1:
            raise ValueError("c0 must be below c1")
        if self.warm_start_m and not 5 <= self.warm_start_m <= 15:
            raise ValueError("warm_start_m must be 0 or between 5 and 15")
        return self

    @property
    def rho(self) -> float:
        return 0.5 * (self.rho1 + self.rho2)


class IterationRecord(BaseModel):
    """One accepted step of the optimizer"""
    iteration: int
    misfit: MisfitKind
    objective: float
    reference: float = Field(..., description="Max of the remembered objective values")
    step: float
    step_norm_sq: float = Field(..., description="H1 norm squared of the accepted update")
    backtracks: int


class MeasurementHeader(BaseModel):
    """Metadata written next to measurements.csv"""
    eps: float
    seed: int
    prng: str
    numpy_version: str
    mesh_id: str
    data_mesh_id: str
    labels: List[str]
    noise_scale: float
    phantom: Optional[str] = None


class RunSummary(BaseModel):
    """Final record of an inversion run"""
    iterations: int
    stop_reason: StopReason
    misfit: MisfitKind
    mesh_id: str
    initial_objective: float
    final_objective: float
    initial_relative_error: Optional[float] = None
    final_relative_error: Optional[float] = None
    inclusion_contrast: Optional[float] = None
    config: InversionConfig


class LandscapePoint(BaseModel):
    """Objective values for one candidate inclusion centre"""
    radius: float
    angle: float
    x: float
    y: float
    w2: float
    l2: float
