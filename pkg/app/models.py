import enum
import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Tuple

import numpy as np

from app.exceptions import DomainError, UsageError

if TYPE_CHECKING:
    from app.schemas import InversionConfig, IterationRecord

# Lower bound for densities after unit-mass normalization
DENSITY_FLOOR = 1e-6


class FieldRole(str, enum.Enum):
    """What a nodal coefficient vector represents"""
    CONDUCTIVITY = "conductivity"
    POTENTIAL = "potential"
    GRADIENT_DENSITY = "gradient-density"


class MisfitKind(str, enum.Enum):
    """Boundary data misfit functional"""
    W2 = "w2"
    L2 = "l2"


class NormalizationMode(str, enum.Enum):
    """How the shift constant a is chosen when traces become densities"""
    FIXED = "fixed"
    RANGE = "range"


class StopReason(str, enum.Enum):
    """Why the optimizer stopped"""
    STEP_TOLERANCE = "step_tolerance"
    MAX_ITERATIONS = "max_iterations"
    STAGNATION = "stagnation"


@dataclass(frozen=True, eq=False)
class PeriodicDensity:
    """N uniform samples of a strictly positive density on [0, 1)"""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise DomainError("density must be a non-empty one-dimensional array")
        bad = np.flatnonzero(~np.isfinite(values) | (values <= 0.0))
        if bad.size:
            index = int(bad[0])
            raise DomainError(f"density sample {index} is not positive: {values[index]!r}")
        mass = math.fsum(values) / values.size
        low = np.flatnonzero(values / mass < DENSITY_FLOOR)
        if low.size:
            index = int(low[0])
            raise DomainError(
                f"density sample {index} falls below the floor {DENSITY_FLOOR:g} after normalization"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, func: Callable[[np.ndarray], np.ndarray], n: int) -> "PeriodicDensity":
        """Sample func on the grid tau_i = i / n"""
        grid = np.arange(n) / n
        return cls(np.broadcast_to(np.asarray(func(grid), dtype=float), (n,)))

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def h(self) -> float:
        return 1.0 / self.values.size

    @property
    def mass(self) -> float:
        return math.fsum(self.values) / self.values.size

    def normalized(self) -> "PeriodicDensity":
        return PeriodicDensity(self.values / self.mass)

    def digest(self) -> str:
        return hashlib.sha1(self.values.tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class CdfTable:
    """
    Lifted piecewise-linear CDF of a staggered piecewise-constant density.

    Knots t_i = (2i - 1) h / 2 for i = -n .. 2n + 1 cover [-1, 2]. Segment
    [t_i, t_{i+1}) carries slope f_{i mod n}; values hold F at the knots.
    """
    knots: np.ndarray
    slopes: np.ndarray
    values: np.ndarray
    n: int
    mass: float

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def cdf(self, t) -> np.ndarray:
        """F_h(t) for any real t, using F(t + 1) = F(t) + 1"""
        t = np.asarray(t, dtype=float)
        shift = np.floor(t)
        local = t - shift
        p = np.clip(np.searchsorted(self.knots, local, side="right") - 1, 0, self.slopes.size - 1)
        return self.values[p] + self.slopes[p] * (local - self.knots[p]) + shift

    def inverse(self, y) -> np.ndarray:
        """F_h^{-1}(y) for any real y"""
        y = np.asarray(y, dtype=float)
        shift = np.floor(y)
        local = y - shift
        p = np.clip(np.searchsorted(self.values, local, side="right") - 1, 0, self.slopes.size - 1)
        return self.knots[p] + (local - self.values[p]) / self.slopes[p] + shift


@dataclass(frozen=True, eq=False)
class TransportMap:
    """T(t) = G^{-1}(F(t) - alpha*) on the lifted line"""
    source: CdfTable
    target: CdfTable
    alpha_star: float

    def __call__(self, t) -> np.ndarray:
        return self.target.inverse(self.source.cdf(t) - self.alpha_star)


@dataclass(frozen=True, eq=False)
class PotentialGrid:
    """Kantorovich potential averaged over the cells around tau_i = i / n, zero grid mean"""
    values: np.ndarray
    constant: float

    @property
    def n(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True, eq=False)
class DiscreteSamplePoints:
    """Two sets of n equal-mass atoms on [0, 1)"""
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.sort(np.mod(np.asarray(self.x, dtype=float), 1.0))
        y = np.sort(np.mod(np.asarray(self.y, dtype=float), 1.0))
        if x.shape != y.shape or x.ndim != 1:
            raise UsageError("sample sets must have the same number of atoms")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return int(self.x.size)


@dataclass(frozen=True, eq=False)
class DiskMesh:
    """P1 triangulation of the unit disk with an angle-ordered boundary"""
    nodes: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    areas: np.ndarray
    boundary_edge_lengths: np.ndarray
    refinement: int
    # Filled lazily by the FEM service (assembled operators, factorizations)
    operator_cache: Dict[str, object] = field(default_factory=dict, repr=False)

    @property
    def mesh_id(self) -> str:
        return f"polar-r{self.refinement}-n{self.n_nodes}"

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def n_boundary(self) -> int:
        return int(self.boundary.size)

    @cached_property
    def boundary_angles(self) -> np.ndarray:
        xy = self.nodes[self.boundary]
        return np.mod(np.arctan2(xy[:, 1], xy[:, 0]), 2.0 * np.pi)

    @cached_property
    def boundary_weights(self) -> np.ndarray:
        """Trapezoidal arclength weight of each boundary node"""
        lengths = self.boundary_edge_lengths
        return 0.5 * (lengths + np.roll(lengths, 1))

    @cached_property
    def interior(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary] = False
        return np.flatnonzero(mask)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the three hat functions per triangle, shape (m, 3, 2)"""
        p = self.nodes[self.triangles]
        x, y = p[:, :, 0], p[:, :, 1]
        twice_area = 2.0 * self.areas
        grads = np.empty((self.n_triangles, 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            grads[:, i, 0] = (y[:, j] - y[:, k]) / twice_area
            grads[:, i, 1] = (x[:, k] - x[:, j]) / twice_area
        return grads

    @cached_property
    def nodal_areas(self) -> np.ndarray:
        """Lumped mass: one third of the area of every incident triangle"""
        return np.bincount(
            self.triangles.ravel(), weights=np.repeat(self.areas / 3.0, 3), minlength=self.n_nodes
        )


@dataclass(frozen=True, eq=False)
class NodalField:
    """One real coefficient per mesh node"""
    values: np.ndarray
    role: FieldRole
    mesh_id: str
    bounds: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1:
            raise DomainError("nodal field must be one-dimensional")
        if self.bounds is not None:
            low, high = self.bounds
            outside = np.flatnonzero((values < low) | (values > high))
            if outside.size:
                index = int(outside[0])
                raise DomainError(
                    f"{self.role.value} value {values[index]!r} at node {index} outside [{low}, {high}]"
                )
        object.__setattr__(self, "values", values)

    def check_mesh(self, mesh: DiskMesh) -> None:
        if self.mesh_id != mesh.mesh_id or self.values.size != mesh.n_nodes:
            raise UsageError(f"{self.role.value} field belongs to {self.mesh_id}, not {mesh.mesh_id}")


@dataclass(frozen=True, eq=False)
class BoundaryFunction:
    """Values on the ordered boundary nodes with their arclength weights"""
    values: np.ndarray
    weights: np.ndarray
    label: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != np.shape(self.weights):
            raise UsageError("boundary values and weights differ in length")
        object.__setattr__(self, "values", values)

    @property
    def length(self) -> float:
        return float(self.weights.sum())

    def mean(self) -> float:
        return float(np.dot(self.weights, self.values) / self.weights.sum())

    def zero_mean(self) -> "BoundaryFunction":
        return replace(self, values=self.values - self.mean())

    def inner(self, other: "BoundaryFunction") -> float:
        return float(np.sum(self.weights * self.values * other.values))

    def norm(self) -> float:
        return math.sqrt(self.inner(self))

    def with_values(self, values: np.ndarray, label: Optional[str] = None) -> "BoundaryFunction":
        return BoundaryFunction(values, self.weights, self.label if label is None else label)


@dataclass(frozen=True)
class CurrentBasis:
    """Trigonometric current patterns sin(n theta), cos(n theta)"""
    patterns: List[BoundaryFunction]
    modes: List[Tuple[str, int]]
    mesh_id: str

    def __len__(self) -> int:
        return len(self.patterns)

    @property
    def labels(self) -> List[str]:
        return [f"{kind}{order}" for kind, order in self.modes]


@dataclass(frozen=True)
class MeasurementSet:
    """Measured boundary voltages, one trace per current pattern"""
    traces: List[BoundaryFunction]
    clean: List[BoundaryFunction]
    eps: float
    seed: int
    mesh_id: str
    prng: str = "PCG64"


@dataclass(frozen=True, eq=False)
class ObjectiveEvaluation:
    """Objective value and gradients at one conductivity"""
    kind: MisfitKind
    value: float
    misfit: float
    regularization: float
    raw_gradient: NodalField
    gradient: NodalField
    # Sobolev gradient of the misfit part alone, used by the proximal step
    misfit_gradient: np.ndarray
    pattern_values: List[float] = field(default_factory=list)


@dataclass
class InversionRun:
    """History of one Barzilai-Borwein reconstruction"""
    config: "InversionConfig"
    mesh_id: str
    sigma_history: List[np.ndarray] = field(default_factory=list)
    records: List["IterationRecord"] = field(default_factory=list)
    initial_objective: float = float("nan")
    stop_reason: StopReason = StopReason.MAX_ITERATIONS

    @property
    def final_sigma(self) -> np.ndarray:
        return self.sigma_history[-1]

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def objective_trace(self) -> List[float]:
        return [self.initial_objective] + [record.objective for record in self.records]
