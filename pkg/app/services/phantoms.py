"""Piecewise-constant conductivity phantoms on the unit disk"""
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Tuple

import numpy as np

from app.exceptions import UsageError
from app.models import DiskMesh, FieldRole, NodalField

# Nodes this close to an inclusion boundary get half weight
INTERFACE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Inclusion:
    """Ellipse {((x', y') / axes) in the unit disk} rotated by angle about its centre"""
    center: Tuple[float, float]
    axes: Tuple[float, float]
    value: float
    angle: float = 0.0
    transition: float = 0.0

    @classmethod
    def disk(cls, center: Tuple[float, float], radius: float, value: float, transition: float = 0.0):
        return cls(center=center, axes=(radius, radius), value=value, transition=transition)

    def level(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Normalized radius: < 1 inside, 1 on the boundary"""
        dx, dy = x - self.center[0], y - self.center[1]
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (c * dx + s * dy) / self.axes[0]
        v = (-s * dx + c * dy) / self.axes[1]
        return np.sqrt(u * u + v * v)

    def weight(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Fraction of the inclusion value present at each point"""
        rho = self.level(x, y)
        if self.transition > 0.0:
            return np.clip(0.5 + (1.0 - rho) / self.transition, 0.0, 1.0)
        weight = (rho < 1.0).astype(float)
        weight[np.abs(rho - 1.0) <= INTERFACE_TOLERANCE] = 0.5
        return weight


@dataclass(frozen=True)
class Phantom:
    """Background conductivity with inclusions"""
    name: str
    inclusions: List[Inclusion]
    background: float = 1.0

    def conductivity(self, mesh: DiskMesh) -> NodalField:
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        values = np.full(mesh.n_nodes, self.background)
        for inclusion in self.inclusions:
            values += inclusion.weight(x, y) * (inclusion.value - self.background)
        return NodalField(values, FieldRole.CONDUCTIVITY, mesh.mesh_id)

    def inclusion_mask(self, mesh: DiskMesh) -> np.ndarray:
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        mask = np.zeros(mesh.n_nodes, dtype=bool)
        for inclusion in self.inclusions:
            mask |= inclusion.weight(x, y) >= 0.5
        return mask

    def with_transition(self, transition: float) -> "Phantom":
        return replace(self, inclusions=[replace(i, transition=transition) for i in self.inclusions])


def polar_center(radius: float, angle: float) -> Tuple[float, float]:
    return radius * math.cos(angle), radius * math.sin(angle)


PHANTOMS: Dict[str, Phantom] = {
    "constant": Phantom(name="constant", inclusions=[]),
    "offset_disk": Phantom(
        name="offset_disk",
        inclusions=[Inclusion.disk((-0.3, 0.3), 0.35, 2.0)],
    ),
    "vertical_ellipse": Phantom(
        name="vertical_ellipse",
        inclusions=[Inclusion(center=(0.0, 0.5), axes=(0.2, 0.4), value=2.0)],
    ),
    # Approximate layout: one resistive region above two conductive ones
    "chest_phantom": Phantom(
        name="chest_phantom",
        inclusions=[
            Inclusion(center=(0.0, 0.45), axes=(0.35, 0.2), value=0.5),
            Inclusion(center=(-0.4, -0.25), axes=(0.2, 0.3), value=2.0),
            Inclusion(center=(0.4, -0.25), axes=(0.2, 0.3), value=2.0),
        ],
    ),
    "polar_disk": Phantom(
        name="polar_disk",
        inclusions=[Inclusion.disk(polar_center(0.5, 0.75 * math.pi), 0.22, 2.0)],
    ),
}


def get_phantom(name: str) -> Phantom:
    try:
        return PHANTOMS[name]
    except KeyError:
        raise UsageError(f"unknown phantom '{name}', expected one of {sorted(PHANTOMS)}") from None
