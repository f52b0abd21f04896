"""
P1 finite elements on the unit disk for the Neumann conductivity problem.

    -div(sigma grad u) = 0 in the disk,   sigma du/dn = j on the circle,

with the boundary mean of u fixed to zero through a scalar Lagrange
multiplier. Conductivity is nodal and averaged per triangle.
"""
import logging
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from app.exceptions import DomainError, SolverError, UsageError
from app.models import BoundaryFunction, DiskMesh, FieldRole, NodalField

logger = logging.getLogger(__name__)

# Rings of the coarsest mesh; each refinement doubles the ring count
BASE_RINGS = 10
RESIDUAL_TOLERANCE = 1e-10
ZERO_MEAN_TOLERANCE = 1e-9


def _ring_start(k: int) -> int:
    """Index of the first node of ring k (ring 0 is the centre)"""
    return 0 if k == 0 else 1 + 3 * k * (k - 1)


def _zip_rings(inner: np.ndarray, outer: np.ndarray) -> List[List[int]]:
    """Triangulate the annulus between two closed node rings sharing angle 0"""
    na, nb = inner.size, outer.size
    triangles = []
    ai = bi = 0
    while ai < na or bi < nb:
        if bi < nb and (ai == na or (bi + 1) * na <= (ai + 1) * nb):
            triangles.append([inner[ai % na], outer[bi], outer[(bi + 1) % nb]])
            bi += 1
        else:
            triangles.append([inner[ai % na], outer[bi % nb], inner[(ai + 1) % na]])
            ai += 1
    return triangles


def _element_matrices(mesh: DiskMesh, weights: np.ndarray) -> sp.csc_matrix:
    """Assemble sum_T weights_T * area_T * grad(phi_i) . grad(phi_j)"""
    grads = mesh.basis_gradients
    local = np.einsum("tid,tjd->tij", grads, grads) * (weights * mesh.areas)[:, None, None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsc()


def _cached(mesh: DiskMesh, key: str, build):
    if key not in mesh.operator_cache:
        mesh.operator_cache[key] = build()
    return mesh.operator_cache[key]


class NeumannSolver:
    """
    Factorization of the constrained Neumann system for one conductivity.

    The saddle matrix [[K(sigma), w], [w^T, 0]] is factored once and reused
    for every forward and adjoint solve with this sigma.
    """

    def __init__(self, mesh: DiskMesh, sigma: NodalField):
        sigma.check_mesh(mesh)
        if np.any(sigma.values <= 0.0):
            index = int(np.flatnonzero(sigma.values <= 0.0)[0])
            raise DomainError(f"conductivity must be positive, node {index} has {sigma.values[index]!r}")
        self.mesh = mesh
        self.sigma = sigma
        self.stiffness = DiskFEMService.stiffness_matrix(mesh, sigma.values)

        constraint = np.zeros(mesh.n_nodes)
        constraint[mesh.boundary] = mesh.boundary_weights
        border = sp.csc_matrix(constraint[:, None])
        self.system = sp.bmat([[self.stiffness, border], [border.T, None]], format="csc")
        try:
            self._lu = splu(self.system)
        except RuntimeError as e:
            raise SolverError(f"factorization of the Neumann system failed: {e}") from e

    def solve(self, current: BoundaryFunction, pattern_index: Optional[int] = None) -> NodalField:
        mesh = self.mesh
        if current.values.size != mesh.n_boundary:
            raise UsageError(
                f"current has {current.values.size} values, mesh has {mesh.n_boundary} boundary nodes"
            )
        rhs = np.zeros(mesh.n_nodes + 1)
        rhs[mesh.boundary] = mesh.boundary_weights * current.values
        solution = self._lu.solve(rhs)
        if not np.all(np.isfinite(solution)):
            raise SolverError("Neumann solve produced non-finite values", pattern_index)
        residual = np.linalg.norm(self.system @ solution - rhs)
        scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
        if residual > RESIDUAL_TOLERANCE * scale:
            raise SolverError(f"relative residual {residual / scale:.3e} above tolerance", pattern_index)
        return NodalField(solution[:-1], FieldRole.POTENTIAL, mesh.mesh_id)


class DiskFEMService:
    """Service class for the finite-element model on the unit disk"""

    @staticmethod
    def generate_disk_mesh(refinement: int) -> DiskMesh:
        """
        Structured polar mesh with R = 10 * 2^(refinement - 1) rings.

        Ring k has 6k equally spaced nodes starting at angle 0, the centre is
        fanned, and neighbouring rings are zipped by angle. The mesh has 6 R^2
        triangles and its node set contains that of the previous refinement.
        """
        if refinement < 1:
            raise DomainError(f"refinement must be at least 1, got {refinement}")
        rings = BASE_RINGS * 2 ** (refinement - 1)

        points = [np.zeros((1, 2))]
        for k in range(1, rings + 1):
            angles = 2.0 * np.pi * np.arange(6 * k) / (6 * k)
            points.append((k / rings) * np.column_stack((np.cos(angles), np.sin(angles))))
        nodes = np.vstack(points)

        triangles = []
        for k in range(1, rings + 1):
            outer = _ring_start(k) + np.arange(6 * k)
            if k == 1:
                triangles.extend([0, outer[j], outer[(j + 1) % 6]] for j in range(6))
            else:
                inner = _ring_start(k - 1) + np.arange(6 * (k - 1))
                triangles.extend(_zip_rings(inner, outer))
        triangles = np.asarray(triangles, dtype=np.int64)

        p = nodes[triangles]
        signed = 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )
        flip = signed < 0.0
        triangles[flip] = triangles[flip][:, [0, 2, 1]]

        boundary = _ring_start(rings) + np.arange(6 * rings)
        edge = np.linalg.norm(nodes[np.roll(boundary, -1)] - nodes[boundary], axis=1)
        mesh = DiskMesh(
            nodes=nodes,
            triangles=triangles,
            boundary=boundary,
            areas=np.abs(signed),
            boundary_edge_lengths=edge,
            refinement=refinement,
        )
        logger.info(
            "Built mesh %s: %d nodes, %d triangles, %d boundary nodes",
            mesh.mesh_id, mesh.n_nodes, mesh.n_triangles, mesh.n_boundary,
        )
        return mesh

    @staticmethod
    def stiffness_matrix(mesh: DiskMesh, sigma_values: np.ndarray) -> sp.csc_matrix:
        """K(sigma) with sigma averaged over each triangle's vertices"""
        return _element_matrices(mesh, sigma_values[mesh.triangles].mean(axis=1))

    @staticmethod
    def laplacian(mesh: DiskMesh) -> sp.csc_matrix:
        return _cached(mesh, "laplacian", lambda: _element_matrices(mesh, np.ones(mesh.n_triangles)))

    @staticmethod
    def mass_matrix(mesh: DiskMesh) -> sp.csc_matrix:
        """Consistent P1 mass matrix"""

        def build():
            local = np.full((3, 3), 1.0 / 12.0) + np.eye(3) / 12.0
            data = (mesh.areas[:, None, None] * local[None, :, :]).ravel()
            rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
            cols = np.tile(mesh.triangles, (1, 3)).ravel()
            return sp.coo_matrix((data, (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsc()

        return _cached(mesh, "mass", build)

    @staticmethod
    def h1_matrix(mesh: DiskMesh) -> sp.csc_matrix:
        return _cached(mesh, "h1", lambda: DiskFEMService.laplacian(mesh) + DiskFEMService.mass_matrix(mesh))

    @staticmethod
    def h1_inner(mesh: DiskMesh, a: np.ndarray, b: np.ndarray) -> float:
        return float(a @ (DiskFEMService.h1_matrix(mesh) @ b))

    @staticmethod
    def l2_inner(mesh: DiskMesh, a: np.ndarray, b: np.ndarray) -> float:
        """Lumped L2 pairing of two nodal fields"""
        return float(np.sum(mesh.nodal_areas * a * b))

    @staticmethod
    def solve_forward(mesh: DiskMesh, sigma: NodalField, j: BoundaryFunction) -> NodalField:
        """Potential u for the current density j, with zero boundary mean"""
        tolerance = ZERO_MEAN_TOLERANCE * max(1.0, float(np.max(np.abs(j.values), initial=0.0)))
        if abs(j.mean()) > tolerance:
            raise DomainError(f"current must have zero boundary mean, got {j.mean():.3e}")
        return NeumannSolver(mesh, sigma).solve(j)

    @staticmethod
    def boundary_trace(mesh: DiskMesh, u: NodalField) -> BoundaryFunction:
        """Boundary values of u in angle order, mean-subtracted"""
        u.check_mesh(mesh)
        return BoundaryFunction(u.values[mesh.boundary], mesh.boundary_weights).zero_mean()

    @staticmethod
    def triangle_gradient_products(mesh: DiskMesh, u: np.ndarray, u_tilde: np.ndarray) -> np.ndarray:
        """grad(u_tilde) . grad(u) on every triangle"""
        grads = mesh.basis_gradients
        grad_u = np.einsum("tid,ti->td", grads, u[mesh.triangles])
        grad_t = np.einsum("tid,ti->td", grads, u_tilde[mesh.triangles])
        return np.sum(grad_u * grad_t, axis=1)

    @staticmethod
    def lump_to_nodes(mesh: DiskMesh, per_triangle: np.ndarray) -> np.ndarray:
        """Area-weighted average of triangle values at each node"""
        weighted = np.repeat(mesh.areas * per_triangle / 3.0, 3)
        return np.bincount(mesh.triangles.ravel(), weights=weighted, minlength=mesh.n_nodes) / mesh.nodal_areas

    @staticmethod
    def adjoint_gradient_density(mesh: DiskMesh, u: NodalField, u_tilde: NodalField) -> NodalField:
        """Nodal lumping of -grad(u_tilde) . grad(u)"""
        u.check_mesh(mesh)
        u_tilde.check_mesh(mesh)
        product = DiskFEMService.triangle_gradient_products(mesh, u.values, u_tilde.values)
        return NodalField(
            -DiskFEMService.lump_to_nodes(mesh, product), FieldRole.GRADIENT_DENSITY, mesh.mesh_id
        )

    @staticmethod
    def sobolev_smooth(mesh: DiskMesh, g: NodalField) -> NodalField:
        """Solve (-Laplace + 1) g_s = g with g_s = 0 on the boundary"""
        g.check_mesh(mesh)
        interior = mesh.interior

        def factor():
            block = DiskFEMService.h1_matrix(mesh)[interior][:, interior].tocsc()
            try:
                return splu(block)
            except RuntimeError as e:
                raise SolverError(f"factorization of the Sobolev operator failed: {e}") from e

        lu = _cached(mesh, "sobolev_lu", factor)
        rhs = (mesh.nodal_areas * g.values)[interior]
        smoothed = np.zeros(mesh.n_nodes)
        smoothed[interior] = lu.solve(rhs)
        if not np.all(np.isfinite(smoothed)):
            raise SolverError("Sobolev smoothing produced non-finite values")
        return NodalField(smoothed, FieldRole.GRADIENT_DENSITY, mesh.mesh_id)

    @staticmethod
    def restrict_to_mesh(fine: DiskMesh, coarse: DiskMesh, field: NodalField) -> NodalField:
        """Transfer nodal values to a mesh whose nodes are a subset of fine's"""
        field.check_mesh(fine)
        distance, index = cKDTree(fine.nodes).query(coarse.nodes)
        if distance.max() > 1e-9:
            raise UsageError(f"{coarse.mesh_id} is not nested in {fine.mesh_id}")
        return NodalField(field.values[index], field.role, coarse.mesh_id, field.bounds)

    @staticmethod
    def interpolate_field(mesh: DiskMesh, func) -> np.ndarray:
        """Nodal interpolant of func(x, y)"""
        return np.asarray(func(mesh.nodes[:, 0], mesh.nodes[:, 1]), dtype=float) * np.ones(mesh.n_nodes)
