import numpy as np
import pytest
from scipy.special import i0

from app.exceptions import DomainError, UsageError
from app.models import BoundaryFunction, FieldRole, NodalField
from app.services.fem_disk import DiskFEMService as fem
from app.services.phantoms import Inclusion, Phantom


def conductivity(mesh, values):
    return NodalField(np.broadcast_to(values, (mesh.n_nodes,)), FieldRole.CONDUCTIVITY, mesh.mesh_id)


def potential(mesh, values):
    return NodalField(values, FieldRole.POTENTIAL, mesh.mesh_id)


def cosine_current(mesh, n):
    return BoundaryFunction(np.cos(n * mesh.boundary_angles), mesh.boundary_weights).zero_mean()


def boundary_error(mesh, trace, exact):
    """Relative weighted L2 error on the boundary"""
    difference = trace.values - exact
    return np.sqrt(np.sum(mesh.boundary_weights * difference ** 2) / np.sum(mesh.boundary_weights * exact ** 2))


def random_current(mesh, rng):
    return BoundaryFunction(rng.standard_normal(mesh.n_boundary), mesh.boundary_weights).zero_mean()


class TestMesh:
    """Polar disk triangulation"""

    def test_default_counts(self, default_mesh):
        assert default_mesh.n_triangles == 2400
        assert default_mesh.n_nodes == 1261
        assert default_mesh.n_boundary == 120
        assert default_mesh.mesh_id == "polar-r2-n1261"

    def test_refinement_quadruples_triangles(self, coarse_mesh, default_mesh, fine_mesh):
        assert default_mesh.n_triangles == 4 * coarse_mesh.n_triangles
        assert fine_mesh.n_triangles == 4 * default_mesh.n_triangles

    def test_rejects_zero_refinement(self):
        with pytest.raises(DomainError):
            fem.generate_disk_mesh(0)

    def test_positive_orientation_and_area(self, default_mesh):
        """All triangles are counterclockwise and fill the inscribed polygon"""
        p = default_mesh.nodes[default_mesh.triangles]
        signed = 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )
        assert np.all(signed > 0.0)
        nb = default_mesh.n_boundary
        polygon = 0.5 * nb * np.sin(2.0 * np.pi / nb)
        assert default_mesh.areas.sum() == pytest.approx(polygon, rel=1e-12)
        assert default_mesh.areas.sum() == pytest.approx(np.pi, rel=5e-3)

    def test_boundary_on_unit_circle(self, default_mesh):
        radii = np.linalg.norm(default_mesh.nodes[default_mesh.boundary], axis=1)
        np.testing.assert_allclose(radii, 1.0, atol=1e-12)
        assert np.all(np.diff(default_mesh.boundary_angles) > 0.0)
        assert default_mesh.boundary_angles[0] == pytest.approx(0.0, abs=1e-15)

    def test_minimum_angle(self, default_mesh):
        p = default_mesh.nodes[default_mesh.triangles]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cosine = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))))
        assert np.min(angles) >= 20.0

    def test_nested_meshes(self, default_mesh, fine_mesh):
        """Coarse nodes are fine nodes, so restriction is exact"""
        values = fem.interpolate_field(fine_mesh, lambda x, y: x ** 2 + y)
        restricted = fem.restrict_to_mesh(fine_mesh, default_mesh, potential(fine_mesh, values))
        expected = fem.interpolate_field(default_mesh, lambda x, y: x ** 2 + y)
        np.testing.assert_allclose(restricted.values, expected, atol=1e-12)
        assert restricted.mesh_id == default_mesh.mesh_id

    def test_restriction_needs_nesting(self, default_mesh, fine_mesh):
        with pytest.raises(UsageError):
            fem.restrict_to_mesh(default_mesh, fine_mesh, potential(default_mesh, np.zeros(default_mesh.n_nodes)))

    def test_deterministic(self, coarse_mesh):
        again = fem.generate_disk_mesh(1)
        np.testing.assert_array_equal(again.triangles, coarse_mesh.triangles)
        np.testing.assert_array_equal(again.nodes, coarse_mesh.nodes)


class TestOperators:
    """Assembled matrices"""

    def test_stiffness_annihilates_constants(self, default_mesh, rng):
        sigma = rng.uniform(0.5, 2.0, default_mesh.n_nodes)
        stiffness = fem.stiffness_matrix(default_mesh, sigma)
        np.testing.assert_allclose(stiffness @ np.ones(default_mesh.n_nodes), 0.0, atol=1e-10)
        assert abs(stiffness - stiffness.T).max() <= 1e-12

    def test_mass_matrix_integrates_one(self, default_mesh):
        ones = np.ones(default_mesh.n_nodes)
        assert fem.mass_matrix(default_mesh) @ ones @ ones == pytest.approx(default_mesh.areas.sum(), rel=1e-12)
        assert default_mesh.nodal_areas.sum() == pytest.approx(default_mesh.areas.sum(), rel=1e-12)

    def test_h1_inner_of_linear_function(self, default_mesh):
        """|x|_H1^2 = |grad x|^2 area + int x^2 over the polygon"""
        x = default_mesh.nodes[:, 0]
        value = fem.h1_inner(default_mesh, x, x)
        assert value == pytest.approx(np.pi + np.pi / 4.0, rel=1e-2)


class TestForward:
    """Neumann-to-Dirichlet map"""

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_homogeneous_disk(self, default_mesh, n):
        """sigma = 1 and j = cos(n theta) give the trace cos(n theta) / n"""
        u = fem.solve_forward(default_mesh, conductivity(default_mesh, 1.0), cosine_current(default_mesh, n))
        trace = fem.boundary_trace(default_mesh, u)
        exact = np.cos(n * default_mesh.boundary_angles) / n
        assert boundary_error(default_mesh, trace, exact) <= 0.01

    def test_sine_current_interior(self, default_mesh):
        """sin(theta) gives u = y throughout the disk"""
        current = BoundaryFunction(np.sin(default_mesh.boundary_angles), default_mesh.boundary_weights)
        u = fem.solve_forward(default_mesh, conductivity(default_mesh, 1.0), current)
        y = default_mesh.nodes[:, 1]
        assert np.max(np.abs(u.values - y)) <= 0.01

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_concentric_inclusion(self, default_mesh, n):
        """Centred disk of conductivity 2 and radius 1/2 matches the series solution"""
        rho, inner = 0.5, 2.0
        phantom = Phantom("concentric", [Inclusion.disk((0.0, 0.0), rho, inner)])
        sigma = phantom.conductivity(default_mesh)
        u = fem.solve_forward(default_mesh, sigma, cosine_current(default_mesh, n))
        trace = fem.boundary_trace(default_mesh, u)
        mu = (1.0 - inner) / (1.0 + inner)
        factor = (1.0 + mu * rho ** (2 * n)) / (1.0 - mu * rho ** (2 * n)) / n
        exact = factor * np.cos(n * default_mesh.boundary_angles)
        assert boundary_error(default_mesh, trace, exact) <= 0.02

    def test_second_order_convergence(self, coarse_mesh, default_mesh, fine_mesh):
        """Boundary error shrinks about fourfold per refinement"""
        errors = []
        for mesh in (coarse_mesh, default_mesh, fine_mesh):
            u = fem.solve_forward(mesh, conductivity(mesh, 1.0), cosine_current(mesh, 2))
            errors.append(boundary_error(mesh, fem.boundary_trace(mesh, u), np.cos(2 * mesh.boundary_angles) / 2))
        assert 3.3 <= errors[0] / errors[1] <= 4.8
        assert 3.3 <= errors[1] / errors[2] <= 4.8

    def test_zero_boundary_mean(self, default_mesh, rng):
        sigma = conductivity(default_mesh, rng.uniform(0.5, 2.0, default_mesh.n_nodes))
        u = fem.solve_forward(default_mesh, sigma, random_current(default_mesh, rng))
        assert abs(np.dot(default_mesh.boundary_weights, u.values[default_mesh.boundary])) <= 1e-10

    def test_rejects_current_with_mean(self, default_mesh):
        current = BoundaryFunction(np.ones(default_mesh.n_boundary), default_mesh.boundary_weights)
        with pytest.raises(DomainError):
            fem.solve_forward(default_mesh, conductivity(default_mesh, 1.0), current)

    def test_rejects_non_positive_conductivity(self, default_mesh):
        values = np.ones(default_mesh.n_nodes)
        values[17] = 0.0
        with pytest.raises(DomainError, match="node 17"):
            fem.solve_forward(default_mesh, conductivity(default_mesh, values), cosine_current(default_mesh, 1))

    def test_rejects_foreign_field(self, default_mesh, coarse_mesh):
        with pytest.raises(UsageError):
            fem.solve_forward(default_mesh, conductivity(coarse_mesh, 1.0), cosine_current(default_mesh, 1))

    def test_self_adjoint(self, default_mesh, rng):
        """<h, Lambda j> = <Lambda h, j>"""
        sigma = conductivity(default_mesh, rng.uniform(0.5, 2.0, default_mesh.n_nodes))
        j, h = random_current(default_mesh, rng), random_current(default_mesh, rng)
        lam_j = fem.boundary_trace(default_mesh, fem.solve_forward(default_mesh, sigma, j))
        lam_h = fem.boundary_trace(default_mesh, fem.solve_forward(default_mesh, sigma, h))
        assert h.inner(lam_j) == pytest.approx(lam_h.inner(j), rel=1e-8)

    def test_positive_definite(self, default_mesh, rng):
        sigma = conductivity(default_mesh, rng.uniform(0.5, 2.0, default_mesh.n_nodes))
        for _ in range(5):
            j = random_current(default_mesh, rng)
            assert j.inner(fem.boundary_trace(default_mesh, fem.solve_forward(default_mesh, sigma, j))) > 0.0


class TestAdjointDensity:
    """Nodal lumping of -grad(u_tilde) . grad(u)"""

    def test_zero_adjoint_state(self, default_mesh):
        u = potential(default_mesh, default_mesh.nodes[:, 0])
        zero = potential(default_mesh, np.zeros(default_mesh.n_nodes))
        np.testing.assert_allclose(fem.adjoint_gradient_density(default_mesh, u, zero).values, 0.0)

    def test_linear_potentials(self, default_mesh):
        """u = u_tilde = x gives -1 everywhere"""
        u = potential(default_mesh, default_mesh.nodes[:, 0])
        density = fem.adjoint_gradient_density(default_mesh, u, u)
        np.testing.assert_allclose(density.values, -1.0, atol=1e-12)
        assert density.role is FieldRole.GRADIENT_DENSITY

    def test_orthogonal_linear_potentials(self, default_mesh):
        u = potential(default_mesh, default_mesh.nodes[:, 0])
        v = potential(default_mesh, default_mesh.nodes[:, 1])
        np.testing.assert_allclose(fem.adjoint_gradient_density(default_mesh, u, v).values, 0.0, atol=1e-12)

    def test_energy_derivative(self, default_mesh, rng):
        """Derivative of <j, Lambda(sigma) j> in direction delta is the pairing with the density"""
        mesh = default_mesh
        sigma = rng.uniform(0.8, 1.5, mesh.n_nodes)
        delta = rng.uniform(-1.0, 1.0, mesh.n_nodes)
        j = cosine_current(mesh, 2)

        def energy(values):
            return j.inner(fem.boundary_trace(mesh, fem.solve_forward(mesh, conductivity(mesh, values), j)))

        epsilon = 1e-6
        numeric = (energy(sigma + epsilon * delta) - energy(sigma - epsilon * delta)) / (2.0 * epsilon)
        u = fem.solve_forward(mesh, conductivity(mesh, sigma), j)
        predicted = fem.l2_inner(mesh, fem.adjoint_gradient_density(mesh, u, u).values, delta)
        assert numeric == pytest.approx(predicted, rel=1e-6)


class TestSobolevSmoothing:
    """(-Laplace + 1) g_s = g with homogeneous Dirichlet data"""

    def test_zero_input(self, default_mesh):
        smoothed = fem.sobolev_smooth(default_mesh, NodalField(
            np.zeros(default_mesh.n_nodes), FieldRole.GRADIENT_DENSITY, default_mesh.mesh_id
        ))
        np.testing.assert_array_equal(smoothed.values, 0.0)

    def test_constant_input(self, default_mesh):
        """g = 1 gives 1 - I0(r) / I0(1), radial with its maximum at the centre"""
        mesh = default_mesh
        smoothed = fem.sobolev_smooth(mesh, NodalField(np.ones(mesh.n_nodes), FieldRole.GRADIENT_DENSITY, mesh.mesh_id))
        np.testing.assert_array_equal(smoothed.values[mesh.boundary], 0.0)
        assert smoothed.values[0] == pytest.approx(1.0 - 1.0 / i0(1.0), rel=0.01)
        assert smoothed.values.argmax() == 0

        radii = np.linalg.norm(mesh.nodes, axis=1)
        ring = np.isclose(radii, 0.5)
        assert np.ptp(smoothed.values[ring]) <= 0.02 * smoothed.values[ring].mean()
