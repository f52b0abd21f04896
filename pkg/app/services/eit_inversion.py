"""
Adjoint-state EIT reconstruction with a W2 or L2 boundary misfit.

The objective sums one boundary misfit per current pattern. Its gradient
needs one forward and one adjoint Neumann solve per pattern, both served by
the same factorization, followed by a Sobolev smoothing step. The optimizer
is a nonmonotone Barzilai-Borwein iteration with H1 step quantities.
"""
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import DomainError, NormalizationRangeError, UsageError
from app.models import (
    DENSITY_FLOOR,
    BoundaryFunction,
    CurrentBasis,
    DiskMesh,
    FieldRole,
    InversionRun,
    MeasurementSet,
    MisfitKind,
    NodalField,
    NormalizationMode,
    ObjectiveEvaluation,
    PeriodicDensity,
    StopReason,
)
from app.schemas import InversionConfig, IterationRecord, LandscapePoint
from app.services.circle_ot import CircleTransportService
from app.services.fem_disk import DiskFEMService, NeumannSolver
from app.services.phantoms import Inclusion, Phantom

logger = logging.getLogger(__name__)

# Halvings allowed inside one projected-gradient step of the TV proximal problem
PROXY_HALVINGS = 30

LANDSCAPE_RADII = tuple(0.05 * k for k in range(1, 12))
LANDSCAPE_ANGLES = tuple(2.0 * np.pi * k / 16 for k in range(16))


def _periodic_interp(angles: np.ndarray, source_angles: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.interp(angles, source_angles, values, period=2.0 * np.pi)


class EITInversionService:
    """Service class for EIT data synthesis, objectives and reconstruction"""

    # Currents and data

    @staticmethod
    def make_currents(mesh: DiskMesh, n_max: int) -> CurrentBasis:
        """Patterns sin(n theta), cos(n theta) for n = 1..n_max, zero boundary mean"""
        if n_max < 1:
            raise DomainError(f"n_max must be at least 1, got {n_max}")
        theta = mesh.boundary_angles
        patterns, modes = [], []
        for order in range(1, n_max + 1):
            for kind, func in (("sin", np.sin), ("cos", np.cos)):
                current = BoundaryFunction(func(order * theta), mesh.boundary_weights, f"{kind}{order}")
                patterns.append(current.zero_mean())
                modes.append((kind, order))
        return CurrentBasis(patterns=patterns, modes=modes, mesh_id=mesh.mesh_id)

    @staticmethod
    def synthesize_data(
        sigma_true: NodalField,
        basis: CurrentBasis,
        eps: float,
        seed: int,
        mesh: DiskMesh,
        data_mesh: Optional[DiskMesh] = None,
    ) -> MeasurementSet:
        """
        Boundary voltages for sigma_true, optionally computed on a finer mesh.

        Traces from the data mesh are interpolated in angle onto the
        inversion boundary and mean-subtracted. Noise is iid Gaussian per
        boundary node and pattern with standard deviation
        eps * max_k ||phi_k||_inf, drawn from one PCG64 generator.
        """
        if basis.mesh_id != mesh.mesh_id:
            raise UsageError(f"current basis belongs to {basis.mesh_id}, not {mesh.mesh_id}")
        if eps < 0.0:
            raise DomainError(f"noise level must be non-negative, got {eps!r}")
        source_mesh = data_mesh or mesh
        solver = NeumannSolver(source_mesh, sigma_true)
        source_basis = (
            basis if source_mesh is mesh
            else EITInversionService.make_currents(source_mesh, max(order for _, order in basis.modes))
        )
        clean = []
        for index, label in enumerate(basis.labels):
            current = source_basis.patterns[source_basis.labels.index(label)]
            trace = DiskFEMService.boundary_trace(source_mesh, solver.solve(current, index))
            if source_mesh is not mesh:
                values = _periodic_interp(mesh.boundary_angles, source_mesh.boundary_angles, trace.values)
                trace = BoundaryFunction(values, mesh.boundary_weights)
            clean.append(BoundaryFunction(trace.values - trace.mean(), mesh.boundary_weights, label))

        if eps == 0.0:
            noisy = [trace.with_values(trace.values.copy()) for trace in clean]
        else:
            scale = eps * max(float(np.max(np.abs(trace.values))) for trace in clean)
            rng = np.random.default_rng(seed)
            noisy = [
                trace.with_values(trace.values + scale * rng.standard_normal(trace.values.size))
                for trace in clean
            ]
        logger.info(
            "Synthesized %d traces on %s from %s (eps=%g, seed=%d)",
            len(clean), mesh.mesh_id, source_mesh.mesh_id, eps, seed,
        )
        return MeasurementSet(traces=noisy, clean=clean, eps=eps, seed=seed, mesh_id=mesh.mesh_id)

    @staticmethod
    def noise_scale(data: MeasurementSet) -> float:
        return data.eps * max(float(np.max(np.abs(trace.values))) for trace in data.clean)

    # Misfits

    @staticmethod
    def normalize_trace(phi: BoundaryFunction, a: float) -> PeriodicDensity:
        """Density phi / a + 1 on t = theta / 2 pi after removing the boundary mean"""
        if a <= 0.0:
            raise DomainError(f"normalization constant must be positive, got {a!r}")
        density = (phi.values - phi.mean()) / a + 1.0
        low = int(density.argmin())
        if density[low] < DENSITY_FLOOR:
            raise NormalizationRangeError(
                f"normalized trace is {density[low]:.3e} at boundary node {low}; increase a (now {a:g})"
            )
        return PeriodicDensity(density)

    @staticmethod
    def normalization_constant(phi: BoundaryFunction, cfg: InversionConfig) -> float:
        if cfg.normalization == NormalizationMode.RANGE:
            return max(cfg.a, cfg.a_range_factor * float(np.max(np.abs(phi.values - phi.mean()))))
        return cfg.a

    @staticmethod
    def misfit_and_boundary_gradient(
        u: BoundaryFunction,
        phi: BoundaryFunction,
        cfg: InversionConfig,
        kind: Optional[MisfitKind] = None,
    ) -> Tuple[float, BoundaryFunction]:
        """
        Misfit value and its gradient with respect to u in the weighted
        boundary inner product. The gradient always has zero boundary mean.
        """
        kind = kind or cfg.misfit
        if kind == MisfitKind.L2:
            residual = u.with_values(u.values - phi.values).zero_mean()
            return 0.5 * residual.inner(residual), residual

        a = EITInversionService.normalization_constant(phi, cfg)
        f = EITInversionService.normalize_trace(u, a)
        g = EITInversionService.normalize_trace(phi, a)
        solution = CircleTransportService.w2_circle(f, g, cfg.newton_eps)
        potential = CircleTransportService.kantorovich_potential(f, g, solution)
        gradient = u.with_values(potential.values * f.h / (a * u.weights)).zero_mean()
        return solution.w2_squared, gradient

    @staticmethod
    def misfit_value(u: BoundaryFunction, phi: BoundaryFunction, cfg: InversionConfig, kind: MisfitKind) -> float:
        if kind == MisfitKind.L2:
            residual = u.with_values(u.values - phi.values).zero_mean()
            return 0.5 * residual.inner(residual)
        a = EITInversionService.normalization_constant(phi, cfg)
        f = EITInversionService.normalize_trace(u, a)
        g = EITInversionService.normalize_trace(phi, a)
        return CircleTransportService.w2_circle(f, g, cfg.newton_eps).w2_squared

    # Regularization

    @staticmethod
    def total_variation(mesh: DiskMesh, sigma: np.ndarray, kappa: float) -> Tuple[float, np.ndarray]:
        """Smoothed TV sum_T area sqrt(|grad sigma|^2 + kappa^2) and its nodal derivative"""
        grads = mesh.basis_gradients
        grad_sigma = np.einsum("tid,ti->td", grads, sigma[mesh.triangles])
        magnitude = np.sqrt(np.sum(grad_sigma ** 2, axis=1) + kappa ** 2)
        value = float(np.sum(mesh.areas * magnitude))
        coefficient = (mesh.areas / magnitude)[:, None]
        local = np.einsum("td,tid->ti", grad_sigma, grads) * coefficient
        derivative = np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)
        return value, derivative

    # Objective

    @staticmethod
    def objective_and_gradient(
        sigma: NodalField,
        data: MeasurementSet,
        basis: CurrentBasis,
        cfg: InversionConfig,
        mesh: DiskMesh,
        kind: Optional[MisfitKind] = None,
    ) -> ObjectiveEvaluation:
        """
        J(sigma) = sum_n D(Lambda(sigma) j_n, phi_n) + beta R(sigma).

        The raw gradient is the lumped nodal density paired with perturbations
        through the lumped L2 product; the returned gradient is its Sobolev
        smoothing and vanishes on the boundary.
        """
        kind = kind or cfg.misfit
        if data.mesh_id != mesh.mesh_id or basis.mesh_id != mesh.mesh_id:
            raise UsageError(f"data or currents do not belong to {mesh.mesh_id}")
        solver = NeumannSolver(mesh, sigma)
        products = np.zeros(mesh.n_triangles)
        pattern_values = []
        for index, (current, measured) in enumerate(zip(basis.patterns, data.traces)):
            u = solver.solve(current, index)
            trace = DiskFEMService.boundary_trace(mesh, u)
            try:
                value, boundary_gradient = EITInversionService.misfit_and_boundary_gradient(
                    trace, measured, cfg, kind
                )
            except NormalizationRangeError as e:
                raise NormalizationRangeError(f"pattern {index}: {e}") from e
            u_tilde = solver.solve(boundary_gradient, index)
            products += DiskFEMService.triangle_gradient_products(mesh, u.values, u_tilde.values)
            pattern_values.append(value)

        misfit = float(sum(pattern_values))
        misfit_raw = -DiskFEMService.lump_to_nodes(mesh, products)
        misfit_smooth = DiskFEMService.sobolev_smooth(
            mesh, NodalField(misfit_raw, FieldRole.GRADIENT_DENSITY, mesh.mesh_id)
        ).values

        regularization = 0.0
        raw = misfit_raw
        smooth = misfit_smooth
        if cfg.beta > 0.0:
            tv, tv_derivative = EITInversionService.total_variation(mesh, sigma.values, cfg.tv_kappa)
            regularization = cfg.beta * tv
            tv_density = cfg.beta * tv_derivative / mesh.nodal_areas
            raw = misfit_raw + tv_density
            smooth = misfit_smooth + DiskFEMService.sobolev_smooth(
                mesh, NodalField(tv_density, FieldRole.GRADIENT_DENSITY, mesh.mesh_id)
            ).values

        logger.debug("%s objective %.6e (misfit %.6e, regularization %.3e)",
                     kind.value, misfit + regularization, misfit, regularization)
        return ObjectiveEvaluation(
            kind=kind,
            value=misfit + regularization,
            misfit=misfit,
            regularization=regularization,
            raw_gradient=NodalField(raw, FieldRole.GRADIENT_DENSITY, mesh.mesh_id),
            gradient=NodalField(smooth, FieldRole.GRADIENT_DENSITY, mesh.mesh_id),
            misfit_gradient=misfit_smooth,
            pattern_values=pattern_values,
        )

    # Optimizer

    @staticmethod
    def proximal_step(
        mesh: DiskMesh,
        sigma: np.ndarray,
        evaluation: ObjectiveEvaluation,
        step: float,
        cfg: InversionConfig,
    ) -> np.ndarray:
        """
        Approximate argmin (1/2s)||x - gamma||_H1^2 + beta R(x) over c0 <= x <= c1,
        gamma = sigma - s * grad. Without regularization this is clipping.
        """
        gamma = sigma - step * evaluation.misfit_gradient
        candidate = np.clip(gamma, cfg.c0, cfg.c1)
        if cfg.beta == 0.0:
            return candidate

        def proxy_value(x: np.ndarray) -> float:
            diff = x - gamma
            tv, _ = EITInversionService.total_variation(mesh, x, cfg.tv_kappa)
            return DiskFEMService.h1_inner(mesh, diff, diff) / (2.0 * step) + cfg.beta * tv

        current = proxy_value(candidate)
        for _ in range(cfg.proxy_iterations):
            _, tv_derivative = EITInversionService.total_variation(mesh, candidate, cfg.tv_kappa)
            tv_direction = DiskFEMService.sobolev_smooth(
                mesh,
                NodalField(cfg.beta * tv_derivative / mesh.nodal_areas, FieldRole.GRADIENT_DENSITY, mesh.mesh_id),
            ).values
            direction = (candidate - gamma) / step + tv_direction
            length = step
            for _ in range(PROXY_HALVINGS):
                trial = np.clip(candidate - length * direction, cfg.c0, cfg.c1)
                trial_value = proxy_value(trial)
                if trial_value < current:
                    candidate, current = trial, trial_value
                    break
                length *= 0.5
            else:
                break
        return candidate

    @staticmethod
    def step_bounds(cfg: InversionConfig, objective: float) -> Tuple[float, float, float]:
        """s_min, s_max and s_stop in conductivity units for a phase starting at objective"""
        scale = objective if cfg.scale_steps and objective > 0.0 else 1.0
        return cfg.s_min / scale, cfg.s_max / scale, cfg.s_stop / scale

    @staticmethod
    def bb_invert(
        sigma0: NodalField,
        data: MeasurementSet,
        basis: CurrentBasis,
        cfg: InversionConfig,
        mesh: DiskMesh,
    ) -> InversionRun:
        """
        Nonmonotone Barzilai-Borwein descent.

        A trial sigma+ = prox(sigma - s grad) is accepted when
            Phi(sigma+) < max(last M values of Phi) - tau / (2 s) ||sigma+ - sigma||_H1^2,
        otherwise s shrinks by rho = (rho1 + rho2) / 2. After acceptance the
        next step is x / y clipped to [s_min, s_max], with x and y the H1
        products of the sigma and gradient differences.

        With cfg.scale_steps the bounds s_min, s_max and s_stop are divided
        by the objective value at the start of each misfit phase, so W2 and
        L2 phases see the same step range relative to their own scale.
        Recorded steps are always in conductivity units. A trial whose
        traces cannot be normalized counts as a rejected step.
        """
        sigma0.check_mesh(mesh)
        if np.any(sigma0.values < cfg.c0) or np.any(sigma0.values > cfg.c1):
            raise DomainError(f"initial conductivity outside [{cfg.c0}, {cfg.c1}]")

        def kind_at(iteration: int) -> MisfitKind:
            return MisfitKind.L2 if iteration < cfg.warm_start_m else cfg.misfit

        sigma = sigma0.values.copy()
        kind = kind_at(0)
        evaluation = EITInversionService.objective_and_gradient(sigma0, data, basis, cfg, mesh, kind)
        run = InversionRun(config=cfg, mesh_id=mesh.mesh_id, initial_objective=evaluation.value)
        run.sigma_history.append(sigma.copy())
        memory = deque([evaluation.value], maxlen=cfg.memory)
        s_min, s_max, s_stop = EITInversionService.step_bounds(cfg, evaluation.value)
        step = s_max
        logger.info("Starting %s inversion on %s, objective %.6e, steps in [%.3e, %.3e]",
                    kind.value, mesh.mesh_id, evaluation.value, s_min, s_max)

        for iteration in range(cfg.i_max):
            if kind_at(iteration) != kind:
                kind = kind_at(iteration)
                current = NodalField(sigma, FieldRole.CONDUCTIVITY, mesh.mesh_id)
                evaluation = EITInversionService.objective_and_gradient(current, data, basis, cfg, mesh, kind)
                memory = deque([evaluation.value], maxlen=cfg.memory)
                s_min, s_max, s_stop = EITInversionService.step_bounds(cfg, evaluation.value)
                step = s_max
                logger.info("Switched to %s misfit at iteration %d, objective %.6e",
                            kind.value, iteration, evaluation.value)

            reference = max(memory)
            backtracks = 0
            accepted = None
            while True:
                step *= cfg.rho
                if step <= s_stop:
                    run.stop_reason = StopReason.STEP_TOLERANCE
                    break
                trial = EITInversionService.proximal_step(mesh, sigma, evaluation, step, cfg)
                diff = trial - sigma
                norm_sq = DiskFEMService.h1_inner(mesh, diff, diff)
                try:
                    trial_evaluation = EITInversionService.objective_and_gradient(
                        NodalField(trial, FieldRole.CONDUCTIVITY, mesh.mesh_id), data, basis, cfg, mesh, kind
                    )
                except NormalizationRangeError as e:
                    logger.debug("Rejected step %.3e: %s", step, e)
                    trial_evaluation = None
                if (
                    trial_evaluation is not None
                    and trial_evaluation.value < reference - cfg.tau / (2.0 * step) * norm_sq
                ):
                    accepted = (trial, trial_evaluation, diff, norm_sq)
                    break
                backtracks += 1
                if backtracks >= cfg.max_backtracks:
                    run.stop_reason = StopReason.STAGNATION
                    break
            if accepted is None:
                break

            trial, trial_evaluation, diff, norm_sq = accepted
            run.records.append(
                IterationRecord(
                    iteration=iteration + 1,
                    misfit=kind,
                    objective=trial_evaluation.value,
                    reference=reference,
                    step=step,
                    step_norm_sq=norm_sq,
                    backtracks=backtracks,
                )
            )
            logger.info("iteration %d: objective %.6e, step %.3e, backtracks %d",
                        iteration + 1, trial_evaluation.value, step, backtracks)

            gradient_change = trial_evaluation.gradient.values - evaluation.gradient.values
            x = norm_sq
            y = DiskFEMService.h1_inner(mesh, diff, gradient_change)
            step = s_max if y <= 0.0 else float(np.clip(x / y, s_min, s_max))

            sigma = trial
            evaluation = trial_evaluation
            memory.append(evaluation.value)
            run.sigma_history.append(sigma.copy())
        else:
            run.stop_reason = StopReason.MAX_ITERATIONS

        logger.info("Inversion stopped after %d iterations (%s)", run.iterations, run.stop_reason.value)
        return run

    # Diagnostics

    @staticmethod
    def relative_error(mesh: DiskMesh, sigma: np.ndarray, truth: np.ndarray) -> float:
        """||sigma - truth|| / ||truth|| in the lumped L2(disk) norm"""
        diff = sigma - truth
        return float(np.sqrt(DiskFEMService.l2_inner(mesh, diff, diff) / DiskFEMService.l2_inner(mesh, truth, truth)))

    @staticmethod
    def inclusion_contrast(mesh: DiskMesh, sigma: np.ndarray, phantom: Phantom) -> float:
        """Area-weighted mean of sigma inside the inclusions minus the mean outside"""
        inside = phantom.inclusion_mask(mesh)
        if not inside.any() or inside.all():
            return 0.0
        weights = mesh.nodal_areas
        mean_in = np.average(sigma[inside], weights=weights[inside])
        mean_out = np.average(sigma[~inside], weights=weights[~inside])
        return float(mean_in - mean_out)

    @staticmethod
    def landscape_scan(
        inclusion: Inclusion,
        data: MeasurementSet,
        basis: CurrentBasis,
        cfg: InversionConfig,
        mesh: DiskMesh,
        radii: Sequence[float] = LANDSCAPE_RADII,
        angles: Sequence[float] = LANDSCAPE_ANGLES,
        workers: int = 1,
    ) -> List[LandscapePoint]:
        """
        Both misfits for the inclusion moved to every polar grid centre.

        The shape, value and transition of inclusion are kept; only its
        centre changes. Forward solves are shared by the two misfits.
        """
        candidates: Iterable[Tuple[float, float]] = [(r, t) for r in radii for t in angles]

        def evaluate(candidate: Tuple[float, float]) -> LandscapePoint:
            radius, angle = candidate
            center = (radius * np.cos(angle), radius * np.sin(angle))
            phantom = Phantom(name="candidate", inclusions=[Inclusion(
                center=center, axes=inclusion.axes, value=inclusion.value,
                angle=inclusion.angle, transition=inclusion.transition,
            )])
            solver = NeumannSolver(mesh, phantom.conductivity(mesh))
            totals = {MisfitKind.W2: 0.0, MisfitKind.L2: 0.0}
            for index, (current, measured) in enumerate(zip(basis.patterns, data.traces)):
                trace = DiskFEMService.boundary_trace(mesh, solver.solve(current, index))
                for kind in totals:
                    totals[kind] += EITInversionService.misfit_value(trace, measured, cfg, kind)
            return LandscapePoint(
                radius=radius, angle=angle, x=float(center[0]), y=float(center[1]),
                w2=totals[MisfitKind.W2], l2=totals[MisfitKind.L2],
            )

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            points = list(pool.map(evaluate, candidates))
        logger.info("Scanned %d candidate centres on %s", len(points), mesh.mesh_id)
        return points
