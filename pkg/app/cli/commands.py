import argparse
import logging
import statistics
import time
from typing import List, Optional, Tuple

import numpy as np

from app.config import load_inversion_config, settings
from app.exceptions import UsageError, W2EITError
from app.models import DiskMesh, FieldRole, MeasurementSet, NodalField, PeriodicDensity
from app.schemas import BenchRow, InversionConfig, MeasurementHeader, RunSummary
from app.services.circle_ot import CircleTransportService
from app.services.eit_inversion import EITInversionService
from app.services.fem_disk import DiskFEMService
from app.services.ot_oracle import TransportOracle
from app.services.phantoms import Phantom, get_phantom
from app import storage

logger = logging.getLogger(__name__)

# Candidate inclusions in the landscape scan use this smoothing width
LANDSCAPE_TRANSITION = 0.05


def _fail(action: str, error: W2EITError) -> int:
    logger.error("Failed to %s: %s", action, error)
    return error.exit_code


def parse_sizes(text: str) -> List[int]:
    items = [item.strip() for item in text.split(",") if item.strip()]
    try:
        sizes = [int(item) for item in items]
    except ValueError:
        raise UsageError(f"sizes must be integers, got {text!r}") from None
    if not sizes:
        raise UsageError("at least one size is required")
    if any(n < 1 for n in sizes) or sizes != sorted(sizes):
        raise UsageError(f"sizes must be positive and ascending, got {sizes}")
    return sizes


def cmd_w2(args: argparse.Namespace) -> int:
    """Squared W2 distance between two density files"""
    try:
        f = storage.read_density_csv(args.f)
        g = storage.read_density_csv(args.g)
        if f.n != g.n:
            raise UsageError(f"densities have different sizes ({f.n} and {g.n})")
        solution = CircleTransportService.w2_circle(f, g, args.eps)
        if args.json_out:
            storage.write_model_json(args.json_out, solution)
    except W2EITError as e:
        return _fail("compute W2", e)
    print(f"w2_squared {storage.format_float(solution.w2_squared)}")
    print(f"alpha_star {storage.format_float(solution.alpha_star)}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference check of the Kantorovich potential"""
    try:
        f = storage.read_density_csv(args.f)
        g = storage.read_density_csv(args.g)
        if f.n != g.n:
            raise UsageError(f"densities have different sizes ({f.n} and {g.n})")
        report = TransportOracle.potential_gradient_check(
            f, g, args.samples, args.epsilon, np.random.default_rng(args.seed)
        )
    except W2EITError as e:
        return _fail("check gradient", e)
    print(f"max_relative_error {storage.format_float(report.max_relative_error)}")
    return 0


def cmd_mesh(args: argparse.Namespace) -> int:
    """Write nodes.csv, triangles.csv and boundary.csv"""
    try:
        mesh = DiskFEMService.generate_disk_mesh(args.refinement)
        with storage.atomic_output(args.out) as out:
            storage.write_mesh(out, mesh)
    except W2EITError as e:
        return _fail("write mesh", e)
    print(f"{mesh.mesh_id} nodes {mesh.n_nodes} triangles {mesh.n_triangles} boundary {mesh.n_boundary}")
    return 0


def _meshes(cfg: InversionConfig) -> Tuple[DiskMesh, DiskMesh]:
    """Inversion mesh and the refined mesh used for synthetic data"""
    return (
        DiskFEMService.generate_disk_mesh(cfg.refinement),
        DiskFEMService.generate_disk_mesh(cfg.refinement + 1),
    )


def _truth(
    args: argparse.Namespace, cfg: InversionConfig, mesh: DiskMesh, data_mesh: DiskMesh
) -> Tuple[NodalField, DiskMesh, Optional[Phantom]]:
    """Truth conductivity and the mesh it lives on"""
    if getattr(args, "truth", None):
        values = storage.read_column(args.truth, "truth")
        for candidate in (data_mesh, mesh):
            if values.size == candidate.n_nodes:
                if candidate is mesh:
                    logger.warning("Truth is given on the inversion mesh; data share its discretization")
                return NodalField(values, FieldRole.CONDUCTIVITY, candidate.mesh_id), candidate, None
        raise UsageError(
            f"{args.truth}: {values.size} values match neither {data_mesh.mesh_id} nor {mesh.mesh_id}"
        )
    phantom = get_phantom(getattr(args, "phantom", None) or cfg.phantom)
    return phantom.conductivity(data_mesh), data_mesh, phantom


def _synthesize(
    args: argparse.Namespace, cfg: InversionConfig, mesh: DiskMesh, data_mesh: DiskMesh
) -> Tuple[MeasurementSet, NodalField, Optional[Phantom], MeasurementHeader]:
    truth, truth_mesh, phantom = _truth(args, cfg, mesh, data_mesh)
    basis = EITInversionService.make_currents(mesh, cfg.n_currents)
    data = EITInversionService.synthesize_data(
        truth, basis, cfg.eps, cfg.seed, mesh, None if truth_mesh is mesh else truth_mesh
    )
    truth_on_mesh = truth if truth_mesh is mesh else DiskFEMService.restrict_to_mesh(truth_mesh, mesh, truth)
    header = MeasurementHeader(
        eps=cfg.eps,
        seed=cfg.seed,
        prng=settings.prng,
        numpy_version=np.__version__,
        mesh_id=mesh.mesh_id,
        data_mesh_id=truth_mesh.mesh_id,
        labels=basis.labels,
        noise_scale=EITInversionService.noise_scale(data),
        phantom=phantom.name if phantom else None,
    )
    return data, truth_on_mesh, phantom, header


def cmd_synth(args: argparse.Namespace) -> int:
    """Synthesize boundary measurements for a phantom or a truth file"""
    try:
        cfg = load_inversion_config(args.config, eps=args.eps, seed=args.seed)
        mesh, data_mesh = _meshes(cfg)
        data, truth, _, header = _synthesize(args, cfg, mesh, data_mesh)
        with storage.atomic_output(args.out) as out:
            storage.write_measurements(out, data, header)
            storage.write_column_csv(out / "truth.csv", truth.values, header="sigma")
    except W2EITError as e:
        return _fail("synthesize data", e)
    print(f"patterns {len(data.traces)} boundary_nodes {mesh.n_boundary} noise_scale "
          f"{storage.format_float(header.noise_scale)}")
    return 0


def cmd_invert(args: argparse.Namespace) -> int:
    """Run a Barzilai-Borwein reconstruction and write its history"""
    try:
        cfg = load_inversion_config(args.config, misfit=args.misfit, eps=args.eps, seed=args.seed)
        if args.phantom is None and args.truth is None and args.data is None:
            args.phantom = cfg.phantom
        mesh, data_mesh = _meshes(cfg)
        truth: Optional[NodalField] = None
        phantom: Optional[Phantom] = None
        if args.data:
            data = storage.read_measurements(args.data, mesh)
        else:
            data, truth, phantom, _ = _synthesize(args, cfg, mesh, data_mesh)
        basis = EITInversionService.make_currents(mesh, len(data.traces) // 2)

        sigma0 = NodalField(
            np.clip(np.ones(mesh.n_nodes), cfg.c0, cfg.c1), FieldRole.CONDUCTIVITY, mesh.mesh_id, (cfg.c0, cfg.c1)
        )
        with storage.atomic_output(args.out) as out:
            run = EITInversionService.bb_invert(sigma0, data, basis, cfg, mesh)
            for k, sigma in enumerate(run.sigma_history):
                storage.write_column_csv(out / f"sigma_{k:04d}.csv", sigma, header="sigma")
            storage.write_model_json(out / "trace.json", run.records)

            summary = RunSummary(
                iterations=run.iterations,
                stop_reason=run.stop_reason,
                misfit=cfg.misfit,
                mesh_id=mesh.mesh_id,
                initial_objective=run.initial_objective,
                final_objective=run.objective_trace[-1],
                config=cfg,
            )
            if truth is not None:
                summary.initial_relative_error = EITInversionService.relative_error(
                    mesh, run.sigma_history[0], truth.values
                )
                summary.final_relative_error = EITInversionService.relative_error(
                    mesh, run.final_sigma, truth.values
                )
            if phantom is not None:
                summary.inclusion_contrast = EITInversionService.inclusion_contrast(
                    mesh, run.final_sigma, phantom
                )
            storage.write_model_json(out / "summary.json", summary)
    except W2EITError as e:
        return _fail("run inversion", e)
    print(f"iterations {run.iterations} stop {run.stop_reason.value} "
          f"objective {storage.format_float(summary.final_objective)}")
    if summary.final_relative_error is not None:
        print(f"relative_error {storage.format_float(summary.final_relative_error)}")
    return 0


def cmd_landscape(args: argparse.Namespace) -> int:
    """Scan both misfits over candidate centres of a known-shape inclusion"""
    try:
        cfg = load_inversion_config(args.config, eps=args.eps, seed=args.seed)
        mesh, data_mesh = _meshes(cfg)
        phantom = get_phantom(args.phantom).with_transition(LANDSCAPE_TRANSITION)
        if len(phantom.inclusions) != 1:
            raise UsageError(f"landscape scans need a single-inclusion phantom, '{args.phantom}' has "
                             f"{len(phantom.inclusions)}")
        basis = EITInversionService.make_currents(mesh, cfg.n_currents)
        data = EITInversionService.synthesize_data(
            phantom.conductivity(data_mesh), basis, cfg.eps, cfg.seed, mesh, data_mesh
        )
        points = EITInversionService.landscape_scan(
            phantom.inclusions[0], data, basis, cfg, mesh, workers=args.workers or settings.workers
        )
        header = ["radius", "angle", "x", "y", "w2", "l2"]
        rows = [[p.radius, p.angle, p.x, p.y, p.w2, p.l2] for p in points]
        with storage.atomic_output(args.out) as out:
            storage.write_table_csv(out / "landscape.csv", header, rows)
            storage.write_table_csv(
                out / "slice.csv",
                ["angle", "w2", "l2"],
                [[p.angle, p.w2, p.l2] for p in points if abs(p.radius - args.slice_radius) < 1e-9],
            )
    except W2EITError as e:
        return _fail("scan landscape", e)
    best_w2 = min(points, key=lambda p: p.w2)
    best_l2 = min(points, key=lambda p: p.l2)
    print(f"w2_min radius {best_w2.radius:.2f} angle {best_w2.angle:.6f}")
    print(f"l2_min radius {best_l2.radius:.2f} angle {best_l2.angle:.6f}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    """Median wall time of w2_circle per grid size"""
    try:
        sizes = parse_sizes(args.sizes)
        if args.repeats < 1:
            raise UsageError(f"repeats must be positive, got {args.repeats}")
        rng = np.random.default_rng(args.seed)
        rows = []
        for n in sizes:
            timings = []
            for _ in range(args.repeats):
                f = PeriodicDensity(rng.uniform(0.2, 3.0, n))
                g = PeriodicDensity(rng.uniform(0.2, 3.0, n))
                start = time.perf_counter()
                CircleTransportService.w2_circle(f, g)
                timings.append(time.perf_counter() - start)
            rows.append(BenchRow(n=n, repeats=args.repeats, median_seconds=statistics.median(timings)))
            logger.info("N=%d median %.4f s", n, rows[-1].median_seconds)
        if args.csv_out:
            storage.write_table_csv(
                args.csv_out, ["n", "repeats", "median_seconds"],
                [[row.n, row.repeats, row.median_seconds] for row in rows],
            )
    except W2EITError as e:
        return _fail("run benchmark", e)
    for row in rows:
        print(f"{row.n} {storage.format_float(row.median_seconds)}")
    return 0
