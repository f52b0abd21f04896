"""Plain-text persistence: CSV tables, JSON summaries and atomic output directories"""
import csv
import json
import logging
import math
import shutil
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from app.config import settings
from app.exceptions import DomainError, UsageError
from app.models import BoundaryFunction, DiskMesh, MeasurementSet, PeriodicDensity
from app.schemas import MeasurementHeader

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FAILURE_MARKER = "FAILED"


def format_float(value: float) -> str:
    return f"{value:.{settings.float_digits}g}"


def read_column(path: PathLike, what: str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} file not found: {path}")
    values = []
    with path.open() as handle:
        for row, line in enumerate(handle, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                values.append(float(text.split(",")[0]))
            except ValueError:
                if not values and row == 1:
                    continue  # header
                raise DomainError(f"{path}: row {row} is not a number: {text!r}") from None
            if values[-1] <= 0.0 and what == "density":
                raise DomainError(f"{path}: row {row} has non-positive density {text!r}")
    if not values:
        raise DomainError(f"{path}: no {what} samples")
    return np.asarray(values)


def read_density_csv(path: PathLike) -> PeriodicDensity:
    """One sample per line; the grid tau_i = i / N is implied"""
    return PeriodicDensity(read_column(path, "density"))


def write_column_csv(path: PathLike, values: Iterable[float], header: str = "value") -> None:
    lines = [header] + [format_float(float(v)) for v in values]
    Path(path).write_text("\n".join(lines) + "\n")


def write_density_csv(path: PathLike, values: Iterable[float]) -> None:
    lines = [format_float(float(v)) for v in values]
    Path(path).write_text("\n".join(lines) + "\n")


def write_table_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])


def format_json_float(value: float) -> str:
    if math.isnan(value):
        return "NaN"
    if math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    text = format_float(value)
    return text if any(c in text for c in ".en") else text + ".0"


class FloatDigitsEncoder(json.JSONEncoder):
    """JSON encoder writing floats with the configured significant digits"""

    def iterencode(self, o, _one_shot=False):
        encoder = json.encoder.encode_basestring_ascii if self.ensure_ascii else json.encoder.encode_basestring
        iterencode = json.encoder._make_iterencode(
            {} if self.check_circular else None,
            self.default,
            encoder,
            self.indent,
            format_json_float,
            self.key_separator,
            self.item_separator,
            self.sort_keys,
            self.skipkeys,
            _one_shot,
        )
        return iterencode(o, 0)


def write_model_json(path: PathLike, model: Union[BaseModel, Sequence[BaseModel]]) -> None:
    if isinstance(model, BaseModel):
        payload = model.model_dump(mode="json")
    else:
        payload = [item.model_dump(mode="json") for item in model]
    Path(path).write_text(json.dumps(payload, indent=2, cls=FloatDigitsEncoder) + "\n")


def write_mesh(directory: PathLike, mesh: DiskMesh) -> None:
    directory = Path(directory)
    write_table_csv(directory / "nodes.csv", ["x", "y"], (map(float, p) for p in mesh.nodes))
    write_table_csv(directory / "triangles.csv", ["i", "j", "k"], (map(int, t) for t in mesh.triangles))
    write_table_csv(directory / "boundary.csv", ["node"], ([int(b)] for b in mesh.boundary))


def write_measurements(directory: PathLike, data: MeasurementSet, header: MeasurementHeader) -> None:
    """measurements.csv has one row per boundary node and one column per pattern"""
    directory = Path(directory)
    columns = np.column_stack([trace.values for trace in data.traces])
    write_table_csv(directory / "measurements.csv", header.labels, (map(float, row) for row in columns))
    write_model_json(directory / "measurements.json", header)


def read_measurements(directory: PathLike, mesh: DiskMesh) -> MeasurementSet:
    """Load noisy traces; the clean traces are not stored, so they mirror the noisy ones"""
    directory = Path(directory)
    header_path = directory / "measurements.json"
    table_path = directory / "measurements.csv"
    if not header_path.is_file() or not table_path.is_file():
        raise UsageError(f"{directory} does not contain measurements.csv and measurements.json")
    try:
        header = MeasurementHeader.model_validate_json(header_path.read_text())
    except ValidationError as e:
        raise UsageError(f"{header_path}: invalid measurement header: {e}") from e
    if header.mesh_id != mesh.mesh_id:
        raise UsageError(f"measurements belong to {header.mesh_id}, not {mesh.mesh_id}")
    try:
        table = np.loadtxt(table_path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as e:
        raise UsageError(f"{table_path}: {e}") from e
    if table.shape != (mesh.n_boundary, len(header.labels)):
        raise UsageError(f"{table_path}: expected {mesh.n_boundary} rows of {len(header.labels)} values")
    traces = [
        BoundaryFunction(table[:, k], mesh.boundary_weights, label) for k, label in enumerate(header.labels)
    ]
    return MeasurementSet(
        traces=traces, clean=traces, eps=header.eps, seed=header.seed, mesh_id=header.mesh_id, prng=header.prng
    )


@contextmanager
def atomic_output(out: PathLike) -> Iterator[Path]:
    """
    Build an output directory under <out>.partial and rename it on success.

    On failure the partial directory is removed and <out>/FAILED records the
    error message.
    """
    out = Path(out)
    partial = out.with_name(out.name + ".partial")
    if partial.exists():
        shutil.rmtree(partial)
    partial.mkdir(parents=True)
    try:
        yield partial
    except BaseException as e:
        shutil.rmtree(partial, ignore_errors=True)
        if out.exists() and not out.is_dir():
            out.unlink()
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILURE_MARKER).write_text(f"{type(e).__name__}: {e}\n")
        raise
    if out.exists():
        shutil.rmtree(out)
    partial.rename(out)
    logger.info("Wrote %s", out)


