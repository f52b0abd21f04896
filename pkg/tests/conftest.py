import numpy as np
import pytest

from app import storage
from app.main import main
from app.models import PeriodicDensity
from app.services.fem_disk import DiskFEMService


@pytest.fixture
def rng():
    """Seeded generator shared by a single test"""
    return np.random.default_rng(20240521)


@pytest.fixture
def sampled_density():
    """Build a density by sampling a function of t on N grid points"""
    def make(func, n=4096):
        return PeriodicDensity.from_function(func, n)
    return make


@pytest.fixture
def random_density(rng):
    """Random piecewise-constant density with values in [low, high]"""
    def make(n=256, low=0.2, high=3.0):
        return PeriodicDensity(rng.uniform(low, high, n))
    return make


@pytest.fixture(scope="session")
def coarse_mesh():
    return DiskFEMService.generate_disk_mesh(1)


@pytest.fixture(scope="session")
def default_mesh():
    return DiskFEMService.generate_disk_mesh(2)


@pytest.fixture(scope="session")
def fine_mesh():
    return DiskFEMService.generate_disk_mesh(3)


@pytest.fixture
def run_cli(tmp_path, monkeypatch):
    """Call the command-line entry point inside tmp_path"""
    monkeypatch.chdir(tmp_path)

    def run(*argv):
        return main([str(arg) for arg in argv])
    return run


@pytest.fixture
def density_file(tmp_path):
    """Write density samples to a CSV file and return its path"""
    def write(name, values):
        path = tmp_path / name
        storage.write_density_csv(path, values)
        return path
    return write


@pytest.fixture
def config_file(tmp_path):
    """Write a key=value inversion config and return its path"""
    def write(name="inversion.env", **values):
        path = tmp_path / name
        lines = ["# inversion settings"] + [f"{key}={value}" for key, value in values.items()]
        path.write_text("\n".join(lines) + "\n")
        return path
    return write
