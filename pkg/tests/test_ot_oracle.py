import numpy as np
import pytest

from app.exceptions import DomainError, UsageError
from app.models import DiscreteSamplePoints, PeriodicDensity
from app.services.circle_ot import CircleTransportService as ot
from app.services.ot_oracle import TransportOracle as oracle


def sine(amplitude, shift=0.0):
    return lambda t: 1.0 + amplitude * np.sin(2.0 * np.pi * (t - shift))


class TestLineFormula:
    """Segment W2 through inverse CDFs"""

    def test_zero_for_equal_densities(self, random_density):
        f = random_density(100)
        assert oracle.w2_line(f, f) == pytest.approx(0.0, abs=1e-14)

    def test_half_support_target(self):
        """All mass moved onto [1/2, 1] costs about 1/12"""
        n = 4000
        t = np.arange(n) / n
        g = PeriodicDensity(np.where(t >= 0.5, 2.0, 1e-4))
        f = PeriodicDensity(np.ones(n))
        assert oracle.w2_line(f, g) == pytest.approx(1.0 / 12.0, rel=0.02)

    def test_bounds_circle_distance(self, random_density):
        """The circle distance never exceeds the segment distance"""
        for _ in range(20):
            f, g = random_density(128), random_density(128)
            assert ot.w2_circle(f, g).w2_squared <= oracle.w2_line(f, g) + 1e-10


class TestGridSearch:
    """Exhaustive alpha search"""

    def test_identical_densities(self, random_density):
        f = random_density(64)
        alpha, w2sq = oracle.alpha_grid_search(f, f, 100_000)
        assert abs(alpha) <= 2e-5
        assert w2sq == pytest.approx(0.0, abs=1e-9)

    def test_rejects_coarse_grid(self, random_density):
        f = random_density(8)
        with pytest.raises(DomainError):
            oracle.alpha_grid_search(f, f, 10)

    def test_agrees_with_newton(self, sampled_density):
        """Newton and the search agree on a smooth pair"""
        f = sampled_density(sine(0.7), 1024)
        g = sampled_density(sine(0.4, shift=0.35), 1024)
        solution = ot.w2_circle(f, g)
        alpha, w2sq = oracle.alpha_grid_search(f, g)
        assert abs(solution.alpha_star - alpha) <= 1e-5
        assert solution.w2_squared == pytest.approx(w2sq, rel=1e-6)

    @pytest.mark.slow
    def test_agrees_with_newton_on_random_pairs(self, rng):
        """Fifty random pairs at N = 4096"""
        for _ in range(50):
            f = PeriodicDensity(rng.uniform(0.2, 3.0, 4096))
            g = PeriodicDensity(rng.uniform(0.2, 3.0, 4096))
            solution = ot.w2_circle(f, g)
            alpha, w2sq = oracle.alpha_grid_search(f, g)
            assert abs(solution.alpha_star - alpha) <= 1e-5
            assert solution.w2_squared == pytest.approx(w2sq, rel=1e-6)


class TestBruteForce:
    """Permutation enumeration for small atom sets"""

    def test_identical_points(self):
        points = DiscreteSamplePoints(x=[0.1, 0.4, 0.8], y=[0.8, 0.1, 0.4])
        result = oracle.brute_force_circle_w2(points)
        assert result.cost == pytest.approx(0.0, abs=1e-15)
        assert result.attained_by_shift

    def test_two_atoms(self):
        """Both matchings tie at displacement 1/4"""
        result = oracle.brute_force_circle_w2(DiscreteSamplePoints(x=[0.0, 0.5], y=[0.25, 0.75]))
        assert result.cost == pytest.approx(1.0 / 16.0, abs=1e-15)

    def test_wraparound_distance(self):
        """Atoms near 0 and 1 are close on the circle"""
        result = oracle.brute_force_circle_w2(DiscreteSamplePoints(x=[0.95], y=[0.05]))
        assert result.cost == pytest.approx(0.01, abs=1e-15)

    def test_too_many_atoms(self):
        points = DiscreteSamplePoints(x=np.linspace(0, 0.9, 9), y=np.linspace(0.05, 0.95, 9))
        with pytest.raises(UsageError):
            oracle.brute_force_circle_w2(points)

    def test_mismatched_sizes(self):
        with pytest.raises(UsageError):
            DiscreteSamplePoints(x=[0.1, 0.2], y=[0.3])

    def test_quantiles_against_continuum(self, sampled_density):
        """Six quantile atoms reproduce the continuum distance up to 1/(2n)"""
        f = PeriodicDensity(np.ones(2048))
        g = sampled_density(sine(0.8), 2048)
        result = oracle.brute_force_circle_w2(oracle.quantile_samples(f, g, 6))
        assert result.attained_by_shift
        assert abs(result.cost - ot.w2_circle(f, g).w2_squared) <= 0.5 / 6

    @pytest.mark.slow
    def test_eight_atoms_random_pairs(self, rng):
        """Optimum is a cyclic shift and tracks the continuum distance"""
        for _ in range(20):
            f = PeriodicDensity(rng.uniform(0.2, 3.0, 512))
            g = PeriodicDensity(rng.uniform(0.2, 3.0, 512))
            result = oracle.brute_force_circle_w2(oracle.quantile_samples(f, g, 8))
            assert result.attained_by_shift
            assert abs(result.cost - ot.w2_circle(f, g).w2_squared) <= 0.5 / 8
