"""
Slow reference computations for validating the circle transport solver.

Nothing here touches the merged-breakpoint code of circle_ot: the line
formula and the alpha search rebuild their own inverse CDFs with np.interp.
"""
import itertools
import logging
from typing import Optional, Tuple

import numpy as np

from app.exceptions import DomainError, UsageError
from app.models import DiscreteSamplePoints, PeriodicDensity
from app.schemas import BruteForceResult, GradientCheckReport
from app.services.circle_ot import CircleTransportService

logger = logging.getLogger(__name__)

MAX_BRUTE_FORCE_ATOMS = 8
# Candidate alphas per zoom level of the grid search
ZOOM_POINTS = 41


def _simpson_squared_gap(knots: np.ndarray, first, second) -> float:
    """Integral of (first - second)^2 where both are linear between knots"""
    left, right = knots[:-1], knots[1:]
    middle = 0.5 * (left + right)

    def gap(at):
        return (first(at) - second(at)) ** 2

    return float(np.sum((right - left) * (gap(left) + 4.0 * gap(middle) + gap(right))) / 6.0)


def _line_inverse(density: PeriodicDensity) -> Tuple[np.ndarray, np.ndarray]:
    """Knots (levels, positions) of F^{-1} for cells [i h, (i + 1) h) on [0, 1]"""
    levels = np.concatenate(([0.0], np.cumsum(density.values)))
    levels /= levels[-1]
    positions = np.arange(density.n + 1) * density.h
    return levels, positions


def _lifted_inverse(density: PeriodicDensity) -> Tuple[np.ndarray, np.ndarray]:
    """Knots of the lifted F^{-1} for staggered cells, covering levels in (-1, 2)"""
    n = density.n
    tiled = np.tile(density.values / density.mass, 4)
    positions = (np.arange(-n, 3 * n + 1) - 0.5) * density.h
    levels = np.concatenate(([0.0], np.cumsum(tiled))) * density.h
    # Level 0 sits at t = 0, the middle of cell 0
    origin = levels[n] + 0.5 * density.h * tiled[n]
    return levels - origin, positions


class TransportOracle:
    """Independent reference solutions used by tests and gradcheck"""

    @staticmethod
    def w2_line(f: PeriodicDensity, g: PeriodicDensity) -> float:
        """Squared W2 on the segment [0, 1] via inverse CDFs, exact for step densities"""
        f_levels, f_positions = _line_inverse(f)
        g_levels, g_positions = _line_inverse(g)
        knots = np.union1d(f_levels, g_levels)
        return _simpson_squared_gap(
            knots,
            lambda t: np.interp(t, f_levels, f_positions),
            lambda t: np.interp(t, g_levels, g_positions),
        )

    @staticmethod
    def i_direct(f: PeriodicDensity, g: PeriodicDensity, alpha: float) -> float:
        """I(alpha) = int_0^1 |F^{-1}(t) - G^{-1}(t - alpha)|^2 dt"""
        if not -1.0 < alpha < 1.0:
            raise DomainError(f"alpha must lie in (-1, 1), got {alpha!r}")
        f_levels, f_positions = _lifted_inverse(f)
        g_levels, g_positions = _lifted_inverse(g)
        inside_f = f_levels[(f_levels > 0.0) & (f_levels < 1.0)]
        shifted = g_levels + alpha
        inside_g = shifted[(shifted > 0.0) & (shifted < 1.0)]
        knots = np.union1d(np.concatenate(([0.0, 1.0], inside_f)), inside_g)
        return _simpson_squared_gap(
            knots,
            lambda t: np.interp(t, f_levels, f_positions),
            lambda t: np.interp(t - alpha, g_levels, g_positions),
        )

    @staticmethod
    def alpha_grid_search(
        f: PeriodicDensity, g: PeriodicDensity, grid_points: int = 1_000_000
    ) -> Tuple[float, float]:
        """
        Minimize I over alpha in (-1, 1) to the resolution of a uniform grid.

        I is convex, so the search zooms: each level evaluates ZOOM_POINTS
        candidates and keeps the two cells around the best one, until the
        spacing drops below 2 / grid_points.
        """
        if grid_points < 1000:
            raise DomainError(f"grid_points must be at least 1000, got {grid_points}")
        resolution = 2.0 / grid_points
        low, high = -1.0 + resolution, 1.0 - resolution
        while True:
            candidates = np.linspace(low, high, ZOOM_POINTS)
            values = np.array([TransportOracle.i_direct(f, g, a) for a in candidates])
            best = int(values.argmin())
            spacing = candidates[1] - candidates[0]
            if spacing <= resolution:
                return float(candidates[best]), float(max(values[best], 0.0))
            low = candidates[max(best - 1, 0)]
            high = candidates[min(best + 1, ZOOM_POINTS - 1)]

    @staticmethod
    def potential_gradient_check(
        f: PeriodicDensity,
        g: PeriodicDensity,
        samples: int = 20,
        epsilon: float = 1e-5,
        rng: Optional[np.random.Generator] = None,
    ) -> GradientCheckReport:
        """
        Compare central differences of W2^2 in random zero-mean directions
        with the pairing sum(psi * delta) * h / mass(f).
        """
        rng = rng or np.random.default_rng(0)
        solution = CircleTransportService.w2_circle(f, g)
        potential = CircleTransportService.kantorovich_potential(f, g, solution)
        errors = []
        for _ in range(samples):
            direction = rng.standard_normal(f.n)
            direction -= direction.mean()
            direction *= 0.5 * f.values.min() / np.abs(direction).max()
            plus = CircleTransportService.w2_circle(PeriodicDensity(f.values + epsilon * direction), g)
            minus = CircleTransportService.w2_circle(PeriodicDensity(f.values - epsilon * direction), g)
            numeric = (plus.w2_squared - minus.w2_squared) / (2.0 * epsilon)
            predicted = float(np.dot(potential.values, direction)) * f.h / f.mass
            errors.append(abs(numeric - predicted) / max(abs(predicted), abs(numeric), 1e-300))
        return GradientCheckReport(
            samples=samples, epsilon=epsilon, relative_errors=errors, max_relative_error=max(errors, default=0.0)
        )

    @staticmethod
    def quantile_samples(f: PeriodicDensity, g: PeriodicDensity, n: int) -> DiscreteSamplePoints:
        """Midpoint quantiles x_i = F^{-1}((i + 1/2) / n), reduced to [0, 1)"""
        if n < 1:
            raise DomainError(f"need at least one atom, got {n}")
        levels = (np.arange(n) + 0.5) / n
        x = CircleTransportService.build_cdf(f).inverse(levels)
        y = CircleTransportService.build_cdf(g).inverse(levels)
        return DiscreteSamplePoints(x=x, y=y)

    @staticmethod
    def brute_force_circle_w2(samples: DiscreteSamplePoints) -> BruteForceResult:
        """Best matching over all n! permutations under squared geodesic cost"""
        n = samples.n
        if n > MAX_BRUTE_FORCE_ATOMS:
            raise UsageError(f"brute force supports at most {MAX_BRUTE_FORCE_ATOMS} atoms, got {n}")
        distance = np.abs(samples.x[:, None] - samples.y[None, :])
        cost = np.minimum(distance, 1.0 - distance) ** 2

        permutations = np.array(list(itertools.permutations(range(n))), dtype=int)
        totals = cost[np.arange(n), permutations].sum(axis=1) / n
        best = int(totals.argmin())

        shifts = (np.arange(n)[None, :] + np.arange(n)[:, None]) % n
        shift_totals = cost[np.arange(n), shifts].sum(axis=1) / n
        best_shift = int(shift_totals.argmin())
        attained = bool(shift_totals[best_shift] <= totals[best] + 1e-12)
        if not attained:
            logger.warning(
                "optimum %.6g not attained by a cyclic shift (best shift %.6g)",
                totals[best], shift_totals[best_shift],
            )
        return BruteForceResult(
            cost=float(totals[best]),
            permutation=permutations[best].tolist(),
            best_shift=best_shift,
            shift_cost=float(shift_totals[best_shift]),
            attained_by_shift=attained,
        )
