"""
Quadratic Wasserstein distance between densities on the circle.

The circle problem reduces to a one-parameter minimization over a shift
alpha of the cumulative distribution. I(alpha) and its two derivatives are
integrated exactly for piecewise-constant densities by merging the
breakpoints of both CDF tables, so each evaluation costs O(N) after a sort
of two nearly sorted sequences.
"""
import hashlib
import logging
from typing import Tuple

import numpy as np

from app.exceptions import ConvergenceError, DomainError, InternalConsistencyError, UsageError
from app.models import CdfTable, PeriodicDensity, PotentialGrid, TransportMap
from app.schemas import AlphaSolution

logger = logging.getLogger(__name__)

# Newton iterates are kept inside [-1 + ALPHA_MARGIN, 1 - ALPHA_MARGIN]
ALPHA_MARGIN = 1e-9
MAX_NEWTON_ITERATIONS = 100
# Merged segments shorter than this (negative) length are a table defect
SEGMENT_TOLERANCE = 1e-12


def pair_digest(f: PeriodicDensity, g: PeriodicDensity) -> str:
    digest = hashlib.sha1()
    digest.update(f"{f.n}:{g.n}".encode())
    digest.update(f.values.tobytes())
    digest.update(g.values.tobytes())
    return digest.hexdigest()


class CircleTransportService:
    """Service class for W2 transport between periodic densities"""

    @staticmethod
    def build_cdf(density: PeriodicDensity) -> CdfTable:
        """
        Build the lifted CDF table of the staggered piecewise-constant density.

        Cell i is [(i - 1/2) h, (i + 1/2) h) and carries the i-th sample
        rescaled to unit mass. The table spans 3N + 1 cells around [0, 1).
        """
        n = density.n
        h = density.h
        cumulative = np.concatenate(([0.0], np.cumsum(density.values)))
        cumulative /= cumulative[-1]
        cell_slopes = np.diff(cumulative) / h
        base = cumulative[:-1] - 0.5 * cumulative[1]

        index = np.arange(-n, 2 * n + 2)
        knots = (2 * index - 1) * h / 2.0
        values = base[np.mod(index, n)] + np.floor_divide(index, n)
        slopes = cell_slopes[np.mod(index[:-1], n)]
        return CdfTable(knots=knots, slopes=slopes, values=values, n=n, mass=density.mass)

    @staticmethod
    def eval_I_derivatives(F: CdfTable, G: CdfTable, alpha: float) -> Tuple[float, float, float]:
        """
        Evaluate I(alpha), I'(alpha) and I''(alpha).

        With phi(y) = F^{-1}(G(y) + alpha) on y in [0, 1):
            I   = int (phi(y) - y)^2 g(y) dy
            I'  = 2 int phi(y) dy - 1
            I'' = 2 int dy / f(phi(y))
        phi is linear between consecutive merged breakpoints, so the midpoint
        rule is exact for I' and I'' and Simpson's rule is exact for I.
        """
        if not -1.0 < alpha < 1.0:
            raise DomainError(f"alpha must lie in (-1, 1), got {alpha!r}")
        ng, nf = G.n, F.n

        # Breakpoints in the level variable U = G(y), U in [0, 1]
        pa = int(np.searchsorted(F.values, alpha, side="right")) - 1
        levels_g = G.values[ng + 1:2 * ng + 1]
        levels_f = F.values[pa + 1:pa + nf + 1] - alpha
        merged = np.concatenate((levels_g, levels_f))
        order = np.argsort(merged, kind="stable")

        from_f = order >= ng
        count_f = np.concatenate(([0], np.cumsum(from_f)))
        count_g = np.arange(ng + nf + 1) - count_f
        pg = ng + count_g
        pf = pa + count_f

        u_left = np.concatenate(([0.0], merged[order]))
        g_slopes = G.slopes[pg]
        y_left = (u_left - G.values[pg]) / g_slopes + G.knots[pg]
        y = np.concatenate((y_left, [1.0]))
        y[0] = 0.0
        lengths = np.diff(y)
        if lengths.min() < -SEGMENT_TOLERANCE:
            raise InternalConsistencyError(
                f"merged segment {int(lengths.argmin())} has negative length {lengths.min():.3e}"
            )

        f_slopes = F.slopes[pf]

        def phi(at: np.ndarray) -> np.ndarray:
            level = G.values[pg] + g_slopes * (at - G.knots[pg]) + alpha
            return F.knots[pf] + (level - F.values[pf]) / f_slopes

        left, right = y[:-1], y[1:]
        middle = 0.5 * (left + right)
        phi_left, phi_middle, phi_right = phi(left), phi(middle), phi(right)

        first = 2.0 * float(np.dot(lengths, phi_middle)) - 1.0
        second = 2.0 * float(np.sum(lengths / f_slopes))
        gap = ((phi_left - left) ** 2 + 4.0 * (phi_middle - middle) ** 2 + (phi_right - right) ** 2)
        value = float(np.sum(g_slopes * lengths * gap)) / 6.0
        return value, first, second

    @staticmethod
    def i_value(F: CdfTable, G: CdfTable, alpha: float) -> float:
        return CircleTransportService.eval_I_derivatives(F, G, alpha)[0]

    @staticmethod
    def solve_alpha(
        F: CdfTable,
        G: CdfTable,
        eps: float = 1e-12,
        max_iterations: int = MAX_NEWTON_ITERATIONS,
    ) -> AlphaSolution:
        """
        Newton iteration for I'(alpha) = 0 started at alpha = 0.

        I' is increasing, so its sign keeps a bracket around the root; a
        Newton candidate that leaves the bracket is replaced by bisection.
        """
        if eps <= 0.0:
            raise DomainError(f"eps must be positive, got {eps!r}")
        low, high = -1.0 + ALPHA_MARGIN, 1.0 - ALPHA_MARGIN
        alpha = 0.0
        for iteration in range(1, max_iterations + 1):
            _, first, second = CircleTransportService.eval_I_derivatives(F, G, alpha)
            if first == 0.0:
                break
            if first > 0.0:
                high = alpha
            else:
                low = alpha
            candidate = alpha - first / second
            if not low < candidate < high:
                candidate = 0.5 * (low + high)
            step = candidate - alpha
            alpha = candidate
            if abs(step) < eps:
                break
        else:
            raise ConvergenceError(
                f"Newton iteration did not converge in {max_iterations} steps (last alpha {alpha!r})",
                last_iterate=alpha,
                iterations=max_iterations,
            )

        value, first, _ = CircleTransportService.eval_I_derivatives(F, G, alpha)
        logger.debug("alpha* = %.17g after %d iterations, |I'| = %.3e", alpha, iteration, abs(first))
        return AlphaSolution(
            alpha_star=alpha,
            w2_squared=max(value, 0.0),
            newton_iterations=iteration,
            residual=abs(first),
        )

    @staticmethod
    def w2_circle(f: PeriodicDensity, g: PeriodicDensity, eps: float = 1e-12) -> AlphaSolution:
        """Squared W2 distance between f and g on the circle"""
        F = CircleTransportService.build_cdf(f)
        G = CircleTransportService.build_cdf(g)
        solution = CircleTransportService.solve_alpha(F, G, eps)
        return solution.model_copy(update={"pair_digest": pair_digest(f, g)})

    @staticmethod
    def _check_solution(f: PeriodicDensity, g: PeriodicDensity, sol: AlphaSolution) -> None:
        if sol.pair_digest is not None and sol.pair_digest != pair_digest(f, g):
            raise UsageError("solution was computed for a different pair of densities")

    @staticmethod
    def optimal_map(f: PeriodicDensity, g: PeriodicDensity, sol: AlphaSolution) -> TransportMap:
        """T(t) = G^{-1}(F(t) - alpha*), pushing f forward to g"""
        CircleTransportService._check_solution(f, g, sol)
        return TransportMap(
            source=CircleTransportService.build_cdf(f),
            target=CircleTransportService.build_cdf(g),
            alpha_star=sol.alpha_star,
        )

    @staticmethod
    def kantorovich_potential(
        f: PeriodicDensity, g: PeriodicDensity, sol: AlphaSolution
    ) -> PotentialGrid:
        """
        Cell averages of psi(t) = 2 int_0^t (s - T(s)) ds + c around tau_k = k h.

        T is linear between the cell edges of f and the preimages of the
        knots of g, so on each such piece the trapezoid rule integrates
        s - T(s) exactly and Simpson's rule integrates the quadratic psi
        exactly. c makes the grid mean zero. Paired with a piecewise-constant
        perturbation of f, the averages give the first variation of W2^2.
        """
        transport = CircleTransportService.optimal_map(f, g, sol)
        h = f.h
        edges = (np.arange(f.n + 1) - 0.5) * h
        preimages = transport.source.inverse(transport.target.values + transport.alpha_star)
        inside = preimages[(preimages > edges[0]) & (preimages < edges[-1])]
        points = np.unique(np.concatenate((edges, inside)))

        displacement = points - transport(points)
        lengths = np.diff(points)
        psi = 2.0 * np.concatenate(([0.0], np.cumsum(lengths * 0.5 * (displacement[:-1] + displacement[1:]))))
        psi_middle = psi[:-1] + lengths * (0.75 * displacement[:-1] + 0.25 * displacement[1:])
        pieces = lengths * (psi[:-1] + 4.0 * psi_middle + psi[1:]) / 6.0
        cumulative = np.concatenate(([0.0], np.cumsum(pieces)))

        at_edges = np.searchsorted(points, edges)
        raw = np.diff(cumulative[at_edges]) / h
        constant = -float(raw.mean())
        return PotentialGrid(values=raw + constant, constant=constant)
