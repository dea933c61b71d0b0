"""Analytic lower bounds on the quenched critical line.

Notation: ``u = -b + h`` is the potential on repulsive sites.  The shift
argument gives, for d >= 3,

    f >= h C2 - (s C1 / 2) u - s^2 / 16,

maximised at ``s* = -4 C1 u`` with value ``h C2 + C1^2 u^2``; so the free
energy is positive once ``h > -K u^2`` with ``K = C1^2 / C2``.  In d = 2 a
small mass ``m`` is added and the bound picks up ``|log m|`` factors.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .gaussfield import normal_pdf, overlap_derivative, window_probability
from .walk import green_infinite, killed_green_infinite, massive_variance_bound, ratio_Z_series

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.5


class OutOfRegime(ValueError):
    """Parameters lie outside the region where a bound was derived."""


@dataclass(frozen=True)
class BoundConstants:
    d: int
    a: float
    C1: float
    C2: float
    C1_tilde: float | None = None
    C_prime: float | None = None
    m: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("C1", "C2", "C1_tilde", "C_prime"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be strictly positive, got {val}")
            if val is not None and name not in self.provenance:
                raise ValueError(f"{name} has no provenance")

    @property
    def K(self) -> float:
        """Quadratic coefficient obtained by optimising the d>=3 parabola over the shift."""
        return self.C1**2 / self.C2

    @property
    def K_ratio(self) -> float:
        """The ratio ``C1 / C2`` quoted alongside the optimisation."""
        return self.C1 / self.C2


def annealed_strength(b: float, h: float) -> float:
    """``h + log cosh b``."""
    b = abs(b)
    return h + b + np.log1p(np.exp(-2 * b)) - np.log(2.0)


def annealed_critical_h(b: float) -> float:
    if b < 0:
        raise ValueError("b must be non-negative")
    return 0.0 - annealed_strength(b, 0.0) if b else 0.0


def _check_standing(b, h):
    if not (-b + h < 0 < b + h):
        raise OutOfRegime(f"need -b+h < 0 < b+h, got b={b}, h={h}")


def optimal_shift_d3(b: float, h: float, constants: BoundConstants) -> float:
    return -4.0 * constants.C1 * (-b + h)


def lower_bound_d3(b: float, h: float, s: float | None, constants: BoundConstants) -> float:
    """``h C2 - (s C1 / 2)(-b+h) - s^2/16``; ``s=None`` uses the optimal shift."""
    _check_standing(b, h)
    if s is None:
        s = optimal_shift_d3(b, h, constants)
    if s < 0:
        raise ValueError("shift must be non-negative")
    u = -b + h
    return h * constants.C2 - 0.5 * s * constants.C1 * u - s * s / 16.0


@dataclass(frozen=True)
class RegionResult:
    covered: bool
    positive: bool
    margin: float
    witness: tuple = ()
    reason: str = ""


def region_positive_d3(b: float, h: float, constants: BoundConstants, epsilon: float = DEFAULT_EPSILON) -> RegionResult:
    """Predicate ``h > -K (-b+h)^2`` with its margin ``h C2 + C1^2 (-b+h)^2``."""
    u = -b + h
    if not (u < 0 < b + h):
        return RegionResult(False, False, float("nan"), reason="outside -b+h < 0 < b+h")
    if not -epsilon < u:
        return RegionResult(False, False, float("nan"), reason=f"-b+h outside (-{epsilon}, 0)")
    if u < -0.9 * epsilon:
        warnings.warn(f"-b+h={u} is near the edge of the smallness window (-{epsilon}, 0)", stacklevel=2)
    s = optimal_shift_d3(b, h, constants)
    margin = lower_bound_d3(b, h, s, constants)
    return RegionResult(True, bool(h > -constants.K * u * u), margin, (s,))


def critical_curve_d3(b: float, constants: BoundConstants | None = None, K: float | None = None) -> dict:
    """Boundary ``h = -K (b - h)^2`` closest to the axis.

    Returns the bisection root (authoritative), the exact quadratic root
    ``b - 1/(2K) + sqrt(1/K^2 - 4b/K)/2`` and the displayed closed form with
    ``8b/K`` under the radical (``nan`` where it is not real).
    """
    K = constants.K if K is None else K
    if b == 0:
        return {"bisection": 0.0, "quadratic": 0.0, "radical_8b": 0.0}
    disc = 1.0 / K**2 - 4.0 * b / K
    if disc < 0:
        raise OutOfRegime(f"no real root of h = -K(b-h)^2 for b={b}, K={K}")

    def g(h):
        return h + K * (b - h) ** 2

    # g(0) = K b^2 > 0 and g is negative at its vertex b - 1/(2K) whenever disc >= 0
    root = _bisect(g, b - 1.0 / (2 * K), 0.0, 1e-13)
    quad = b - 1.0 / (2 * K) + 0.5 * np.sqrt(disc)
    disc8 = 1.0 / K**2 - 8.0 * b / K
    alt = b - 1.0 / (2 * K) + 0.5 * np.sqrt(disc8) if disc8 >= 0 else float("nan")
    return {"bisection": root, "quadratic": float(quad), "radical_8b": float(alt)}


def _bisect(f, lo, hi, tol):
    flo, fhi = f(lo), f(hi)
    if np.sign(flo) == np.sign(fhi):
        raise OutOfRegime("no sign change in bracket")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# d = 2


def lower_bound_d2(b: float, h: float, s: float, m: float, constants: BoundConstants) -> float:
    """``h C1~/L - s C1 u/(2L) - s^2 m^2/2 - s^2/16 - C' m^2 L`` with ``L = |log m|``."""
    _check_standing(b, h)
    if not 0 < m < 0.5:
        raise OutOfRegime(f"m must lie in (0, 0.5), got {m}")
    if s < 0:
        raise ValueError("shift must be non-negative")
    L = abs(np.log(m))
    u = -b + h
    c = constants
    return (h * c.C1_tilde / L - s * c.C1 * u / (2 * L) - s * s * m * m / 2 - s * s / 16
            - c.C_prime * m * m * L)


def vache_parameters(b: float, h: float, constants: BoundConstants) -> tuple[float, float]:
    """Shift and mass ``(s, m)``: ``m^2 = -k/(log k)^3`` with ``k = -h C1~/C'``, then
    ``s = -C1 u / ((m^2 + 1/4)|log m|)``.

    For ``h >= 0`` the mass is chosen from ``k = (C1^2 u^2 + h C1~)/C'``
    instead, which keeps the mass cost below the shift gain.
    """
    u = -b + h
    if not u < 0:
        raise OutOfRegime("need -b+h < 0")
    c = constants
    if h < 0:
        k = -h * c.C1_tilde / c.C_prime
    else:
        k = (c.C1**2 * u * u + h * c.C1_tilde) / c.C_prime
    if not 0 < k < 1:
        raise OutOfRegime(f"k={k} outside (0, 1)")
    m = np.sqrt(-k / np.log(k) ** 3)
    if not 0 < m < 0.5:
        raise OutOfRegime(f"m={m} outside (0, 0.5)")
    s = -c.C1 * u / ((m * m + 0.25) * abs(np.log(m)))
    return float(s), float(m)


def region_positive_d2(b: float, h: float, constants: BoundConstants, epsilon: float = DEFAULT_EPSILON) -> RegionResult:
    """Positivity of :func:`lower_bound_d2` at the :func:`vache_parameters` witness."""
    u = -b + h
    if not (u < 0 < b + h):
        return RegionResult(False, False, float("nan"), reason="outside -b+h < 0 < b+h")
    if not -epsilon < u:
        return RegionResult(False, False, float("nan"), reason=f"-b+h outside (-{epsilon}, 0)")
    try:
        s, m = vache_parameters(b, h, constants)
    except OutOfRegime as exc:
        return RegionResult(False, False, float("nan"), reason=str(exc))
    val = lower_bound_d2(b, h, s, m, constants)
    return RegionResult(True, bool(val > 0), val, (s, m))


def critical_curve_d2(b: float, constants: BoundConstants, epsilon: float = DEFAULT_EPSILON, grid: int = 400) -> float:
    """Lowest ``h`` from which :func:`region_positive_d2` holds at fixed ``b``.

    Returns ``nan`` when no grid point is positive, when ``b >= epsilon`` (the
    window ``-b + h > -epsilon`` then excludes every ``h <= 0``) and when
    positivity already holds at the lower edge of that window, since the
    crossing then lies outside the domain of the estimate.
    """
    if b == 0:
        return 0.0
    if b >= epsilon:
        return float("nan")
    lo = max(-b, -epsilon + b) + 1e-12
    hs = np.linspace(lo, b - 1e-12, grid)
    pos = np.array([region_positive_d2(b, h, constants, epsilon).positive for h in hs])
    if not pos.any():
        return float("nan")
    j = int(np.argmax(pos))
    if j == 0:
        return float(hs[0]) if -epsilon + b < -b else float("nan")

    def f(h):
        return 1.0 if region_positive_d2(b, h, constants, epsilon).positive else -1.0

    return _bisect(f, float(hs[j - 1]), float(hs[j]), 1e-12)


# ---------------------------------------------------------------------------
# constants


def estimate_constants(d: int, a: float, m: float | None = None, n_fit: int = 32,
                       m_grid=(0.3, 0.1, 0.03, 0.01)) -> BoundConstants:
    """Instantiate the bound constants with recorded provenance.

    d >= 3: window mass ``C2`` and overlap slope ``C1`` of ``Normal(a, g_d(0))``.
    d = 2: the variance is the killed whole-lattice Green value at mass ``m``;
    ``C1~ = |log m|`` times the window mass, ``C1 = |log m|`` times the overlap
    slope, and ``C'`` the largest ``series / (m^2 |log m|)`` over ``m_grid`` on an
    ``n_fit`` box.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    if d >= 3:
        g = green_infinite(d)
        C2 = float(window_probability(a, g, a))
        C1 = overlap_derivative(g, a)
        prov = {
            "C1": f"overlap_derivative(variance=g_{d}(0)={g:.10f}, a={a}, s_max=a/4)",
            "C2": f"P(Normal(a, g_{d}(0)) in [-a, a]) with g_{d}(0)={g:.10f}",
        }
        return BoundConstants(d, a, C1, C2, provenance=prov)
    if d != 2:
        raise ValueError("d must be >= 2")
    if m is None or not 0 < m < 0.5:
        raise ValueError("d=2 constants need a mass m in (0, 0.5)")
    rho = 1.0 / (1.0 + 2.0 * m * m)
    var = rho * killed_green_infinite(2, rho)
    L = abs(np.log(m))
    mass = float(window_probability(a, var, a))
    C1_tilde = L * mass
    C1 = L * overlap_derivative(var, a)
    fits = {mm: ratio_Z_series(mm, n_fit) / (mm * mm * abs(np.log(mm))) for mm in m_grid}
    C_prime = max(fits.values())
    prov = {
        "C1": f"|log m| * overlap_derivative(variance={var:.10f}, a={a}) at m={m}",
        "C2": f"P(Normal(a, {var:.10f}) in [-a, a]) (massive window mass at m={m})",
        "C1_tilde": f"|log m| * window mass at m={m}",
        "C_prime": f"max over m in {list(m_grid)} of ratio_Z_series(m, n={n_fit})/(m^2|log m|)",
        "variance": var,
    }
    return BoundConstants(2, a, C1, mass, C1_tilde, C_prime, m, prov)


def density_window_lower_bound(variance: float, a: float) -> float:
    """``2a`` times the density of ``Normal(a, variance)`` at ``-a`` (a lower bound on the window mass)."""
    return float(2 * a * normal_pdf(2 * a, variance))


def massive_window_check(m: float, a: float, n: int = 64) -> tuple[float, float]:
    """``(C1~/|log m|, window mass at the box-centre variance)`` for comparison."""
    c = estimate_constants(2, a, m)
    var, _ = massive_variance_bound(m, n)
    return c.C1_tilde / abs(np.log(m)), float(window_probability(a, var, a))


def curve_rows(b_grid, d: int, a: float, m: float = 0.1, epsilon: float = DEFAULT_EPSILON) -> list[dict]:
    """Rows of the curve export: annealed line and both quenched-bound curves."""
    c3 = estimate_constants(max(d, 3), a)
    c2 = estimate_constants(2, a, m)
    rows = []
    for b in b_grid:
        b = float(b)
        try:
            h3 = critical_curve_d3(b, c3)["bisection"]
        except OutOfRegime:
            h3 = float("nan")
        rows.append({
            "b": b,
            "h_annealed": annealed_critical_h(b),
            "h_quenched_bound_d3": h3,
            "h_quenched_bound_d2": critical_curve_d2(b, c2, epsilon),
            "K": c3.K,
            "C1": c3.C1,
            "C2": c3.C2,
            "C1_tilde": c2.C1_tilde,
            "C_prime": c2.C_prime,
        })
    return rows


__all__ = [
    "BoundConstants", "OutOfRegime", "RegionResult", "annealed_strength", "annealed_critical_h",
    "lower_bound_d3", "optimal_shift_d3", "region_positive_d3", "critical_curve_d3",
    "lower_bound_d2", "vache_parameters", "region_positive_d2", "critical_curve_d2",
    "estimate_constants", "density_window_lower_bound", "massive_window_check", "curve_rows",
]
