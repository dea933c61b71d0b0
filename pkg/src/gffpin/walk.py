"""Simple random walk engine.

Return probabilities, box-restricted (and killed) Green functions, Stirling
asymptotics and the random-walk series for the massive partition function.

With precision ``Q = (1 + 2m^2) I - A/(2d)`` one has
``Q = (1 + 2m^2) (I - rho P)`` with ``P`` the box-restricted transition
matrix and ``rho = 1/(1 + 2m^2)``, hence

    Q^{-1}_{xy} = rho * sum_l rho^l P_x(X_l = y, tau > l).

:func:`WalkKernel.from_mass` sets both the survival probability and the
``rho`` prefactor so that :func:`green_restricted` reproduces ``Q^{-1}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, zeta
from scipy.stats import binom

from .lattice import BoxSpec

logger = logging.getLogger(__name__)

TAIL_TOL = 1e-14


class DivergentGreenFunction(ValueError):
    """The requested Green function is infinite."""


@dataclass(frozen=True)
class WalkKernel:
    """Walk on ``Z^d`` surviving each step with probability ``survival``.

    ``scale`` multiplies every Green value; it is ``1`` for the plain walk
    series and ``survival`` for kernels built from a mass.
    """

    d: int
    survival: float = 1.0
    box: BoxSpec | None = None
    scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.survival <= 1.0:
            raise ValueError(f"survival must lie in [0, 1], got {self.survival}")
        if self.box is not None and self.box.d != self.d:
            raise ValueError("box dimension does not match walk dimension")

    @classmethod
    def from_mass(cls, d: int, m: float, box: BoxSpec | None = None) -> "WalkKernel":
        rho = 1.0 / (1.0 + 2.0 * m * m)
        return cls(d, rho, box, rho)


# ---------------------------------------------------------------------------
# return probabilities


def _log_central_binom(k):
    """log of C(2k, k) 4^{-k}."""
    k = np.asarray(k, dtype=float)
    return gammaln(2 * k + 1) - 2 * gammaln(k + 1) - 2 * k * np.log(2.0)


def _returns_1d(max_steps: int) -> np.ndarray:
    p = np.zeros(max_steps + 1)
    p[0::2] = np.exp(_log_central_binom(np.arange(0, max_steps // 2 + 1)))
    return p


def _mix_sequences(first: np.ndarray, second: np.ndarray, w: float) -> np.ndarray:
    """Combine per-step sequences of two independent walks that are advanced
    with probabilities ``w`` and ``1 - w`` at each step.

    ``out[k] = sum_j Binom(k, j; w) first[j] second[k - j]``.  The binomial
    weights are truncated to 14 standard deviations around their mean.
    """
    K = len(first) - 1
    out = np.empty(K + 1)
    for k in range(K + 1):
        sd = np.sqrt(k * w * (1 - w))
        lo = max(0, int(np.floor(k * w - 14 * sd - 1)))
        hi = min(k, int(np.ceil(k * w + 14 * sd + 1)))
        j = np.arange(lo, hi + 1)
        out[k] = np.dot(binom.pmf(j, k, w) * first[j], second[k - j])
    return out


def return_probabilities(d: int, max_steps: int) -> np.ndarray:
    """``P_0(X_k = 0)`` for ``k = 0..max_steps``.

    d=1 and d=2 use closed forms (in d=2 the walk factorises along the
    diagonals); higher d convolve one axis at a time.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    p1 = _returns_1d(max_steps)
    if d == 1:
        return p1
    p = p1**2
    for k in range(3, d + 1):
        p = _mix_sequences(p, p1, (k - 1) / k)
    return p


def return_probability(d: int, steps: int) -> float:
    if steps < 0 or steps % 2:
        if steps < 0:
            raise ValueError("steps must be non-negative")
        return 0.0
    if d == 2:
        return float(np.exp(2 * _log_central_binom(steps // 2)))
    return float(return_probabilities(d, steps)[steps])


def stirling_check(ell: int) -> float:
    """``P_0(X_{2l} = 0) * pi * l`` in d=2; tends to 1."""
    if ell < 1:
        raise ValueError("ell must be >= 1")
    return return_probability(2, 2 * ell) * np.pi * ell


# ---------------------------------------------------------------------------
# box-restricted dynamic programming


def _box_step(v: np.ndarray, d: int) -> np.ndarray:
    """One step of the box-restricted walk on a batch of densities ``(B, n, ..., n)``."""
    out = np.zeros_like(v)
    for axis in range(1, d + 1):
        hi = [slice(None)] * (d + 1)
        lo = [slice(None)] * (d + 1)
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        out[tuple(hi)] += v[tuple(lo)]
        out[tuple(lo)] += v[tuple(hi)]
    out *= 1.0 / (2 * d)
    return out


def box_spectral_radius(box: BoxSpec) -> float:
    """Largest eigenvalue of the box-restricted transition matrix."""
    return float(np.cos(np.pi / (box.n + 1)))


@dataclass(frozen=True)
class GreenResult:
    values: np.ndarray
    steps: int
    tail_bound: float


def green_restricted_rows(kernel: WalkKernel, sources, max_steps: int = 10_000_000) -> GreenResult:
    """Rows ``G(x, .)`` of the restricted (killed) Green function for each source ``x``.

    Iterates the walk density until the L2 tail bound
    ``||v_l||_2 * q / (1 - q)`` with ``q = rho * lambda_max`` drops below
    ``TAIL_TOL``.
    """
    box = kernel.box
    if box is None:
        raise ValueError("green_restricted_rows needs a box")
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    N = box.num_sites
    d, rho = kernel.d, kernel.survival
    v = np.zeros((len(sources), N))
    v[np.arange(len(sources)), sources] = 1.0
    v = v.reshape((len(sources),) + box.shape)
    acc = v.copy()
    q = rho * box_spectral_radius(box)
    steps = 0
    tail = np.inf
    while steps < max_steps:
        v = _box_step(v, d)
        if rho != 1.0:
            v *= rho
        steps += 1
        acc += v
        norm = float(np.sqrt(np.max(np.sum(v.reshape(len(sources), -1) ** 2, axis=1))))
        tail = norm * q / (1.0 - q) if q < 1 else np.inf
        if tail < TAIL_TOL or norm == 0.0:
            break
    return GreenResult(kernel.scale * acc.reshape(len(sources), N), steps, kernel.scale * tail)


def green_restricted(kernel: WalkKernel, x: int, y: int) -> float:
    """``scale * sum_l rho^l P_x(X_l = y, tau > l)``.

    Without a box only the d>=3 or killed diagonal is available, through the
    infinite-volume return-probability series.
    """
    if kernel.box is None:
        if kernel.d <= 2 and kernel.survival == 1.0:
            raise DivergentGreenFunction("infinite Green function")
        if x != y:
            raise NotImplementedError("off-diagonal infinite-volume Green function")
        if kernel.survival == 1.0:
            return kernel.scale * green_infinite(kernel.d)
        return kernel.scale * killed_green_infinite(kernel.d, kernel.survival)
    return float(green_restricted_rows(kernel, [x]).values[0, y])


def walk_mass_history(kernel: WalkKernel, x: int, steps: int):
    """Per-step (alive, exited, killed) probability masses of the walk from ``x``."""
    box = kernel.box
    v = np.zeros((1,) + box.shape)
    v.flat[x] = 1.0
    alive, exited, killed = [1.0], [0.0], [0.0]
    for _ in range(steps):
        before = float(v.sum())
        moved = _box_step(v, kernel.d)
        kept = float(moved.sum())
        v = moved * kernel.survival
        exited.append(exited[-1] + before - kept)
        killed.append(killed[-1] + kept * (1.0 - kernel.survival))
        alive.append(float(v.sum()))
    return np.array(alive), np.array(exited), np.array(killed)


# ---------------------------------------------------------------------------
# infinite volume


def green_infinite(d: int, terms: int = 4000) -> float:
    """``g_d(0) = sum_l P_0(X_l = 0)`` for d >= 3, accurate to well below 1e-6.

    Exact terms up to ``2 * terms`` steps; the tail uses
    ``P_0(X_{2l}=0) ~ A l^{-d/2} (1 + c1/l + c2/l^2)`` with ``A = 2 (d/4pi)^{d/2}``
    and ``c1, c2`` fitted on the last computed terms, summed with Hurwitz zeta.
    """
    return green_infinite_with_error(d, terms)[0]


def green_infinite_with_error(d: int, terms: int = 4000) -> tuple[float, float]:
    if d <= 2:
        raise DivergentGreenFunction(f"the simple random walk is recurrent in d={d}")
    p = return_probabilities(d, 2 * terms)[0::2]
    head = float(np.sum(p))
    A = 2.0 * (d / (4 * np.pi)) ** (d / 2)
    ell = np.arange(terms // 2, terms + 1, dtype=float)
    resid = p[terms // 2 :] / (A * ell ** (-d / 2)) - 1.0
    design = np.stack([1 / ell, 1 / ell**2], axis=1)
    (c1, c2), *_ = np.linalg.lstsq(design, resid, rcond=None)
    q = terms + 1
    tail = A * (zeta(d / 2, q) + c1 * zeta(d / 2 + 1, q) + c2 * zeta(d / 2 + 2, q))
    err = abs(A * c2 * zeta(d / 2 + 2, q)) + 1e-12
    return head + float(tail), float(err)


def killed_green_infinite(d: int, survival: float, max_terms: int = 2_000_000) -> float:
    """``sum_l survival^l P_0(X_l = 0)`` on the whole lattice (no box).

    In d=2 the exact terms run until the geometric remainder is below
    ``TAIL_TOL`` or ``max_terms``; beyond that the leading asymptotics
    ``1/(pi l)`` is summed in closed form with ``-log(1 - x)``.
    """
    if survival >= 1.0:
        return green_infinite(d)
    if survival <= 0.0:
        return 1.0
    x = survival * survival
    if d == 2:
        # remainder after L even terms is below x^L / (1 - x)
        L = int(np.ceil(np.log(TAIL_TOL * (1 - x)) / np.log(x)))
        L = max(1, min(L, max_terms))
        ell = np.arange(0, L + 1)
        logx = np.log(x)
        terms = np.exp(2 * _log_central_binom(ell) + ell * logx)
        total = float(np.sum(terms))
        if L == max_terms:
            head = float(np.sum(np.exp(ell[1:] * logx) / ell[1:]))
            total += (-np.log1p(-x) - head) / np.pi
        return total
    L = int(np.ceil(np.log(TAIL_TOL * (1 - survival)) / np.log(survival)))
    p = return_probabilities(d, L)
    return float(np.sum(p * survival ** np.arange(L + 1)))


# ---------------------------------------------------------------------------
# massive field: variance and partition-function series


def massive_variance_bound(m: float, n: int) -> tuple[float, float]:
    """Killed restricted Green value at the centre of the d=2 box and its ratio to ``|log m|``."""
    if not 0 < m < 0.5:
        raise ValueError("m must lie in (0, 0.5)")
    if n < 4:
        raise ValueError("n must be >= 4")
    box = BoxSpec(2, n)
    kernel = WalkKernel.from_mass(2, m, box)
    c = box.center()
    var = green_restricted(kernel, c, c)
    return var, var / abs(np.log(m))


def path_traces(n: int, max_steps: int) -> np.ndarray:
    """``tr(T^k)`` for ``k = 0..max_steps``, ``T`` the lazy-free walk on a path of ``n`` sites
    killed on leaving it (each neighbour with probability 1/2)."""
    M = np.eye(n)
    out = np.empty(max_steps + 1)
    out[0] = n
    for k in range(1, max_steps + 1):
        nxt = np.zeros_like(M)
        nxt[:, 1:] += M[:, :-1]
        nxt[:, :-1] += M[:, 1:]
        M = 0.5 * nxt
        out[k] = np.trace(M)
    return out


def box_return_traces(box: BoxSpec, max_steps: int) -> np.ndarray:
    """``sum_x P_x(X_k = x, tau > k)`` for ``k = 0..max_steps``.

    The box-restricted walk is the superposition of independent path walks
    along each axis, one of which is advanced per step, so its traces are
    binomial mixtures of products of path traces.
    """
    t1 = path_traces(box.n, max_steps)
    t = t1
    for k in range(2, box.d + 1):
        t = _mix_sequences(t, t1, (k - 1) / k)
    return t


@dataclass(frozen=True)
class SeriesResult:
    value: float
    steps: int
    tail_bound: float


def ratio_Z_series_detail(m: float, n: int, d: int = 2) -> SeriesResult:
    """Random-walk series for ``|Lambda|^{-1} log(Z_0 / Z_m)`` (zero boundary, zero centre).

    ``log det Q_m - log det Q_0 = N log(1 + 2m^2) + sum_l tr(P^{2l}) (1 - rho^{2l}) / l``,
    so the per-site value is
    ``1/2 log(1 + 2m^2) + 1/2 sum_l (1/2l) (1 - rho^{2l}) N^{-1} tr(P^{2l})``.
    """
    if m < 0:
        raise ValueError("m must be non-negative")
    box = BoxSpec(d, n)
    if m == 0:
        return SeriesResult(0.0, 0, 0.0)
    lam = box_spectral_radius(box)
    rho = 1.0 / (1.0 + 2.0 * m * m)
    # per-site trace q_{2l} <= lam^{2l}, remainder after L terms <= lam^{2L} lam^2 / (2L (1 - lam^2))
    L = int(np.ceil(np.log(TAIL_TOL * 2 * (1 - lam**2) / lam**2) / (2 * np.log(lam))))
    L = max(L, 1)
    q = box_return_traces(box, 2 * L)[0::2] / box.num_sites
    ell = np.arange(1, L + 1)
    series = np.sum(q[1:] * (1.0 - rho ** (2 * ell)) / (2 * ell))
    tail = float(q[L] * lam**2 / (2 * L * (1 - lam**2)))
    return SeriesResult(0.5 * np.log1p(2 * m * m) + 0.5 * float(series), 2 * L, 0.5 * tail)


def ratio_Z_series(m: float, n: int) -> float:
    if not 0 <= m < 0.5:
        raise ValueError("m must lie in [0, 0.5)")
    return ratio_Z_series_detail(m, n, 2).value
