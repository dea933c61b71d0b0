"""Exact Gaussian machinery for the massless and massive lattice free field.

The density on the box is ``exp(-1/2 phi^T Q phi + r^T phi + c)`` with

* ``Q_xx = 1 + 2 m^2`` and ``Q_xy = -1/(2d)`` for neighbouring sites,
* ``r_x = bc * k_x / (2d) + 2 m^2 * center`` where ``k_x`` counts outer neighbours,
* ``c = -bc^2 * |boundary edges| / (4d) - m^2 * center^2 * |box|``.

Boundary sites are never materialised; the boundary value only enters ``r``
and ``c``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import optimize
from scipy.special import log_ndtr, ndtr

from . import FORMAT_VERSION
from ._formats import check_format_version
from .lattice import BoxSpec, enumerate_edges

logger = logging.getLogger(__name__)

DENSE_LIMIT = 4096
SQRT_2PI = np.sqrt(2.0 * np.pi)


class SolverError(RuntimeError):
    """A linear solve did not reach the requested residual."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def precision_matrix(box: BoxSpec, m: float = 0.0) -> sp.csr_matrix:
    """Sparse precision operator of the free field on ``box`` with mass ``m``."""
    N = box.num_sites
    edges = enumerate_edges(box)
    i, j = edges.interior[:, 0], edges.interior[:, 1]
    off = np.full(len(i), -1.0 / (2 * box.d))
    rows = np.concatenate([i, j, np.arange(N)])
    cols = np.concatenate([j, i, np.arange(N)])
    vals = np.concatenate([off, off, np.full(N, 1.0 + 2.0 * m * m)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


@dataclass(frozen=True, eq=False)
class GaussianModel:
    box: BoxSpec
    m: float = 0.0
    bc: float = 0.0
    center: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.m >= 0:
            raise ValueError(f"mass must be non-negative, got {self.m}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def num_sites(self) -> int:
        return self.box.num_sites

    @cached_property
    def Q(self) -> sp.csr_matrix:
        return self.beta * precision_matrix(self.box, self.m)

    @cached_property
    def r(self) -> np.ndarray:
        k = self.box.outer_neighbor_count()
        return self.beta * (self.bc * k / (2 * self.box.d) + 2.0 * self.m**2 * self.center)

    @property
    def const(self) -> float:
        nbe = 2 * self.box.d * self.box.n ** (self.box.d - 1) if self.box.n else 0
        return -self.beta * (
            self.bc**2 * nbe / (4 * self.box.d) + self.m**2 * self.center**2 * self.num_sites
        )

    @property
    def dense(self) -> bool:
        return self.num_sites <= DENSE_LIMIT

    @cached_property
    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor of the dense precision matrix."""
        return la.cholesky(self.Q.toarray(), lower=True)

    @cached_property
    def _splu(self):
        return spla.splu(self.Q.tocsc())

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.dense:
            x = la.cho_solve((self.cholesky, True), rhs)
        else:
            x = self._splu.solve(np.asarray(rhs, dtype=float))
        resid = np.max(np.abs(self.Q @ x - rhs)) if np.size(rhs) else 0.0
        scale = max(1.0, float(np.max(np.abs(rhs)))) if np.size(rhs) else 1.0
        if resid > 1e-8 * scale:
            raise SolverError("precision solve did not converge", resid)
        return x

    @cached_property
    def mean(self) -> np.ndarray:
        return self.solve(self.r)

    def covariance(self) -> np.ndarray:
        """Dense ``Q^{-1}``; only for boxes up to ``DENSE_LIMIT`` sites."""
        if not self.dense:
            raise ValueError("dense covariance requested for a large box; use variance_at")
        return la.cho_solve((self.cholesky, True), np.eye(self.num_sites))

    def variance_at(self, sites) -> np.ndarray:
        """Marginal variances at the requested sites via per-column solves."""
        sites = np.atleast_1d(sites)
        rhs = np.zeros((self.num_sites, len(sites)))
        rhs[sites, np.arange(len(sites))] = 1.0
        cols = self.solve(rhs)
        return cols[sites, np.arange(len(sites))]

    def logdet(self) -> float:
        if self.num_sites == 0:
            return 0.0
        if self.dense:
            return 2.0 * float(np.sum(np.log(np.diag(self.cholesky))))
        return float(np.sum(np.log(np.abs(self._splu.U.diagonal()))))


def build_model(box: BoxSpec, m: float = 0.0, bc: float = 0.0, center: float | None = None) -> GaussianModel:
    """Assemble the free-field model; ``center`` defaults to ``bc``."""
    if m < 0:
        raise ValueError(f"mass must be non-negative, got {m}")
    return GaussianModel(box, float(m), float(bc), float(bc if center is None else center))


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    variance: np.ndarray
    log_partition: float


@dataclass(frozen=True, eq=False)
class FieldConfig:
    box: BoxSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.box.num_sites,):
            raise ValueError(f"expected {self.box.num_sites} heights, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", vals)


def marginal_summary(model: GaussianModel) -> GaussianSummary:
    if model.dense:
        var = np.diag(model.covariance()).copy()
    else:
        var = model.variance_at(np.arange(model.num_sites))
    return GaussianSummary(model.mean.copy(), var, log_partition(model))


def sample_exact(model: GaussianModel, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Exact draws ``mean + L^{-T} z`` with ``Q = L L^T``.

    Returns an array of shape ``(num_sites,)`` or ``(size, num_sites)``.
    """
    N = model.num_sites
    k = 1 if size is None else int(size)
    z = rng.standard_normal((N, k))
    if not model.dense:
        raise ValueError("exact sampling is limited to boxes of at most %d sites" % DENSE_LIMIT)
    x = la.solve_triangular(model.cholesky, z, lower=True, trans="T")
    x += model.mean[:, None]
    return x[:, 0] if size is None else x.T


def log_partition(model: GaussianModel) -> float:
    """``log Z(model) - log Z(massless, zero boundary)`` on the same box.

    ``log Z = c + 1/2 r^T Q^{-1} r - 1/2 log det Q + N/2 log(2 pi)``; the
    ``2 pi`` constant cancels in the difference.
    """
    if model.num_sites == 0:
        return 0.0
    ref = GaussianModel(model.box, 0.0, 0.0, 0.0, 1.0)
    quad = 0.5 * float(model.r @ model.mean)
    return model.const + quad - 0.5 * model.logdet() + 0.5 * ref.logdet()


def window_probability(mean, variance, a, s=0.0):
    """``P(phi + s in [-a, a])`` for ``phi ~ Normal(mean, variance)``.

    Works on arrays.  When both window edges sit in the upper tail the
    computation is mirrored so that ``ndtr`` is only evaluated where it keeps
    full absolute accuracy.
    """
    sd = np.sqrt(variance)
    mu = np.asarray(mean, dtype=float) + s
    hi = (a - mu) / sd
    lo = (-a - mu) / sd
    flip = lo > 0
    out = np.where(flip, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
    return out if np.ndim(out) else float(out)


def log_window_probability(mean, variance, a):
    """``log P(phi in [-a, a])`` without underflow when the window is far in a tail."""
    sd = np.sqrt(variance)
    mu = np.asarray(mean, dtype=float)
    hi = (a - mu) / sd
    lo = (-a - mu) / sd
    # windows in the upper tail are mirrored into the lower one
    flip = lo > 0
    lo2 = np.where(flip, -hi, lo)
    hi2 = np.where(flip, -lo, hi)
    top = log_ndtr(hi2)
    with np.errstate(divide="ignore"):
        out = top + np.log1p(-np.exp(log_ndtr(lo2) - top))
    return out if np.ndim(out) else float(out)


def normal_pdf(x, variance=1.0):
    return np.exp(-0.5 * np.asarray(x) ** 2 / variance) / (SQRT_2PI * np.sqrt(variance))


def overlap_loss(variance: float, a: float, s):
    """``P(phi in [-a,a]) - P(phi + s in [-a,a])`` for ``phi ~ Normal(a, variance)``."""
    return window_probability(a, variance, a, 0.0) - window_probability(a, variance, a, s)


def overlap_derivative(variance: float, a: float, s_max: float | None = None, grid: int = 2001) -> float:
    """Largest slope ``C1`` with ``overlap_loss(s) >= C1 * s`` on ``(0, s_max]``.

    ``s_max`` defaults to ``a / 4``.  The minimum of ``overlap_loss(s) / s``
    is located on a grid and polished with a bounded scalar minimisation; the
    limit ``s -> 0`` is the density gap ``pdf(0) - pdf(2a)``.
    """
    if not variance > 0:
        raise ValueError("variance must be positive")
    s_max = a / 4.0 if s_max is None else float(s_max)
    slope0 = float(normal_pdf(0.0, variance) - normal_pdf(2.0 * a, variance))

    def ratio(s):
        return overlap_loss(variance, a, s) / s

    s = np.linspace(s_max / grid, s_max, grid)
    vals = ratio(s)
    k = int(np.argmin(vals))
    best = min(slope0, float(vals[k]))
    lo = s[max(k - 1, 0)]
    hi = s[min(k + 1, grid - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(ratio, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
        best = min(best, float(res.fun))
    return best


# ---------------------------------------------------------------------------
# FieldConfig export

_BIN_MAGIC = b"GFFD"
_BIN_HEADER = struct.Struct("<4sHHII")  # magic, major, minor, d, n


def field_to_csv(cfg: FieldConfig) -> str:
    coords = cfg.box.all_coords
    head = ",".join(["site_index"] + [f"x{k + 1}" for k in range(cfg.box.d)] + ["phi"])
    lines = [head]
    for i, (c, v) in enumerate(zip(coords, cfg.values)):
        lines.append(",".join([str(i), *map(str, c), repr(float(v))]))
    return "\n".join(lines) + "\n"


def field_from_csv(text: str) -> FieldConfig:
    rows = [ln.split(",") for ln in text.strip().splitlines()]
    d = len(rows[0]) - 2
    n = int(round((len(rows) - 1) ** (1.0 / d)))
    box = BoxSpec(d, n)
    vals = np.array([float(r[-1]) for r in rows[1:]])
    return FieldConfig(box, vals)


def field_to_bytes(cfg: FieldConfig) -> bytes:
    """Little-endian dump: header (magic, version, d, n) then float64 heights in row-major order."""
    major, minor = (int(p) for p in FORMAT_VERSION.split("."))
    head = _BIN_HEADER.pack(_BIN_MAGIC, major, minor, cfg.box.d, cfg.box.n)
    return head + cfg.values.astype("<f8").tobytes()


def field_from_bytes(data: bytes) -> FieldConfig:
    magic, major, minor, d, n = _BIN_HEADER.unpack_from(data)
    if magic != _BIN_MAGIC:
        raise ValueError("not a field dump")
    check_format_version(f"{major}.{minor}")
    box = BoxSpec(d, n)
    vals = np.frombuffer(data, dtype="<f8", offset=_BIN_HEADER.size)
    return FieldConfig(box, vals.astype(float))
