"""Free-energy estimators for the disordered square-well pinning model.

Three independent routes to ``log(Z^e / Z^0)``:

* importance sampling (IS) with exact free-field draws as proposals,
* thermodynamic integration (TI) over ``lambda in [0, 1]`` with a
  checkerboard heat-bath sampler whose site conditionals are sampled exactly,
* a deterministic inclusion-exclusion oracle for boxes of at most 12 sites.

Random streams are derived from ``numpy.random.SeedSequence([seed, tag, unit])``
so results do not depend on scheduling.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri, ndtri_exp, roots_legendre
from scipy.stats import qmc

from . import FORMAT_VERSION, __version__
from ._formats import check_format_version
from .gaussfield import GaussianModel, log_window_probability, sample_exact, window_probability
from .lattice import BoxSpec, Environment, homogeneous_environment, sample_environment

logger = logging.getLogger(__name__)

_TAG_IS, _TAG_TI, _TAG_ENV, _TAG_EST = 1, 2, 3, 4

TI_NODES = 8
TI_BURN_IN = 200
TI_SWEEPS = 2000
ORACLE_MAX_SITES = 12


def derived_rng(seed: int, *unit: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, unit)]))


def derived_seed(seed: int, *unit: int) -> int:
    ss = np.random.SeedSequence([int(seed), *map(int, unit)])
    return int(ss.generate_state(1, np.uint32)[0])


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PinningModel:
    env: Environment
    a: float
    base: GaussianModel

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("well half-width a must be positive")
        if self.env.box != self.base.box:
            raise ValueError("environment and Gaussian model live on different boxes")

    @property
    def box(self) -> BoxSpec:
        return self.base.box

    @cached_property
    def potential(self) -> np.ndarray:
        """Effective site weights ``beta * v_x``."""
        return self.base.beta * self.env.potential


def make_model(env: Environment, a: float, base: GaussianModel | None = None) -> PinningModel:
    return PinningModel(env, float(a), base or GaussianModel(env.box))


def potential_energy(model: PinningModel, phi) -> np.ndarray | float:
    """``sum_x v_x 1{phi_x in [-a, a]}`` (closed window); ``phi`` may be a batch."""
    phi = np.asarray(phi)
    inside = np.abs(phi) <= model.a
    out = inside @ model.potential
    return out if np.ndim(out) else float(out)


@dataclass
class FreeEnergyEstimate:
    value: float
    stderr: float
    n_samples: int
    estimator: str
    seed: int
    flags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise EstimatorError(f"non-finite {self.estimator} estimate")
        if self.stderr < 0:
            raise EstimatorError("negative standard error")

    def record(self, d, n, a, b, h) -> dict:
        return {
            "d": d, "n": n, "a": a, "b": b, "h": h,
            "seed": self.seed,
            "estimator": self.estimator,
            "value": self.value,
            "stderr": self.stderr,
            "n_samples": self.n_samples,
            "flags": "|".join(self.flags),
            "version": __version__,
            "format_version": FORMAT_VERSION,
        }


RESULT_COLUMNS = ["d", "n", "a", "b", "h", "seed", "estimator", "value", "stderr",
                  "n_samples", "flags", "version", "format_version"]


def results_to_json(records: list[dict]) -> str:
    return "\n".join(json.dumps(r) for r in records) + "\n"


def results_from_json(text: str) -> list[dict]:
    out = []
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            check_format_version(rec.get("format_version"))
            out.append(rec)
    return out


def append_results_csv(path, records: list[dict]) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerows(records)


def read_results_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        check_format_version(r.get("format_version"))
    return rows


# ---------------------------------------------------------------------------
# importance sampling


def estimate_quenched_IS(model: PinningModel, N: int, seed: int = 0, chunk: int = 4096) -> FreeEnergyEstimate:
    """Per-site ``log E_GFF[exp(potential_energy)]`` from ``N`` exact free-field draws.

    The log is taken after averaging the weights; the standard error is the
    delta-method error of the log of the mean.
    """
    if N < 100:
        raise ValueError("IS needs at least 100 samples")
    rng = derived_rng(seed, _TAG_IS)
    sites = model.box.num_sites
    if not np.any(model.potential):
        return FreeEnergyEstimate(0.0, 0.0, N, "IS", seed)
    logw = np.empty(N)
    for start in range(0, N, chunk):
        k = min(chunk, N - start)
        logw[start:start + k] = potential_energy(model, sample_exact(model.base, rng, k))
    log_mean = logsumexp(logw) - np.log(N)
    w = np.exp(logw - logw.max())
    mean_w = w.mean()
    if not mean_w > 0:
        raise EstimatorError("non-positive importance weight mean")
    rel = float(w.std(ddof=1) / (np.sqrt(N) * mean_w))
    flags = ["unreliable"] if rel > 0.5 else []
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return FreeEnergyEstimate(float(log_mean) / sites, rel / sites, N, "IS", seed, flags,
                              {"relative_stderr": rel, "ess": ess})


def predicted_is_logvar(model: PinningModel) -> float:
    """Variance of the log-weight if window indicators were independent."""
    base = model.base
    var = np.diag(base.covariance()) if base.dense else 1.0 / base.Q.diagonal()
    p = window_probability(base.mean, var, model.a)
    return float(np.sum(model.potential**2 * p * (1 - p)))


# ---------------------------------------------------------------------------
# heat bath


def _neighbor_table(box: BoxSpec) -> np.ndarray:
    """``(N, 2d)`` neighbour indices, ``N`` marking a site outside the box."""
    N = box.num_sites
    c = box.all_coords
    cols = []
    for axis in range(box.d):
        for step in (-1, 1):
            y = c.copy()
            y[:, axis] += step
            ok = (y[:, axis] >= 0) & (y[:, axis] < box.n)
            y[~ok, axis] = 0
            idx = np.ravel_multi_index(tuple(y.T), box.shape) if N else np.empty(0, int)
            cols.append(np.where(ok, idx, N))
    return np.stack(cols, axis=1) if cols else np.empty((N, 0), dtype=int)


def sample_square_well_conditional(mu, sd, a, logv, rng):
    """Exact draws from ``Normal(mu, sd^2)`` reweighted by ``exp(logv)`` on ``[-a, a]``.

    Three-piece mixture of truncated normals; each piece is sampled by the
    inverse CDF in log space.
    """
    mu = np.asarray(mu, dtype=float)
    alpha = (-a - mu) / sd
    beta = (a - mu) / sd
    log_left = log_ndtr(alpha)
    log_right = log_ndtr(-beta)
    log_mid = log_window_probability(mu, sd * sd, a) + logv
    logs = np.stack([log_left, log_mid, log_right])
    if not np.all(np.isfinite(logsumexp(logs, axis=0))):
        raise EstimatorError("non-finite conditional weights")
    probs = np.exp(logs - logsumexp(logs, axis=0))
    u_piece = rng.random(mu.shape)
    u = rng.random(mu.shape)
    piece = (u_piece >= probs[0]).astype(int) + (u_piece >= probs[0] + probs[1])
    logu = np.log(u)
    log1mu = np.log1p(-u)
    z = np.empty(mu.shape)
    left = piece == 0
    right = piece == 2
    middle = piece == 1
    z[left] = ndtri_exp(logu[left] + log_left[left])
    z[right] = -ndtri_exp(logu[right] + log_right[right])
    # middle piece, mirrored when the window sits in the upper tail
    lo, hi = alpha[middle], beta[middle]
    flip = lo > 0
    lo2 = np.where(flip, -hi, lo)
    hi2 = np.where(flip, -lo, hi)
    zm = ndtri_exp(np.logaddexp(log1mu[middle] + log_ndtr(lo2), logu[middle] + log_ndtr(hi2)))
    zm = np.clip(zm, lo2, hi2)
    z[middle] = np.where(flip, -zm, zm)
    return mu + sd * z


class HeatBath:
    """Checkerboard heat-bath chains for the measures with potentials ``lam * v``.

    One chain per entry of ``lams``, all advanced together.  The two parity
    sublattices are conditionally independent, so each half sweep updates one
    of them (in every chain) with a single vectorised exact draw.
    """

    def __init__(self, model: PinningModel, lams, rng: np.random.Generator, phi=None):
        self.model = model
        self.lams = np.atleast_1d(np.asarray(lams, dtype=float))
        self.rng = rng
        base = model.base
        box = model.box
        self.nbrs = _neighbor_table(box)
        self.qdiag = base.beta * (1.0 + 2.0 * base.m**2)
        self.coupling = base.beta / (2 * box.d)
        self.sd = 1.0 / np.sqrt(self.qdiag)
        self.r = base.r
        parity = box.all_coords.sum(axis=1) % 2 if box.num_sites else np.empty(0, int)
        self.sublattices = [np.flatnonzero(parity == p) for p in (0, 1)]
        self.logv = self.lams[:, None] * model.potential[None, :]
        if phi is None:
            phi = sample_exact(base, rng, len(self.lams))
        self.phi = np.array(np.broadcast_to(phi, (len(self.lams), box.num_sites)), dtype=float)

    def sweep(self) -> None:
        padded = np.concatenate([self.phi, np.zeros((len(self.lams), 1))], axis=1)
        for sites in self.sublattices:
            if len(sites) == 0:
                continue
            local = padded[:, self.nbrs[sites]].sum(axis=2)
            mu = (self.r[sites] + self.coupling * local) / self.qdiag
            padded[:, sites] = sample_square_well_conditional(
                mu, self.sd, self.model.a, self.logv[:, sites], self.rng)
        self.phi = padded[:, :-1]

    def run(self, sweeps: int, measure: bool = True) -> np.ndarray:
        """Advance ``sweeps`` sweeps; returns the potential energy per sweep, shape (sweeps, chains)."""
        out = np.empty((sweeps if measure else 0, len(self.lams)))
        for k in range(sweeps):
            self.sweep()
            if measure:
                out[k] = potential_energy(self.model, self.phi)
        return out


def batch_means(x: np.ndarray, nbatch: int = 20) -> tuple[float, float]:
    """Mean and batch-means standard error."""
    x = np.asarray(x, dtype=float)
    nbatch = max(2, min(nbatch, len(x) // 2))
    usable = len(x) - len(x) % nbatch
    means = x[:usable].reshape(nbatch, -1).mean(axis=1)
    return float(x.mean()), float(means.std(ddof=1) / np.sqrt(nbatch))


def estimate_quenched_TI(model: PinningModel, nodes: int = TI_NODES, sweeps: int = TI_SWEEPS,
                         burn_in: int = TI_BURN_IN, seed: int = 0) -> FreeEnergyEstimate:
    """Thermodynamic integration ``log Z(1) - log Z(0) = int_0^1 E_lam[U] dlam``.

    Gauss-Legendre quadrature over ``lambda``; each node runs its own
    heat-bath chain with ``burn_in`` discarded sweeps and ``sweeps``
    measurements; the chains are advanced together.
    """
    if nodes < 4:
        raise ValueError("TI needs at least 4 quadrature nodes")
    sites = model.box.num_sites
    meta = {"nodes": nodes, "sweeps": sweeps, "burn_in": burn_in}
    if not np.any(model.potential):
        return FreeEnergyEstimate(0.0, 0.0, nodes * sweeps, "TI", seed, [], meta)
    x, w = roots_legendre(nodes)
    lams, weights = 0.5 * (x + 1.0), 0.5 * w
    total, var = 0.0, 0.0
    flags = []
    integrand = []
    chains = HeatBath(model, lams, derived_rng(seed, _TAG_TI))
    chains.run(burn_in, measure=False)
    energies = chains.run(sweeps)
    for k, wt in enumerate(weights):
        u = energies[:, k]
        mean, se = batch_means(u)
        half = len(u) // 2
        m1, s1 = batch_means(u[:half], 10)
        m2, s2 = batch_means(u[half:], 10)
        spread = np.hypot(s1, s2)
        if spread > 0 and abs(m1 - m2) > 5 * spread and "non-stationary" not in flags:
            flags.append("non-stationary")
        total += wt * mean
        var += (wt * se) ** 2
        integrand.append(mean)
    meta["integrand"] = integrand
    meta["lambdas"] = lams.tolist()
    return FreeEnergyEstimate(float(total / sites), float(np.sqrt(var)) / sites, nodes * sweeps, "TI", seed, flags, meta)


# ---------------------------------------------------------------------------
# oracle


def genz_box_probability(mean, cov, lo, hi, log2_points: int = 13, replicates: int = 8, seed: int = 0):
    """``P(lo <= X <= hi)`` for ``X ~ Normal(mean, cov)`` by Genz's separation of variables.

    The transformed integrand over the unit cube is integrated with
    ``replicates`` independently scrambled Sobol' point sets (fixed seed);
    returns the estimate and its standard error across replicates.
    """
    k = len(mean)
    L = np.linalg.cholesky(cov)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (k,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (k,))
    if k == 1:
        sd = L[0, 0]
        return float(ndtr((hi[0] - mean[0]) / sd) - ndtr((lo[0] - mean[0]) / sd)), 0.0
    sobol_seed = np.random.default_rng(seed)
    estimates = []
    for _ in range(replicates):
        w = qmc.Sobol(k - 1, scramble=True, seed=sobol_seed).random_base2(log2_points)
        y = np.zeros((len(w), k))
        d = np.full(len(w), ndtr((lo[0] - mean[0]) / L[0, 0]))
        e = np.full(len(w), ndtr((hi[0] - mean[0]) / L[0, 0]))
        f = e - d
        for i in range(1, k):
            y[:, i - 1] = ndtri(np.clip(d + w[:, i - 1] * (e - d), 1e-300, 1 - 1e-16))
            shift = y[:, :i] @ L[i, :i]
            d = ndtr((lo[i] - mean[i] - shift) / L[i, i])
            e = ndtr((hi[i] - mean[i] - shift) / L[i, i])
            f = f * (e - d)
        estimates.append(f.mean())
    est = np.array(estimates)
    return float(est.mean()), float(est.std(ddof=1) / np.sqrt(replicates))


def oracle_Z_ratio(model: PinningModel) -> float:
    """``Z^e / Z^0 = sum_S prod_{x in S} (e^{v_x} - 1) P(phi_x in [-a, a] for x in S)``.

    Window probabilities of the free field over each subset come from
    :func:`genz_box_probability` (exact in one dimension).  Sites with
    ``v_x = 0`` contribute nothing and are skipped.
    """
    return oracle_Z_ratio_detail(model)[0]


def oracle_Z_ratio_detail(model: PinningModel) -> tuple[float, float]:
    """Oracle Z-ratio together with a bound on its quadrature error."""
    box = model.box
    if box.num_sites > ORACLE_MAX_SITES:
        raise ValueError(f"oracle limited to {ORACLE_MAX_SITES} sites, box has {box.num_sites}")
    active = np.flatnonzero(model.potential != 0)
    coef = np.expm1(model.potential)
    mean = model.base.mean
    cov = model.base.covariance()
    total, err2 = 1.0, 0.0
    for k in range(1, len(active) + 1):
        for subset in combinations(active, k):
            s = list(subset)
            p, se = genz_box_probability(mean[s], cov[np.ix_(s, s)], -model.a, model.a)
            c = float(np.prod(coef[s]))
            total += c * p
            err2 += (c * se) ** 2
    return total, 3.0 * float(np.sqrt(err2))


def oracle_free_energy(model: PinningModel) -> float:
    return float(np.log(oracle_Z_ratio(model)) / model.box.num_sites)


# ---------------------------------------------------------------------------
# dispatch, annealed and disorder averages


def estimate_quenched(model: PinningModel, method: str = "auto", N: int = 20_000, seed: int = 0,
                      nodes: int = TI_NODES, sweeps: int = TI_SWEEPS, burn_in: int = TI_BURN_IN) -> FreeEnergyEstimate:
    """Dispatch to IS or TI; ``auto`` picks IS when the predicted log-weight variance is at most 1."""
    if method == "auto":
        method = "IS" if predicted_is_logvar(model) <= 1.0 else "TI"
    if method == "IS":
        return estimate_quenched_IS(model, N, seed)
    if method == "TI":
        return estimate_quenched_TI(model, nodes, sweeps, burn_in, seed)
    if method == "ORACLE":
        return FreeEnergyEstimate(oracle_free_energy(model), 0.0, 0, "ORACLE", seed)
    raise ValueError(f"unknown estimator {method!r}")


def annealed_strength(b: float, h: float) -> float:
    """``log E exp(b e + h) = h + log cosh b`` for fair signs."""
    b = abs(b)
    return h + b + np.log1p(np.exp(-2 * b)) - np.log(2.0)


def estimate_annealed(box: BoxSpec, b: float, h: float, a: float, N: int = 20_000, seed: int = 0,
                      method: str = "IS", base: GaussianModel | None = None, **kw) -> FreeEnergyEstimate:
    """Annealed free energy as homogeneous pinning of strength ``h + log cosh b``."""
    env = homogeneous_environment(box, annealed_strength(b, h))
    return estimate_quenched(make_model(env, a, base), method, N, seed, **kw)


@dataclass
class DisorderAverage:
    mean: float
    stderr: float
    spread: float
    within_stderr: float
    values: list[float]
    estimates: list[FreeEnergyEstimate] = field(repr=False)
    env_seeds: list[int] = field(default_factory=list)

    @property
    def flags(self) -> list[str]:
        return sorted({f for e in self.estimates for f in e.flags})


def disorder_average(box: BoxSpec, b: float, h: float, a: float, K: int, N: int = 20_000, seed: int = 0,
                     method: str = "auto", **kw) -> DisorderAverage:
    """Quenched estimates over ``K`` independently seeded environments.

    ``stderr`` is the standard error of the mean over environments (it
    already contains the estimator noise); ``within_stderr`` is the part due
    to the estimators alone and ``spread`` the between-environment standard
    deviation.
    """
    if K < 1:
        raise ValueError("need at least one environment")
    ests, seeds = [], []
    for k in range(K):
        env_seed = derived_seed(seed, _TAG_ENV, k)
        env = sample_environment(box, b, h, env_seed)
        ests.append(estimate_quenched(make_model(env, a), method, N, derived_seed(seed, _TAG_EST, k), **kw))
        seeds.append(env_seed)
    vals = np.array([e.value for e in ests])
    within = float(np.sqrt(np.sum([e.stderr**2 for e in ests])) / K)
    if K == 1:
        # no between-environment information; fall back to the estimator error
        return DisorderAverage(float(vals[0]), within, 0.0, within, vals.tolist(), ests, seeds)
    spread = float(vals.std(ddof=1))
    return DisorderAverage(float(vals.mean()), spread / np.sqrt(K), spread, within, vals.tolist(), ests, seeds)


def as_dict(est: FreeEnergyEstimate) -> dict:
    return asdict(est)
