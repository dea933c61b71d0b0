"""Command-line front end: phase-diagram scans, verification suites, curves and samples.

Exit codes are 0 on success, 1 when a verification suite fails and 2 for an
invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION, __version__
from ._formats import FormatVersionError, check_format_version
from .bounds import (
    BoundConstants,
    annealed_strength,
    curve_rows,
    estimate_constants,
    region_positive_d2,
    region_positive_d3,
)
from .gaussfield import FieldConfig, build_model, field_to_bytes, field_to_csv, log_partition
from .lattice import BoxSpec, Environment, sample_environment
from .pinning import (
    HeatBath,
    derived_rng,
    derived_seed,
    disorder_average,
    estimate_annealed,
    make_model,
)
from .verify import SUITES, run_suite
from .walk import massive_variance_bound, ratio_Z_series

logger = logging.getLogger("gffpin")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG = 0, 1, 2
_TAG_SCAN, _TAG_SAMPLE = 11, 12
ESTIMATORS = ("auto", "IS", "TI", "ORACLE")
D2_MASS = 0.1


class ConfigError(ValueError):
    """Raised for configurations that fail validation."""


@dataclass
class ScanConfig:
    d: int = 2
    n: list[int] = field(default_factory=lambda: [4])
    a: float = 1.0
    b_grid: list[float] = field(default_factory=lambda: [1.0])
    h_grid: list[float] = field(default_factory=lambda: [-0.4])
    K: int = 5
    N: int = 20_000
    estimator: str = "auto"
    seed: int = 0
    workers: int = 1
    out: str | None = None
    format_version: str = FORMAT_VERSION

    def validate(self) -> "ScanConfig":
        try:
            check_format_version(self.format_version)
        except FormatVersionError as exc:
            raise ConfigError(str(exc)) from None
        if isinstance(self.n, int):
            self.n = [self.n]
        if self.d < 1 or not self.n or any(int(k) < 1 for k in self.n):
            raise ConfigError("d and every n must be positive")
        for name in ("b_grid", "h_grid"):
            grid = getattr(self, name)
            if not grid or not all(math.isfinite(float(x)) for x in grid):
                raise ConfigError(f"{name} must be a non-empty list of finite numbers")
        if not (math.isfinite(self.a) and self.a > 0):
            raise ConfigError("a must be positive")
        if self.K < 1 or self.N < 1:
            raise ConfigError("K and N must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "ScanConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            cfg = cls(**obj)
            cfg.d, cfg.K, cfg.N, cfg.seed, cfg.workers = (
                int(cfg.d), int(cfg.K), int(cfg.N), int(cfg.seed), int(cfg.workers))
            cfg.a = float(cfg.a)
            cfg.n = [int(k) for k in (cfg.n if isinstance(cfg.n, list) else [cfg.n])]
            cfg.b_grid = [float(x) for x in cfg.b_grid]
            cfg.h_grid = [float(x) for x in cfg.h_grid]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "ScanConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(obj)

    def grid(self) -> list[tuple[int, float, float]]:
        """Scan points in output order: n outermost, then b, then h."""
        return [(n, b, h) for n in self.n for b in self.b_grid for h in self.h_grid]


SCAN_COLUMNS = [
    "index", "d", "n", "a", "b", "h", "annealed_strength",
    "quenched", "quenched_stderr", "quenched_spread", "K",
    "annealed", "annealed_stderr", "estimator",
    "bound_covered", "bound_positive", "bound_margin",
    "flags", "format_version",
]


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return str(x)


def _scan_point(cfg: ScanConfig, index: int, n: int, b: float, h: float,
                constants: BoundConstants) -> dict:
    """One row of the phase diagram; never raises, failures end up in ``flags``."""
    row = {k: "" for k in SCAN_COLUMNS}
    row.update(index=index, d=cfg.d, n=n, a=cfg.a, b=b, h=h, K=cfg.K,
               annealed_strength=annealed_strength(b, h), format_version=FORMAT_VERSION)
    flags = []
    seed = derived_seed(cfg.seed, _TAG_SCAN, index)
    box = BoxSpec(cfg.d, n)
    try:
        ann = estimate_annealed(box, b, h, cfg.a, cfg.N, derived_seed(seed, 0), method=cfg.estimator)
        row.update(annealed=ann.value, annealed_stderr=ann.stderr, estimator=ann.estimator)
        flags += [f"annealed:{f}" for f in ann.flags]
        if b == 0.0:
            # no disorder: every environment is the annealed model
            row.update(quenched=ann.value, quenched_stderr=ann.stderr, quenched_spread=0.0)
        else:
            q = disorder_average(box, b, h, cfg.a, cfg.K, cfg.N, derived_seed(seed, 1), method=cfg.estimator)
            row.update(quenched=q.mean, quenched_stderr=q.stderr, quenched_spread=q.spread)
            flags += q.flags
    except Exception as exc:  # recorded per row, the scan continues
        logger.warning("scan point %d (n=%d, b=%g, h=%g) failed: %s", index, n, b, h, exc)
        flags.append(f"error:{type(exc).__name__}")
    try:
        region = (region_positive_d2 if cfg.d == 2 else region_positive_d3)(b, h, constants)
        row.update(bound_covered=region.covered, bound_positive=region.positive,
                   bound_margin=region.margin if region.covered else float("nan"))
    except Exception as exc:
        flags.append(f"bound-error:{type(exc).__name__}")
    row["flags"] = "|".join(sorted(set(flags)))
    return row


def _scan_chunk(cfg: ScanConfig, items, constants) -> list[dict]:
    return [_scan_point(cfg, i, n, b, h, constants) for i, (n, b, h) in items]


def _header(kind: str, config: dict) -> str:
    lines = [f"# gffpin {__version__} {kind}", f"# format_version={FORMAT_VERSION}"]
    lines += [f"# config {k}={json.dumps(v)}" for k, v in sorted(config.items())]
    return "\n".join(lines) + "\n"


def _csv_body(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


@lru_cache(maxsize=16)
def scan_constants(d: int, a: float) -> BoundConstants:
    """Bound constants for the predicates; d=2 uses the fixed mass ``D2_MASS``."""
    if d == 2:
        return estimate_constants(2, a, D2_MASS)
    return estimate_constants(max(d, 3), a)


def cmd_scan(cfg: ScanConfig) -> str:
    """Run the phase-diagram scan and return the CSV text (header comments and body).

    Points are assigned to workers by ``index % workers`` and every point
    derives its random streams from ``(seed, index)``, so the body does not
    depend on the worker count.
    """
    cfg.validate()
    constants = scan_constants(cfg.d, cfg.a)
    items = list(enumerate(cfg.grid()))
    logger.info("scan: %d points on %d worker(s)", len(items), cfg.workers)
    if cfg.workers == 1:
        rows = _scan_chunk(cfg, items, constants)
    else:
        parts = [items[w::cfg.workers] for w in range(cfg.workers)]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_scan_chunk, cfg, part, constants) for part in parts if part]
            rows = [r for f in futures for r in f.result()]
        rows.sort(key=lambda r: r["index"])
    return _header("scan", asdict(cfg)) + _csv_body(rows, SCAN_COLUMNS)


def split_header(text: str) -> tuple[str, str]:
    """Separate ``#`` comment lines from the CSV body."""
    lines = text.splitlines(keepends=True)
    k = 0
    while k < len(lines) and lines[k].startswith("#"):
        k += 1
    return "".join(lines[:k]), "".join(lines[k:])


# ---------------------------------------------------------------------------
# other subcommands


def cmd_bounds(b_grid, d: int, a: float, m: float = 0.1) -> str:
    rows = curve_rows(b_grid, d, a, m)
    for r in rows:
        r["format_version"] = FORMAT_VERSION
    cols = list(rows[0]) if rows else ["b", "format_version"]
    return _header("bounds", {"d": d, "a": a, "m": m, "b_grid": list(map(float, b_grid))}) + _csv_body(rows, cols)


def cmd_sample(d: int, n: int, a: float, b: float, h: float, seed: int, burn_in: int = 500,
               count: int = 1, thin: int = 10, env: Environment | None = None) -> tuple[list[FieldConfig], list[str]]:
    """Heat-bath draws from the interacting measure after ``burn_in`` sweeps."""
    box = BoxSpec(d, n)
    if env is None:
        env = sample_environment(box, b, h, derived_seed(seed, _TAG_SAMPLE, 0))
    model = make_model(env, a)
    chain = HeatBath(model, [1.0], derived_rng(seed, _TAG_SAMPLE, 1))
    trace = chain.run(burn_in)[:, 0]
    flags = []
    if burn_in >= 20:
        half = burn_in // 2
        m1, m2 = trace[:half].mean(), trace[half:].mean()
        sd = np.hypot(trace[:half].std(), trace[half:].std()) / np.sqrt(max(half, 1) / 10)
        if sd > 0 and abs(m1 - m2) > 5 * sd:
            flags.append("non-stationary")
    out = []
    for k in range(count):
        if k:
            chain.run(thin, measure=False)
        out.append(FieldConfig(box, chain.phi[0].copy()))
    return out, flags


def cmd_walk_table(m_grid, n_grid) -> str:
    rows = []
    for n in n_grid:
        box = BoxSpec(2, n)
        for m in m_grid:
            var, ratio = massive_variance_bound(m, n)
            logdet = -log_partition(build_model(box, m, 0.0, 0.0)) / box.num_sites
            rows.append({"m": m, "n": n, "variance": var, "ratio_to_log": ratio,
                         "zratio_series": ratio_Z_series(m, n), "zratio_logdet": logdet})
    cols = ["m", "n", "variance", "ratio_to_log", "zratio_series", "zratio_logdet"]
    return _header("walk-table", {"m_grid": list(m_grid), "n_grid": list(n_grid)}) + _csv_body(rows, cols)


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> list[float]:
    """Comma list of floats, or ``start:stop:count`` for an inclusive linspace."""
    try:
        if ":" in text:
            start, stop, num = text.split(":")
            return [float(x) for x in np.linspace(float(start), float(stop), int(num))]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse number list {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse integer list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help="worker processes for scan (default 1)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path (default stdout)")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON ScanConfig file; flags override its values")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="gffpin", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scan", help="phase-diagram scan over a (b, h) grid", parents=[common])
    s.add_argument("--d", type=int)
    s.add_argument("--n", type=_ints, help="box side(s), comma separated")
    s.add_argument("--a", type=float)
    s.add_argument("--b-grid", type=_floats)
    s.add_argument("--h-grid", type=_floats)
    s.add_argument("--K", type=int, help="environments per point")
    s.add_argument("--N", type=int, help="IS samples per estimate")
    s.add_argument("--estimator", choices=ESTIMATORS)

    v = sub.add_parser("verify", help="run a named verification suite", parents=[common])
    v.add_argument("suite", choices=sorted(SUITES))

    b = sub.add_parser("bounds", help="annealed line and quenched-bound curves as CSV", parents=[common])
    b.add_argument("--b-grid", type=_floats, default=_floats("0:1:21"))
    b.add_argument("--d", type=int, default=3)
    b.add_argument("--a", type=float, default=1.0)
    b.add_argument("--m", type=float, default=0.1, help="mass used for the d=2 constants")

    sm = sub.add_parser("sample", help="heat-bath field configuration(s) from the pinned measure", parents=[common])
    sm.add_argument("--d", type=int, default=2)
    sm.add_argument("--n", type=int, default=8)
    sm.add_argument("--a", type=float, default=1.0)
    sm.add_argument("--b", type=float, default=0.0)
    sm.add_argument("--h", type=float, default=0.0)
    sm.add_argument("--env", default=None, help="environment JSON file (overrides --d/--n/--b/--h)")
    sm.add_argument("--burn-in", type=int, default=500)
    sm.add_argument("--count", type=int, default=1)
    sm.add_argument("--thin", type=int, default=10)
    sm.add_argument("--format", choices=("csv", "bin"), default="csv")

    e = sub.add_parser("env", help="environment utilities", parents=[common])
    esub = e.add_subparsers(dest="env_command", required=True)
    g = esub.add_parser("gen", help="generate an environment as JSON", parents=[common])
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--b", type=float, default=1.0)
    g.add_argument("--h", type=float, default=0.0)

    w = sub.add_parser("walk-table", help="massive-field variance and partition ratios", parents=[common])
    w.add_argument("--m-grid", type=_floats, default=[0.1, 0.03, 0.01])
    w.add_argument("--n-grid", type=_ints, default=[16, 32])
    return p


def _emit(text: str | bytes, out: str | None) -> None:
    if out is None:
        if isinstance(text, bytes):
            sys.stdout.buffer.write(text)
        else:
            sys.stdout.write(text)
        return
    mode = "wb" if isinstance(text, bytes) else "w"
    with open(out, mode) as fh:
        fh.write(text)


def _merge_scan_config(args) -> ScanConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError("config must be a JSON object")
    overrides = {"d": args.d, "n": args.n, "a": args.a, "b_grid": args.b_grid, "h_grid": args.h_grid,
                 "K": args.K, "N": args.N, "estimator": args.estimator, "seed": args.seed,
                 "workers": args.workers, "out": args.out}
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ScanConfig.from_dict(base)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    for name, default in (("seed", None), ("workers", None), ("out", None), ("config", None), ("verbose", 0)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    seed = 0 if args.seed is None else args.seed
    try:
        if args.command == "scan":
            cfg = _merge_scan_config(args)
            _emit(cmd_scan(cfg), cfg.out)
        elif args.command == "verify":
            results = run_suite(args.suite)
            lines = [json.dumps(r.as_dict(), default=float) for r in results]
            for r in results:
                print(r.line(), file=sys.stderr)
            _emit("\n".join(lines) + "\n", args.out)
            return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY
        elif args.command == "bounds":
            _emit(cmd_bounds(args.b_grid, args.d, args.a, args.m), args.out)
        elif args.command == "sample":
            env = Environment.from_json(Path(args.env).read_text()) if args.env else None
            d, n = (env.box.d, env.box.n) if env else (args.d, args.n)
            configs, flags = cmd_sample(d, n, args.a, args.b, args.h, seed, args.burn_in,
                                        args.count, args.thin, env)
            for f in flags:
                logger.warning("sample flag: %s", f)
            for k, cfg in enumerate(configs):
                payload = field_to_bytes(cfg) if args.format == "bin" else field_to_csv(cfg)
                out = args.out
                if out is not None and len(configs) > 1:
                    path = Path(out)
                    out = str(path.with_name(f"{path.stem}.{k}{path.suffix}"))
                _emit(payload, out)
        elif args.command == "env":
            env = sample_environment(BoxSpec(args.d, args.n), args.b, args.h, seed)
            _emit(env.to_json() + "\n", args.out)
        elif args.command == "walk-table":
            _emit(cmd_walk_table(args.m_grid, args.n_grid), args.out)
    except (ConfigError, FormatVersionError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        logger.error("invalid arguments: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
