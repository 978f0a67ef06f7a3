"""Multi-seed recovery experiments across controller variants and noise levels."""

from __future__ import annotations

import csv
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..data import Dataset
from ..expr import ExpressionTree, canonicalize, skeleton_key
from ..priors import PriorModel
from ..search import SearchConfig, run
from .problems import BenchmarkProblem

log = logging.getLogger(__name__)

VARIANTS = {
    "tree-rnn+prior": ("tree", True),
    "tree-rnn": ("tree", False),
    "rnn+prior": ("linear", True),
    "rnn": ("linear", False),
}
# desk-scale search settings used by the benchmark unless a config file is given
BENCH_CONFIG = SearchConfig(T=20, N=50, K=5, T1=60, T2=20, T3=200, restarts=2, coarse_rows=200,
                            max_depth=5, max_width=3, warmup=60, eta=0.01, patience=5)
RECOVERY_POINTS = 1000
RESIDUAL_TOL = 1e-8
CONSTANT_RTOL = 1e-4
MAX_RETRIES = 100


def _problem_seed(problem: BenchmarkProblem, *extra: int) -> list[int]:
    return [zlib.crc32(problem.name.encode()), *extra]


def _draw(problem: BenchmarkProblem, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` rows with finite ground truth; rows with non-finite truth are redrawn."""
    lo = np.array([r[0] for r in problem.ranges])
    hi = np.array([r[1] for r in problem.ranges])
    X = rng.uniform(lo, hi, size=(n, problem.n_vars))
    f = problem.tree.evaluate(X)
    for _ in range(MAX_RETRIES):
        bad = ~np.isfinite(f)
        if not bad.any():
            return X, f
        X[bad] = rng.uniform(lo, hi, size=(int(bad.sum()), problem.n_vars))
        f[bad] = problem.tree.evaluate(X[bad])
    raise ValueError(f"{problem.name}: ground truth stays non-finite after {MAX_RETRIES} redraws")


def generate_data(problem: BenchmarkProblem, noise_level: float, seed: int) -> tuple[Dataset, Dataset]:
    """Train and test sets; Gaussian noise with std ``noise_level * std(f)`` on both targets."""
    if noise_level < 0:
        raise ValueError("noise level must be non-negative")
    rng = np.random.default_rng(_problem_seed(problem, seed))
    out = []
    for n in (problem.n_train, problem.n_test):
        X, f = _draw(problem, n, rng)
        y = f + rng.normal(0.0, noise_level * np.std(f), size=n) if noise_level > 0 else f.copy()
        out.append(Dataset(X, y, problem.names or (), ()))
    return out[0], out[1]


@dataclass
class RecoveryVerdict:
    recovered: bool
    residual: float
    structural_match: bool


def check_recovery(candidate: ExpressionTree, problem: BenchmarkProblem,
                   n_points: int = RECOVERY_POINTS) -> RecoveryVerdict:
    """Numeric stand-in for "candidate minus truth simplifies to a constant".

    Recovered when the residual variance on held-out points is below
    ``1e-8 * var(truth)``, or when the skeletons coincide and every constant
    agrees to a relative 1e-4.
    """
    rng = np.random.default_rng(_problem_seed(problem, 0xC0FFEE))
    X, f = _draw(problem, n_points, rng)
    with np.errstate(all="ignore"):
        c = candidate.evaluate(X)
        if np.all(np.isfinite(c)):
            residual = float(np.var(c - f) / max(np.var(f), 1e-300))
        else:
            residual = float("inf")
    a, b = canonicalize(candidate), canonicalize(problem.tree)
    structural = skeleton_key(a) == skeleton_key(b)
    close = structural and bool(np.allclose(a.theta(), b.theta(), rtol=CONSTANT_RTOL, atol=0.0))
    return RecoveryVerdict(residual < RESIDUAL_TOL or close, residual, structural)


@dataclass
class RunRecord:
    problem: str
    variant: str
    noise: float
    seed: int
    recovered: bool
    nrmse_test: float | None
    wall_seconds: float | None
    error: str | None = None
    trace: list = field(default_factory=list)


def run_one(problem: BenchmarkProblem, variant: str, noise: float, seed: int,
            config: SearchConfig, prior: PriorModel, timing: bool = False) -> RunRecord:
    """One search; any exception is logged and counted as a failure to recover."""
    start = time.perf_counter()
    mode, use_prior = VARIANTS[variant]
    try:
        train, test = generate_data(problem, noise, seed)
        pm = prior if use_prior else PriorModel.uniform(prior.unary, prior.max_depth)
        cfg = replace(config, mode=mode, use_kl=use_prior, seed=seed)
        if not use_prior:
            cfg = replace(cfg, warmup=0)
        res = run(cfg, train, pm, test=test)
        verdict = check_recovery(res.best.tree, problem)
        trace = [(h["t"], h["max_reward"], h["best_nrmse"]) for h in res.report["iterations"]]
        rec = RunRecord(problem.name, variant, noise, seed, verdict.recovered,
                        res.test_nrmse, None, trace=trace)
    except Exception as exc:  # scored as non-recovery
        log.warning("%s/%s/noise=%g/seed=%d failed: %s", problem.name, variant, noise, seed, exc)
        rec = RunRecord(problem.name, variant, noise, seed, False, None, None, error=repr(exc))
    if timing:
        rec.wall_seconds = time.perf_counter() - start
    return rec


def _run_task(args):
    return run_one(*args)


@dataclass
class BenchmarkReport:
    records: list[RunRecord]

    def rates(self) -> list[dict]:
        """Recovery rate per (problem, variant, noise) with the sample std over seeds."""
        groups: dict[tuple, list[bool]] = {}
        for r in self.records:
            groups.setdefault((r.problem, r.variant, r.noise), []).append(r.recovered)
        out = []
        for (p, v, n), vals in groups.items():
            a = np.array(vals, dtype=float)
            out.append({"problem": p, "variant": v, "noise": n, "rate": float(a.mean()),
                        "std": float(a.std(ddof=1)) if a.size > 1 else 0.0, "runs": int(a.size)})
        return out

    def mean_rate(self, variant: str, noise: float | None = None) -> float:
        vals = [r.recovered for r in self.records
                if r.variant == variant and (noise is None or r.noise == noise)]
        return float(np.mean(vals)) if vals else float("nan")


def run_benchmark(suite: Sequence[BenchmarkProblem], variants: Sequence[str], seeds: Sequence[int] | int,
                  noise_levels: Sequence[float] | None, *, config: SearchConfig, prior: PriorModel,
                  jobs: int = 1, timing: bool = False) -> BenchmarkReport:
    """Every (problem, variant, noise, seed) combination; results merge in a fixed order."""
    if not suite:
        raise ValueError("empty benchmark suite")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    tasks = []
    for problem in suite:
        levels = problem.noise_levels if noise_levels is None else noise_levels
        for noise in levels:
            for variant in variants:
                for seed in seeds:
                    tasks.append((problem, variant, float(noise), seed, config, prior, timing))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_task, tasks, chunksize=1))
    else:
        records = [_run_task(t) for t in tasks]
    return BenchmarkReport(records)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_reports(report: BenchmarkReport, out_dir) -> dict[str, Path]:
    """``recovery.csv`` plus plot-data files for rate-vs-noise and convergence curves."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    def write(name, header, rows):
        path = out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        paths[name] = path

    write("recovery.csv", ["problem", "variant", "noise", "seed", "recovered", "nrmse_test", "wall_seconds"],
          [(r.problem, r.variant, r.noise, r.seed, r.recovered, r.nrmse_test, r.wall_seconds)
           for r in report.records])
    rates = report.rates()
    write("rates.csv", ["problem", "variant", "noise", "rate", "std", "runs"],
          [(r["problem"], r["variant"], r["noise"], r["rate"], r["std"], r["runs"]) for r in rates])
    variants = list(dict.fromkeys(r.variant for r in report.records))
    noises = sorted({r.noise for r in report.records})
    write("plot_rate_vs_noise.csv", ["variant", "noise", "mean_rate"],
          [(v, n, report.mean_rate(v, n)) for v in variants for n in noises])
    write("plot_convergence.csv", ["problem", "variant", "noise", "seed", "t", "max_reward", "best_nrmse"],
          [(r.problem, r.variant, r.noise, r.seed, t, mr, bn)
           for r in report.records for t, mr, bn in r.trace])
    return paths
