"""Command line: ``symprior priors``, ``symprior fit`` and ``symprior benchmark``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .data import load_csv
from .priors import DEFAULT_EPSILON, DEFAULT_MAX_DEPTH, PriorModel, estimate_conditional, load_corpus
from .search import SearchConfig, SearchFailure, dumps_report, run

log = logging.getLogger("symprior")


def _load_prior(spec: str | None, max_depth: int) -> PriorModel:
    """A prior file, ``builtin:<corpus>``, or the uniform prior when omitted."""
    if spec is None:
        return PriorModel.uniform(max_depth=max_depth)
    if spec.startswith("builtin:"):
        return bench.builtin_prior(spec.split(":", 1)[1], max_depth)
    return PriorModel.load(spec)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_priors(args) -> int:
    corpus = load_corpus(args.corpus)
    if not corpus:
        log.error("no usable expressions in %s", args.corpus)
        return 2
    model = estimate_conditional(corpus, epsilon=args.epsilon, max_depth=args.max_depth)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    print(f"{len(corpus)} expressions -> {args.out}")
    return 0


def cmd_fit(args) -> int:
    config = SearchConfig.load(args.config) if args.config else SearchConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    train = load_csv(args.data)
    test = load_csv(args.test) if args.test else None
    prior = _load_prior(args.priors, config.max_depth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = run(config, train, prior, test=test)
    except SearchFailure as exc:
        (out / "report.json").write_text(json.dumps({"error": str(exc), "diagnostics": exc.diagnostics},
                                                    sort_keys=True, indent=1))
        log.error("search failed: %s", exc)
        return 1
    (out / "report.json").write_text(dumps_report(result.report))
    (out / "best.json").write_text(json.dumps(result.report["best"], sort_keys=True, indent=1))
    print(f"{result.report['best']['infix']}  (train NRMSE {result.train_nrmse:.6g})")
    return 0


def cmd_benchmark(args) -> int:
    config = SearchConfig.load(args.config) if args.config else bench.BENCH_CONFIG
    prior = _load_prior(args.priors or "builtin:physics", config.max_depth)
    if args.suite in ("domain", "toy", "synthetic"):
        suite = bench.builtin_suite(args.suite, prior=prior, max_depth=config.max_depth)
    else:
        suite = bench.load_suite(args.suite)
    if args.full:
        suite = [replace(p, n_train=10_000) for p in suite]
    seeds = 100 if args.full and args.seeds is None else (args.seeds or 10)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    noise = _floats(args.noise) if args.noise else None
    report = bench.run_benchmark(suite, variants, seeds, noise, config=config, prior=prior,
                                 jobs=args.jobs, timing=args.timing)
    paths = bench.write_reports(report, args.out)
    for v in variants:
        print(f"{v:16s} mean recovery {report.mean_rate(v):.3f}")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="symprior", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("priors", help="estimate a prior model from a .jsonl corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--max-depth", type=int, default=DEFAULT_MAX_DEPTH)
    p.set_defaults(func=cmd_priors)

    p = sub.add_parser("fit", help="search for an expression fitting a CSV dataset")
    p.add_argument("--data", required=True, help="CSV with a header; target column 'y' or the last one")
    p.add_argument("--test", help="optional held-out CSV for reporting test NRMSE")
    p.add_argument("--priors", help="priors.json or builtin:<trig|physics>; uniform when omitted")
    p.add_argument("--config", help="JSON file with SearchConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("benchmark", help="multi-seed recovery experiments")
    p.add_argument("--suite", required=True, help="problem JSON file, or domain|toy|synthetic")
    p.add_argument("--variants", default=",".join(bench.VARIANTS))
    p.add_argument("--seeds", type=int)
    p.add_argument("--noise", help="comma-separated noise levels; defaults to each problem's list")
    p.add_argument("--priors", help="priors.json or builtin:<trig|physics> (default builtin:physics)")
    p.add_argument("--config", help="JSON file with SearchConfig fields")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="fill wall_seconds (output is then not byte-stable)")
    p.add_argument("--full", action="store_true", help="10,000 training rows and 100 seeds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
