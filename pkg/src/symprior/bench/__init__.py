"""Benchmark problems and the recovery-rate harness."""

from .harness import (
    BENCH_CONFIG, VARIANTS, BenchmarkReport, RecoveryVerdict, RunRecord, check_recovery, generate_data,
    run_benchmark, run_one, write_reports,
)
from .problems import (
    BenchmarkProblem, domain_suite, biology, builtin_prior, builtin_suite, engineering,
    hamiltonian, load_suite, physics_corpus, reaction_rate, save_suite, synthetic_suite,
    toy_sincos, trig_corpus,
)

__all__ = [
    "BENCH_CONFIG", "VARIANTS", "BenchmarkReport", "RecoveryVerdict", "RunRecord", "check_recovery", "generate_data",
    "run_benchmark", "run_one", "write_reports", "BenchmarkProblem", "domain_suite", "biology",
    "builtin_prior", "builtin_suite", "engineering", "hamiltonian", "load_suite", "physics_corpus",
    "reaction_rate", "save_suite", "synthetic_suite", "toy_sincos", "trig_corpus",
]
