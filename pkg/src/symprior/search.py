"""Risk-seeking, prior-regularized policy-gradient search over skeletons.

Each outer iteration samples a batch of skeletons from the controller, fits
their constants, scores them with ``1 / (1 + NRMSE)`` and moves the policy
along

    g    = 1/N  sum_n (R_n - R_a) 1[R_n >= R_a] grad log p(e_n)
    g_KL = -l(t)/N  sum_n grad KL_avg(e_n)

where ``R_a`` is the empirical (1 - alpha) reward quantile of the batch and
``l(t) = l0 exp(-lambda_d t)``.  The best distinct skeletons are kept in a
pool, fine-tuned at the end, and the one with the smallest training NRMSE
is returned.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .controller import Adam, Controller, SampledSkeleton
from .data import Dataset
from .expr import ExpressionTree, serialize, skeleton_key, to_dict, to_infix
from .optimize import FitResult, coarse_tune, fine_tune, fit_seed, nrmse
from .priors import PriorModel

log = logging.getLogger(__name__)


class SearchFailure(RuntimeError):
    """No candidate with a positive reward was found."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class SearchConfig:
    T: int = 50
    N: int = 200
    K: int = 10
    eta: float = 0.003
    risk_alpha: float = 0.05
    ell0: float = 0.5
    lambda_d: float = 0.01
    T1: int = 200
    T2: int = 50
    T3: int = 1000
    seed: int = 0
    hidden: int = 64
    max_depth: int = 8
    max_width: int = 5
    mode: str = "tree"
    use_kl: bool = True
    optimizer: str = "adam"
    warmup: int = 0
    warmup_batch: int = 20
    restarts: int = 3
    coarse_rows: int | None = None
    early_stop: float | None = 1e-6
    patience: int | None = None

    def __post_init__(self):
        if self.N < 1 or self.K < 1 or self.T < 0:
            raise ValueError("need N >= 1, K >= 1 and T >= 0")
        if not 0.0 <= self.risk_alpha <= 1.0:
            raise ValueError("risk_alpha must lie in [0, 1]")
        if self.ell0 < 0 or self.lambda_d < 0:
            raise ValueError("ell0 and lambda_d must be non-negative")
        if min(self.T1, self.T2, self.T3, self.warmup) < 0 or self.warmup_batch < 1:
            raise ValueError("iteration budgets must be non-negative")
        if self.mode not in ("tree", "linear"):
            raise ValueError(f"unknown controller mode {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown policy optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "SearchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "SearchConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def reward(nrmse_value: float) -> float:
    """1 / (1 + L); the non-finite sentinel scores 0."""
    if not math.isfinite(nrmse_value):
        return 0.0
    return 1.0 / (1.0 + nrmse_value)


def risk_quantile(rewards, risk_alpha: float) -> float:
    """The ceil(alpha * N)-th largest reward (at least one sample always passes)."""
    r = np.asarray(rewards, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("empty reward batch")
    k = max(1, math.ceil(round(risk_alpha * r.size, 9)))
    k = min(k, r.size)
    return float(np.partition(r, r.size - k)[r.size - k])


def kl_weight(t: float, ell0: float, lambda_d: float) -> float:
    return ell0 * math.exp(-lambda_d * t)


def policy_weights(rewards, risk_alpha: float) -> tuple[np.ndarray, float]:
    """Per-sample coefficients (R - R_a) 1[R >= R_a] / N and the threshold."""
    r = np.asarray(rewards, dtype=float)
    thr = risk_quantile(r, risk_alpha)
    w = np.where(r >= thr, r - thr, 0.0) / r.size
    return w, thr


@dataclass
class PoolEntry:
    key: str
    fit: FitResult
    reward: float
    order: int

    @property
    def n_nodes(self) -> int:
        return self.fit.tree.n_nodes()

    def rank(self):
        return (-self.reward, self.n_nodes, self.order)


class CandidatePool:
    """The K best distinct skeletons seen so far."""

    def __init__(self, K: int):
        self.K = K
        self.entries: dict[str, PoolEntry] = {}

    def offer(self, key: str, fit: FitResult, r: float, order: int) -> None:
        if r <= 0.0:
            return
        old = self.entries.get(key)
        if old is not None and old.rank() <= (-r, fit.tree.n_nodes(), order):
            return
        self.entries[key] = PoolEntry(key, fit, r, order if old is None else old.order)
        if len(self.entries) > self.K:
            worst = max(self.entries.values(), key=PoolEntry.rank)
            del self.entries[worst.key]

    def ranked(self) -> list[PoolEntry]:
        return sorted(self.entries.values(), key=PoolEntry.rank)

    def kth_reward(self) -> float:
        ranked = self.ranked()
        return ranked[-1].reward if len(ranked) == self.K else 0.0

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class SearchResult:
    best: FitResult
    train_nrmse: float
    test_nrmse: float | None
    iterations: int
    report: dict
    pool: list[PoolEntry] = field(default_factory=list)
    controller: Controller | None = None


def _finite(x: float):
    return float(x) if math.isfinite(x) else None


def _expression_record(fit: FitResult, names=None) -> dict:
    return {
        "expression": serialize(fit.tree),
        "tree": to_dict(fit.tree.root),
        "infix": to_infix(fit.tree, names),
        "theta": [float(v) for v in fit.theta],
        "nrmse": _finite(fit.nrmse),
    }


class Searcher:
    """State of one search run; :func:`run` drives it to completion."""

    def __init__(self, config: SearchConfig, data: Dataset, prior: PriorModel,
                 controller: Controller | None = None,
                 reward_fn: Callable[[FitResult], float] | None = None):
        self.config = config
        self.data = data
        self.prior = prior
        self.ctl = controller or Controller(
            prior.unary, config.hidden, max_depth=config.max_depth, max_width=config.max_width,
            mode=config.mode, n_vars=data.n_vars, seed=config.seed)
        self.rng = np.random.default_rng([config.seed, 1])
        self.opt = Adam(self.ctl.params, lr=config.eta) if config.optimizer == "adam" else None
        self.reward_fn = reward_fn or (lambda fit: reward(fit.nrmse))
        self.pool = CandidatePool(config.K)
        self.cache: dict[str, FitResult] = {}
        self.discovered = 0
        self.history: list[dict] = []

    def fit(self, tree: ExpressionTree) -> FitResult:
        key = skeleton_key(tree)
        hit = self.cache.get(key)
        if hit is None:
            c = self.config
            hit = coarse_tune(tree, self.data, c.T1, c.T2, restarts=c.restarts,
                              rng=fit_seed(c.seed, tree), rows=c.coarse_rows)
            self.cache[key] = hit
        return hit

    def _apply(self, grads: dict[str, np.ndarray]) -> None:
        if self.opt is not None:
            self.opt.step(self.ctl.params, grads, ascent=True)
        else:
            for k, g in grads.items():
                self.ctl.params[k] += self.config.eta * g

    def update(self, batch: list[SampledSkeleton], rewards: np.ndarray, ell: float) -> dict:
        """One policy step; returns batch statistics."""
        c = self.config
        w, thr = policy_weights(rewards, c.risk_alpha)
        w_kl = -ell / len(batch) if c.use_kl else 0.0
        total = self.ctl.zero_grads()
        kls = []
        for sk, wn in zip(batch, w):
            # objective is sum_n wn log p + w_kl KL_avg; ascent on it gives g + g_KL
            _, kl, g = self.ctl.combined_grad(sk, self.prior, wn, w_kl)
            kls.append(kl)
            if wn != 0.0 or w_kl != 0.0:
                for k in total:
                    total[k] += g[k]
        self._apply(total)
        return {"threshold": thr, "kl_avg": float(np.mean(kls)),
                "n_pass": int(np.sum(rewards >= thr))}

    def warm_up(self) -> list[float]:
        """Prior-only updates before any data is seen."""
        c = self.config
        trace = []
        for _ in range(c.warmup):
            batch = [self.ctl.sample(self.prior, self.rng) for _ in range(c.warmup_batch)]
            stats = self.update(batch, np.zeros(len(batch)), c.ell0 if c.use_kl else 0.0)
            trace.append(stats["kl_avg"])
        return trace

    def step(self, t: int) -> dict:
        c = self.config
        ell = kl_weight(t, c.ell0, c.lambda_d)
        batch = [self.ctl.sample(self.prior, self.rng) for _ in range(c.N)]
        fits = [self.fit(sk.tree) for sk in batch]
        rewards = np.array([self.reward_fn(f) for f in fits])
        for sk, f, r in zip(batch, fits, rewards):
            self.pool.offer(skeleton_key(sk.tree), f, float(r), self.discovered)
            self.discovered += 1
        stats = self.update(batch, rewards, ell)
        ranked = self.pool.ranked()
        row = {
            "t": t,
            "ell": ell,
            "mean_reward": float(np.mean(rewards)),
            "max_reward": float(np.max(rewards)),
            "threshold": stats["threshold"],
            "kl_avg": stats["kl_avg"],
            "n_pass": stats["n_pass"],
            "distinct_fits": len(self.cache),
            "best_nrmse": _finite(ranked[0].fit.nrmse) if ranked else None,
            "pool": [{"skeleton": e.key, "reward": e.reward} for e in ranked],
        }
        self.history.append(row)
        log.info("t=%d mean R=%.4f max R=%.4f KL=%.4f ell=%.4f", t, row["mean_reward"],
                 row["max_reward"], row["kl_avg"], ell)
        return row

    def finish(self, test: Dataset | None = None) -> SearchResult:
        c = self.config
        ranked = self.pool.ranked()
        if not ranked:
            diag = {"iterations": len(self.history), "distinct_fits": len(self.cache),
                    "max_reward": max((h["max_reward"] for h in self.history), default=0.0)}
            raise SearchFailure("no candidate with positive reward", diag)
        tuned = []
        for e in ranked:
            ft = fine_tune(e.fit.tree, self.data, c.T3, start=e.fit)
            tuned.append((ft.nrmse if math.isfinite(ft.nrmse) else math.inf, e.order, ft, e))
        tuned.sort(key=lambda x: (x[0], x[1]))
        best = tuned[0][2]
        test_value = None
        if test is not None:
            test_value = nrmse(best.tree.evaluate(test.X), test.y)
        report = {
            "config": c.to_dict(),
            "iterations": self.history,
            "pool": [{"skeleton": e.key, "coarse_nrmse": _finite(e.fit.nrmse),
                      "fine_nrmse": _finite(ft.nrmse), "reward": e.reward}
                     for _, _, ft, e in tuned],
            "best": _expression_record(best, self.data.names),
            "train_nrmse": _finite(best.nrmse),
            "test_nrmse": None if test_value is None else _finite(test_value),
        }
        return SearchResult(best, best.nrmse, test_value, len(self.history), report,
                            [e for *_, e in tuned], self.ctl)


def run(config: SearchConfig, dataset: Dataset, prior_model: PriorModel, *,
        test: Dataset | None = None, controller: Controller | None = None,
        reward_fn: Callable[[FitResult], float] | None = None) -> SearchResult:
    """Full search: optional prior warm-up, T outer iterations, then pool fine-tuning."""
    if dataset.n_rows < 2:
        raise ValueError("dataset needs at least two rows")
    if controller is not None and tuple(prior_model.unary) != controller.unary:
        raise ValueError("controller and prior use different unary registries")
    s = Searcher(config, dataset, prior_model, controller, reward_fn)
    s.warm_up()
    best, stale = float("inf"), 0
    for t in range(config.T):
        row = s.step(t)
        current = row["best_nrmse"] if row["best_nrmse"] is not None else float("inf")
        if config.early_stop is not None and current < config.early_stop:
            break
        stale = stale + 1 if current >= best else 0
        best = min(best, current)
        if config.patience is not None and stale >= config.patience:
            log.info("no improvement for %d iterations; stopping at t=%d", stale, t)
            break
    return s.finish(test)


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1)
