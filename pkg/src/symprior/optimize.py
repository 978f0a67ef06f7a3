"""Fitting the continuous constants of a skeleton.

The objective handed to the optimizers is the squared NRMSE, which has the
same minimizer as NRMSE itself but a smooth gradient at the optimum.  Leaf
features are computed once per skeleton and dataset; each step is one
forward and one reverse pass over the compiled program.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .expr import ExpressionTree, Program, StructureError, Unary, iter_nodes, skeleton_key

log = logging.getLogger(__name__)

STD_EPS = 1e-12
ADAM_LR = 0.01
ADAM_BETAS = (0.9, 0.999)
ARMIJO_C = 1e-4
T1_DEFAULT, T2_DEFAULT, T3_DEFAULT = 200, 50, 1000
RESTARTS_DEFAULT = 3
F_TOL = 1e-16


def nrmse(predictions, targets) -> float:
    """RMSE divided by the standard deviation of the targets; ``inf`` when anything is non-finite."""
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if p.shape != y.shape:
        if p.size == 1:
            p = np.full_like(y, p[0])
        else:
            raise StructureError(f"{p.size} predictions for {y.size} targets")
    if y.size < 2:
        raise StructureError("nrmse needs at least two targets")
    if not np.all(np.isfinite(p)):
        return float("inf")
    with np.errstate(over="ignore", invalid="ignore"):
        v = float(np.sqrt(np.mean((p - y) ** 2)) / (np.std(y) + STD_EPS))
    return v if np.isfinite(v) else float("inf")


@dataclass
class FitResult:
    tree: ExpressionTree
    theta: np.ndarray
    nrmse: float
    converged: bool = False
    iterations: dict = field(default_factory=dict)

    @property
    def layout(self):
        return self.tree.param_layout()


class Objective:
    """Squared NRMSE of a skeleton on fixed data, with its θ-gradient."""

    def __init__(self, tree: ExpressionTree, X: np.ndarray, y: np.ndarray):
        self.program = Program(tree)
        self.feats = self.program.features(X)
        self.y = np.asarray(y, dtype=float)
        self.scale = 1.0 / ((np.std(self.y) + STD_EPS) ** 2 * self.y.size)
        self.evals = 0

    def _residual(self, theta):
        out, cache = self.program.forward(theta, self.feats)
        if out.shape != self.y.shape:
            out = np.broadcast_to(out, self.y.shape)
        return out - self.y, cache

    def value(self, theta: np.ndarray) -> float:
        self.evals += 1
        r, _ = self._residual(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            f = float(self.scale * (r @ r))
        return f if np.isfinite(f) else float("inf")

    def value_and_grad(self, theta: np.ndarray):
        self.evals += 1
        r, cache = self._residual(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            f = float(self.scale * (r @ r))
        if not np.isfinite(f):
            return float("inf"), None
        g = self.program.backward(theta, self.feats, cache, 2.0 * self.scale * np.ascontiguousarray(r))
        if not np.all(np.isfinite(g)):
            return f, None
        return f, g


class _Best:
    def __init__(self, theta, f):
        self.theta, self.f = theta.copy(), f

    def offer(self, theta, f):
        if f < self.f:
            self.theta, self.f = theta.copy(), f


def adam(obj: Objective, theta: np.ndarray, steps: int, best: _Best,
         lr: float = ADAM_LR, betas=ADAM_BETAS, eps: float = 1e-8) -> tuple[np.ndarray, int]:
    b1, b2 = betas
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    theta = theta.copy()
    for t in range(1, steps + 1):
        f, g = obj.value_and_grad(theta)
        best.offer(theta, f)
        if g is None or f < F_TOL:
            return theta, t
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    f = obj.value(theta)
    best.offer(theta, f)
    return theta, steps


def bfgs(obj: Objective, theta: np.ndarray, steps: int, best: _Best,
         c1: float = ARMIJO_C, max_halvings: int = 40) -> tuple[np.ndarray, int, bool]:
    """Quasi-Newton descent with an inverse-Hessian estimate and Armijo backtracking.

    Returns (final iterate, iterations used, converged).
    """
    theta = theta.copy()
    f, g = obj.value_and_grad(theta)
    best.offer(theta, f)
    if g is None:
        return theta, 0, False
    n = theta.size
    H = np.eye(n)
    for it in range(1, steps + 1):
        if f < F_TOL or np.max(np.abs(g)) < 1e-12:
            return theta, it - 1, True
        d = -H @ g
        slope = float(g @ d)
        if slope >= 0:
            H = np.eye(n)
            d, slope = -g, -float(g @ g)
        step = 1.0
        for _ in range(max_halvings):
            cand = theta + step * d
            fc = obj.value(cand)
            if fc <= f + c1 * step * slope:
                break
            step *= 0.5
        else:
            if not np.allclose(H, np.eye(n)):
                H = np.eye(n)
                continue
            return theta, it, True
        fn, gn = obj.value_and_grad(cand)
        best.offer(cand, fn)
        if gn is None:
            return theta, it, False
        s = cand - theta
        yv = gn - g
        sy = float(s @ yv)
        if sy > 1e-12 * max(1.0, float(np.sqrt((s @ s) * (yv @ yv)))):
            if it == 1:
                H = np.eye(n) * (sy / float(yv @ yv))
            rho = 1.0 / sy
            Hy = H @ yv
            H = H + ((sy + yv @ Hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        theta, f, g = cand, fn, gn
    return theta, steps, False


def initial_theta(tree: ExpressionTree, rng: np.random.Generator) -> np.ndarray:
    """alpha = 1, beta = 0 on every unary node; gamma uniform on [-1, 1]."""
    out: list[float] = []
    for node in iter_nodes(tree.root):
        if isinstance(node, Unary):
            out.extend((1.0, 0.0))
        else:
            out.extend(rng.uniform(-1.0, 1.0, size=len(node.gamma)).tolist())
    return np.array(out, dtype=float)


def fit_seed(seed: int, tree: ExpressionTree) -> np.random.Generator:
    """Generator derived from a run seed and the skeleton, independent of sampling order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(skeleton_key(tree).encode())])


def _result(tree: ExpressionTree, theta: np.ndarray, data: Dataset, converged: bool, iters: dict) -> FitResult:
    fitted = tree.with_theta(theta)
    prog = Program(fitted)
    out, _ = prog.forward(theta, prog.features(data.X))
    value = nrmse(np.broadcast_to(out, data.y.shape), data.y)
    return FitResult(fitted, theta.copy(), value, converged and np.isfinite(value), iters)


def coarse_tune(tree: ExpressionTree, data: Dataset, T1: int = T1_DEFAULT, T2: int = T2_DEFAULT, *,
                restarts: int = RESTARTS_DEFAULT, rng: np.random.Generator | None = None,
                theta0: np.ndarray | None = None, rows: int | None = None) -> FitResult:
    """First-order steps then quasi-Newton steps from several random starts.

    ``rows`` optionally fits on a fixed leading subset of the data; the
    reported NRMSE is always measured on all of ``data``.  With
    ``T1 = T2 = 0`` only the first initialization is evaluated.
    """
    if T1 < 0 or T2 < 0:
        raise ValueError("iteration budgets must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(0)
    fit_data = data if rows is None or rows >= data.n_rows else data.subset(slice(0, rows))
    obj = Objective(tree, fit_data.X, fit_data.y)
    if T1 == 0 and T2 == 0:
        restarts = 1
    with np.errstate(all="ignore"):
        return _coarse(tree, data, obj, T1, T2, restarts, rng, theta0)


def _coarse(tree, data, obj, T1, T2, restarts, rng, theta0) -> FitResult:
    overall: _Best | None = None
    iters = {"adam": 0, "bfgs": 0, "restarts": 0}
    converged = False
    for r in range(restarts):
        iters["restarts"] += 1
        theta = theta0.copy() if (theta0 is not None and r == 0) else initial_theta(tree, rng)
        best = _Best(theta, obj.value(theta))
        if T1:
            _, used = adam(obj, theta, T1, best)
            iters["adam"] += used
        if T2 and np.isfinite(best.f):
            _, used, conv = bfgs(obj, best.theta, T2, best)
            iters["bfgs"] += used
            converged |= conv
        if overall is None or best.f < overall.f:
            overall = best
        if overall.f < F_TOL:
            break
    return _result(tree, overall.theta, data, converged, iters)


def fine_tune(tree: ExpressionTree, data: Dataset, T3: int = T3_DEFAULT,
              start: FitResult | None = None) -> FitResult:
    """Longer quasi-Newton run from ``start`` (or the tree's own constants); never worse than the start."""
    if T3 < 0:
        raise ValueError("T3 must be non-negative")
    if start is not None and T3 == 0:
        return start
    theta0 = start.theta if start is not None else tree.theta()
    skeleton = start.tree if start is not None else tree
    if T3 == 0:
        return _result(skeleton, theta0, data, False, {"bfgs": 0})
    obj = Objective(skeleton, data.X, data.y)
    with np.errstate(all="ignore"):
        best = _Best(theta0, obj.value(theta0))
        _, used, conv = bfgs(obj, theta0, T3, best)
    res = _result(skeleton, best.theta, data, conv, {"bfgs": used})
    if start is not None and start.nrmse < res.nrmse:
        return FitResult(start.tree, start.theta, start.nrmse, start.converged, {"bfgs": used})
    return res
