"""Benchmark problems: ground-truth trees with sampling ranges.

Built in are four domain expressions (a nuclear Hamiltonian, a tumour
bystander-cell rate, an inhibited three-substrate reaction rate and a deep
engineering function), the ``sin(x) + cos(x)`` toy, and a synthetic suite
drawn from a prior.  Further problems are read from JSON files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..controller import Controller
from ..expr import ExpressionTree, from_dict, leaf, skeleton_key, to_dict, unary
from ..priors import PriorModel, estimate_conditional

NOISE_LEVELS = (0.0, 0.01, 0.05, 0.07, 0.1)
N_TRAIN, N_TEST = 2000, 1000


@dataclass(frozen=True)
class BenchmarkProblem:
    name: str
    tree: ExpressionTree
    ranges: tuple[tuple[float, float], ...]
    n_train: int = N_TRAIN
    n_test: int = N_TEST
    noise_levels: tuple[float, ...] = NOISE_LEVELS
    names: tuple[str, ...] = ()
    constants: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = max(self.tree.variables(), default=-1) + 1
        if len(self.ranges) != n:
            raise ValueError(f"{self.name}: {len(self.ranges)} ranges for {n} variables")
        for lo, hi in self.ranges:
            if not lo < hi:
                raise ValueError(f"{self.name}: empty range [{lo}, {hi}]")

    @property
    def n_vars(self) -> int:
        return len(self.ranges)

    def to_json(self) -> dict:
        out = {
            "name": self.name,
            "tree": to_dict(self.tree.root),
            "ranges": [list(r) for r in self.ranges],
            "n_train": self.n_train,
            "n_test": self.n_test,
            "noise_levels": list(self.noise_levels),
        }
        if self.names:
            out["names"] = list(self.names)
        if self.constants:
            out["constants"] = dict(self.constants)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "BenchmarkProblem":
        tree = ExpressionTree(from_dict(obj["tree"]))
        n = max(tree.variables(), default=-1) + 1
        ranges = obj["ranges"]
        if len(ranges) == 2 and all(isinstance(v, (int, float)) for v in ranges):
            ranges = [ranges] * n
        return cls(
            name=obj["name"],
            tree=tree,
            ranges=tuple((float(lo), float(hi)) for lo, hi in ranges),
            n_train=int(obj.get("n_train", N_TRAIN)),
            n_test=int(obj.get("n_test", N_TEST)),
            noise_levels=tuple(float(v) for v in obj.get("noise_levels", NOISE_LEVELS)),
            names=tuple(obj.get("names", ())),
            constants=dict(obj.get("constants", {})),
        )


def load_suite(path) -> list[BenchmarkProblem]:
    """A JSON file holding one problem, a list of problems, or ``{"problems": [...]}``."""
    with open(path) as fh:
        obj = json.load(fh)
    if isinstance(obj, dict) and "problems" in obj:
        obj = obj["problems"]
    if isinstance(obj, dict):
        obj = [obj]
    return [BenchmarkProblem.from_json(p) for p in obj]


def save_suite(path, suite: Sequence[BenchmarkProblem]) -> None:
    with open(path, "w") as fh:
        json.dump({"problems": [p.to_json() for p in suite]}, fh, indent=1, sort_keys=True)


def _branch(op, child=None, alpha=1.0, beta=0.0, connector=None, children=()):
    return unary(op, child, alpha, beta, connector=connector, children=tuple(children))


# domain problems -------------------------------------------------------------


def hamiltonian(A: float = 2.0, m_N: float = 1.5, g: float = 0.8) -> BenchmarkProblem:
    """Three-nucleon Hamiltonian; variables p1, p2, p3, r12, r13, r23.

    The pair sum of momentum products is rewritten as ((sum p)^2 - sum p^2) / 2,
    so the kinetic part becomes sum p^2 / (2 m) - (sum p)^2 / (2 m A).
    """
    p, r = [0, 1, 2], [3, 4, 5]
    kinetic = leaf("square", [1.0 / (2 * m_N)] * 3, p)
    cross = _branch("square", leaf("Id", [1.0] * 3, p), alpha=-1.0 / (2 * m_N * A))
    potential = leaf("inv", [g] * 3, r)
    root = _branch("Id", connector="add", children=[kinetic, cross, potential])
    return BenchmarkProblem(
        "hamiltonian", ExpressionTree(root), ((0.5, 2.0),) * 6,
        names=("p1", "p2", "p3", "r12", "r13", "r23"),
        constants={"A": A, "m_N": m_N, "g": g},
    )


def biology(b=0.5, gamma_B=0.1, mu_B=0.3, K2=1.0, d_B=0.05, s=2.0, k=0.8, omega_B=0.2) -> BenchmarkProblem:
    """Bystander-cell growth rate; variables B, C, T_s, T_r."""
    B, C, Ts, Tr = 0, 1, 2, 3
    decay = leaf("Id", [-gamma_B], [B])
    crowding = _branch("log", leaf("Id", [1.0 / K2, 1.0 / K2], [B, C]), alpha=-mu_B)
    # u = d_B + s (B / T_s)^2 ; activation u^2 / (k + u^2)
    ratio = [leaf("Id", [1.0], [B]), leaf("Id", [1.0], [Ts])]
    u = _branch("square", alpha=s, beta=d_B, connector="div", children=ratio)
    activation = _branch("Id", connector="div",
                         children=[_branch("square", u), _branch("square", u, beta=k)])
    growth = _branch("Id", connector="mul", children=[activation, leaf("Id", [1.0], [B])])
    kill = _branch("Id", alpha=-omega_B, connector="mul",
                   children=[leaf("Id", [1.0], [B]), leaf("Id", [1.0, 1.0], [Ts, Tr])])
    root = _branch("Id", beta=b, connector="add", children=[decay, crowding, growth, kill])
    return BenchmarkProblem(
        "biology", ExpressionTree(root), ((0.1, 2.0),) * 4,
        names=("B", "C", "T_s", "T_r"),
        constants={"b": b, "gamma_B": gamma_B, "mu_B": mu_B, "K2": K2, "d_B": d_B,
                   "s": s, "k": k, "omega_B": omega_B},
    )


def reaction_rate(V_max: float = 1.0, K_m: float = 0.5, K_i: float = 0.3) -> BenchmarkProblem:
    """Three-substrate rate with a non-competitive inhibitor; variables S1, S2, S3, I."""
    num = _branch("Id", connector="mul",
                  children=[leaf("Id", [V_max], [0]), leaf("Id", [1.0], [1]), leaf("Id", [1.0], [2])])
    den = _branch("Id", connector="mul", children=[
        _branch("Id", leaf("Id", [1.0, 1.0, 1.0], [0, 1, 2]), beta=K_m),
        _branch("Id", leaf("Id", [1.0 / K_i], [3]), beta=1.0),
    ])
    root = _branch("Id", connector="div", children=[num, den])
    return BenchmarkProblem(
        "reaction_rate", ExpressionTree(root), ((0.1, 2.0),) * 4,
        names=("S1", "S2", "S3", "I"),
        constants={"V_max": V_max, "K_m": K_m, "K_i": K_i},
    )


def engineering(alpha=1.2, beta=0.8, gamma=2.0, delta=0.5, epsilon=0.1, eta=1.5,
                theta=0.3, zeta=0.05, lam=0.01) -> BenchmarkProblem:
    """log(a sqrt(x) + b sin(g x + d)) + e / (cos(h sqrt(x) + t log x) + z exp(-l x^2)).

    The phase shift is expanded as sin(g x) cos d + cos(g x) sin d because
    leaves carry no additive constant.
    """
    inner = _branch("log", connector="add", children=[
        leaf("sqrt", [alpha]),
        _branch("sin", leaf("Id", [gamma]), alpha=beta * math.cos(delta)),
        _branch("cos", leaf("Id", [gamma]), alpha=beta * math.sin(delta)),
    ])
    den = _branch("inv", alpha=epsilon, connector="add", children=[
        _branch("cos", connector="add", children=[leaf("sqrt", [eta]), leaf("log", [theta])]),
        _branch("exp", leaf("square", [-lam]), alpha=zeta),
    ])
    root = _branch("Id", connector="add", children=[inner, den])
    return BenchmarkProblem(
        "engineering", ExpressionTree(root), ((1.0, 10.0),), names=("x",),
        constants={"alpha": alpha, "beta": beta, "gamma": gamma, "delta": delta, "epsilon": epsilon,
                   "eta": eta, "theta": theta, "zeta": zeta, "lambda": lam},
    )


def domain_suite() -> list[BenchmarkProblem]:
    return [hamiltonian(), biology(), reaction_rate(), engineering()]


def toy_sincos() -> BenchmarkProblem:
    root = _branch("Id", connector="add", children=[leaf("sin", [1.0]), leaf("cos", [1.0])])
    return BenchmarkProblem("sin_plus_cos", ExpressionTree(root), ((-math.pi, math.pi),),
                            names=("x",), noise_levels=(0.0,))


# corpora and synthetic problems ----------------------------------------------------


def trig_corpus() -> list[ExpressionTree]:
    """Small corpus dominated by trigonometric terms joined by addition."""
    out = []
    for a, b in (("sin", "cos"), ("cos", "sin"), ("sin", "cos"), ("cos", "sin"), ("sin", "sin"), ("cos", "cos")):
        out.append(ExpressionTree(_branch("Id", connector="add", children=[leaf(a, [1.0]), leaf(b, [1.0])])))
    out.append(ExpressionTree(_branch("sin", leaf("Id", [1.0]))))
    out.append(ExpressionTree(_branch("Id", connector="add",
                                      children=[leaf("sin", [1.0]), leaf("cos", [1.0]), leaf("Id", [1.0])])))
    return out


def _e(obj) -> ExpressionTree:
    return ExpressionTree(from_dict(obj))


def physics_corpus() -> list[ExpressionTree]:
    """Hand-written one- and two-variable expressions with a physics flavour."""
    L = lambda op, g=(1.0,), v=(0,): {"leaf": op, "gamma": list(g), "vars": list(v)}  # noqa: E731
    N = lambda op, conn=None, *ch: {"op": op, "alpha": 1.0, "beta": 0.0, "connector": conn,  # noqa: E731
                                    "children": list(ch)}
    recs = [
        N("Id", "add", L("sin"), L("cos")),
        N("Id", "add", L("sin"), L("square")),
        N("Id", "add", L("exp"), L("Id")),
        N("Id", "add", L("cos"), L("square")),
        N("Id", "mul", L("exp"), L("sin")),
        N("Id", "mul", L("Id"), L("cos")),
        N("exp", None, L("square")),
        N("sin", None, L("Id")),
        N("cos", None, L("Id")),
        N("Id", "add", L("sin"), L("cos"), L("Id")),
        N("Id", "add", N("sin", None, L("Id")), L("square")),
        N("square", None, L("Id")),
        N("Id", "mul", L("Id"), L("exp")),
        N("Id", "add", L("sin", (1.0, 1.0), (0, 1)), L("Id", (1.0, 1.0), (0, 1))),
        N("Id", "mul", L("Id"), L("Id", (1.0,), (1,))),
        N("exp", None, L("Id")),
        N("Id", "add", L("square"), L("Id")),
        N("sqrt", None, L("square", (1.0, 1.0), (0, 1))),
    ]
    return [_e(r) for r in recs]


def synthetic_suite(prior: PriorModel, n_problems: int = 5, seed: int = 0, *, max_depth: int = 5,
                    max_width: int = 3, max_decisions: int = 9, ranges=(0.5, 2.0),
                    n_train: int = N_TRAIN, n_test: int = N_TEST,
                    noise_levels: Sequence[float] = NOISE_LEVELS) -> list[BenchmarkProblem]:
    """Distinct problems whose skeletons are drawn from ``prior`` itself.

    Leaf coefficients are uniform in [0.5, 1.5]; skeletons that are too large,
    repeat an earlier draw, or are non-finite or flat on the range are redrawn.
    """
    rng = np.random.default_rng([seed, 7])
    sampler = Controller(prior.unary, 1, max_depth=max_depth, max_width=max_width, n_vars=1)
    xs = np.linspace(ranges[0], ranges[1], 512)[:, None]
    out: list[BenchmarkProblem] = []
    seen: set[str] = set()
    for _ in range(10_000):
        if len(out) == n_problems:
            break
        sk = sampler.sample(prior, rng, policy=False)
        key = skeleton_key(sk.tree)
        if len(sk) > max_decisions or key in seen:
            continue
        theta = sk.tree.theta()
        layout = sk.tree.param_layout()
        for i, (_, fld, _) in enumerate(layout):
            if fld == "gamma":
                theta[i] = rng.uniform(0.5, 1.5)
        tree = sk.tree.with_theta(theta)
        with np.errstate(all="ignore"):
            f = tree.evaluate(xs)
        if not np.all(np.isfinite(f)) or np.std(f) < 1e-2 or np.max(np.abs(f)) > 1e4:
            continue
        seen.add(key)
        out.append(BenchmarkProblem(f"synthetic_{len(out)}", tree, (tuple(ranges),), n_train, n_test,
                                    tuple(noise_levels), names=("x",)))
    if len(out) < n_problems:
        raise RuntimeError(f"only {len(out)} usable synthetic problems drawn")
    return out


def builtin_prior(name: str, max_depth: int = 8) -> PriorModel:
    corpora = {"trig": trig_corpus, "physics": physics_corpus}
    if name not in corpora:
        raise KeyError(f"unknown built-in corpus {name!r}; choose from {sorted(corpora)}")
    return estimate_conditional(corpora[name](), max_depth=max_depth)


def builtin_suite(name: str, *, prior: PriorModel | None = None, seed: int = 0,
                  max_depth: int = 5) -> list[BenchmarkProblem]:
    if name == "domain":
        return domain_suite()
    if name == "toy":
        return [toy_sincos()]
    if name == "synthetic":
        return synthetic_suite(prior or builtin_prior("physics", max_depth), seed=seed, max_depth=max_depth)
    raise KeyError(f"unknown built-in suite {name!r}")
