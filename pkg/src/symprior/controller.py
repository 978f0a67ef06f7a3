"""Tree-structured recurrent policy over expression skeletons.

One gated recurrent cell is shared by every decision position::

    z = sigmoid(Wz x + Uz h_prev + bz)
    c = tanh(Wc x + Uc h_prev + bc)
    h = (1 - z) * h_prev + z * c

and one output head per decision kind (root operator, what-follows-a-unary,
next sibling) maps ``h`` to logits over the token vocabulary.  The input
``x`` is the concatenation of one-hots for the parent token, the previous
sibling token, the level and the decision kind.

In ``tree`` mode ``h_prev`` is the hidden state of the parent node for a
first child and of the previous sibling otherwise, so information flows
parent->child and sibling->sibling.  In ``linear`` mode ``h_prev`` is simply
the previous decision in sampling order and the parent slot carries the
previous token, i.e. an ordinary sequence RNN over the same grammar.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import BINARY, ExpressionTree, Leaf, Unary
from .priors import (
    CLOSE, END, IdInSequence, PriorModel, legal_tokens, sibling_context, violates,
)

log = logging.getLogger(__name__)

KINDS = ("root", "next", "sib")
HEADS = {"root": "Wo_root", "next": "Wo_next", "sib": "Wo_sib"}
INIT_SCALE = 0.08


def categorical_kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) = sum p log(p / q) over the support of ``p``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    nz = p > 0
    if np.any(q[nz] <= 0):
        raise ValueError("q must be positive wherever p is")
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


@dataclass
class Decision:
    kind: int
    parent: int
    sibling: int
    level: int
    prev: int
    mask: np.ndarray
    token: int
    context: tuple  # (kind name, parent symbol, sibling context, level) for prior lookup


@dataclass
class SampledSkeleton:
    tree: ExpressionTree
    decisions: list[Decision]
    tokens: tuple[str, ...]
    mode: str
    log_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def symbols(self) -> list[str]:
        return [self.tokens[d.token] for d in self.decisions]

    def __len__(self) -> int:
        return len(self.decisions)


@dataclass
class NodeOutput:
    y: np.ndarray
    mask: np.ndarray
    hidden: np.ndarray


class Controller:
    """Parameters and sampling state for the recurrent policy."""

    def __init__(self, unary: Sequence[str], hidden: int = 64, *, max_depth: int = 8,
                 max_width: int = 5, max_seq: int = 3, mode: str = "tree",
                 n_vars: int = 1, seed: int = 0):
        if mode not in ("tree", "linear"):
            raise ValueError(f"mode must be 'tree' or 'linear', got {mode!r}")
        if max_depth < 2:
            raise ValueError("max_depth must be at least 2")
        self.unary = tuple(unary)
        if "Id" not in self.unary:
            raise ValueError("the unary registry must contain Id")
        self.tokens = self.unary + tuple(BINARY) + (END, CLOSE)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.hidden = hidden
        self.max_depth = max_depth
        self.max_width = max_width
        self.max_seq = max_seq
        self.mode = mode
        self.n_vars = n_vars
        V = len(self.tokens)
        self.null = V
        self.off_sib = V + 1
        self.off_level = 2 * (V + 1)
        self.off_kind = self.off_level + max_depth + 1
        self.n_inputs = self.off_kind + len(KINDS)
        rng = np.random.default_rng(seed)
        H, D = hidden, self.n_inputs

        def u(*shape):
            return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

        self.params: dict[str, np.ndarray] = {
            "Wz": u(H, D), "Uz": u(H, H), "bz": np.zeros(H),
            "Wc": u(H, D), "Uc": u(H, H), "bc": np.zeros(H),
        }
        for kind, name in HEADS.items():
            self.params[name] = u(V, H)
            self.params["b" + name[1:]] = np.zeros(V)

    # parameter plumbing ----------------------------------------------------

    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k, p in self.params.items():
            self.params[k] = np.asarray(vec[i:i + p.size], dtype=float).reshape(p.shape).copy()
            i += p.size

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self.params])

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(p) for k, p in self.params.items()}

    def to_json(self) -> dict:
        return {
            "registry": list(self.unary),
            "hidden": self.hidden,
            "mode": self.mode,
            "max_depth": self.max_depth,
            "max_width": self.max_width,
            "max_seq": self.max_seq,
            "n_vars": self.n_vars,
            "weights": {k: {"shape": list(p.shape), "data": p.ravel().tolist()}
                        for k, p in self.params.items()},
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def from_json(cls, obj: dict) -> "Controller":
        ctl = cls(obj["registry"], obj["hidden"], max_depth=obj["max_depth"],
                  max_width=obj["max_width"], max_seq=obj["max_seq"], mode=obj["mode"],
                  n_vars=obj.get("n_vars", 1))
        for k, w in obj["weights"].items():
            ctl.params[k] = np.array(w["data"], dtype=float).reshape(w["shape"])
        return ctl

    @classmethod
    def load(cls, path) -> "Controller":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    # recurrence ------------------------------------------------------------

    def _cell(self, d: Decision, h_prev: np.ndarray):
        P = self.params
        cols = (d.parent, self.off_sib + d.sibling, self.off_level + d.level, self.off_kind + d.kind)
        xz = P["Wz"][:, cols].sum(axis=1)
        xc = P["Wc"][:, cols].sum(axis=1)
        z = 1.0 / (1.0 + np.exp(-(xz + P["Uz"] @ h_prev + P["bz"])))
        c = np.tanh(xc + P["Uc"] @ h_prev + P["bc"])
        h = (1.0 - z) * h_prev + z * c
        name = HEADS[KINDS[d.kind]]
        logits = P[name] @ h + P["b" + name[1:]]
        return h, z, c, logits

    @staticmethod
    def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
        m = np.where(mask, logits, -np.inf)
        m = m - m[mask].max()
        e = np.where(mask, np.exp(m), 0.0)
        return e / e.sum()

    def forward(self, skel: SampledSkeleton):
        """Hidden states, gates and output distributions for every decision."""
        self._check_registry(skel)
        zeros = np.zeros(self.hidden)
        cache = []
        for d in skel.decisions:
            hp = cache[d.prev][0] if d.prev >= 0 else zeros
            h, z, c, logits = self._cell(d, hp)
            cache.append((h, z, c, self._masked_softmax(logits, d.mask), hp))
        return cache

    def _check_registry(self, skel: SampledSkeleton) -> None:
        if skel.tokens != self.tokens or skel.mode != self.mode:
            raise ValueError("skeleton was sampled under a different registry or controller mode")

    def backward(self, skel: SampledSkeleton, cache, dlogits: list[np.ndarray]) -> dict[str, np.ndarray]:
        """Parameter gradient given d(objective)/d(logits) at every decision."""
        P = self.params
        g = self.zero_grads()
        dh = [np.zeros(self.hidden) for _ in skel.decisions]
        for i in range(len(skel.decisions) - 1, -1, -1):
            d = skel.decisions[i]
            h, z, c, _, hp = cache[i]
            name = HEADS[KINDS[d.kind]]
            dl = dlogits[i]
            g[name] += np.outer(dl, h)
            g["b" + name[1:]] += dl
            dhi = dh[i] + P[name].T @ dl
            dz = dhi * (c - hp)
            dc = dhi * z
            daz = dz * z * (1.0 - z)
            dac = dc * (1.0 - c * c)
            cols = (d.parent, self.off_sib + d.sibling, self.off_level + d.level, self.off_kind + d.kind)
            for col in cols:
                g["Wz"][:, col] += daz
                g["Wc"][:, col] += dac
            g["Uz"] += np.outer(daz, hp)
            g["Uc"] += np.outer(dac, hp)
            g["bz"] += daz
            g["bc"] += dac
            if d.prev >= 0:
                dh[d.prev] += dhi * (1.0 - z) + P["Uz"].T @ daz + P["Uc"].T @ dac
        return g

    # prior plumbing ------------------------------------------------------------

    def prior_vector(self, prior: PriorModel, context: tuple, mask: np.ndarray) -> np.ndarray:
        """Prior restricted to ``mask`` and renormalized; uniform on the mask when unavailable."""
        kind, parent, sibs, level = context
        dist = prior.lookup(kind, parent, sibs, level)
        vec = np.zeros(len(self.tokens))
        if dist:
            for t, p in dist.items():
                j = self.index.get(t)
                if j is not None:
                    vec[j] = p
        vec = np.where(mask, vec, 0.0)
        z = vec.sum()
        if z <= 0.0:
            vec = mask.astype(float)
            z = vec.sum()
        return vec / z

    # sampling ------------------------------------------------------------------

    def sample(self, prior: PriorModel, rng: np.random.Generator, *, policy: bool = True) -> SampledSkeleton:
        """Draw one skeleton.  With ``policy=False`` decisions are drawn from the
        prior itself (under the same masks) and the network is not consulted."""
        if tuple(prior.unary) != self.unary:
            raise ValueError("prior and controller use different unary registries")
        rank = prior.rank_map
        hc_paths = [p for p in prior.hc1 if not isinstance(p, IdInSequence)]
        decisions: list[Decision] = []
        hiddens: list[np.ndarray] = []
        logps: list[float] = []
        zeros = np.zeros(self.hidden)
        tok = self.tokens
        idx = self.index

        def decide(kind: str, parent_sym: str | None, sib_sym: str | None, level: int,
                   tree_prev: int, legal: list[str], context: tuple) -> str:
            mask = np.zeros(len(tok), dtype=bool)
            for t in legal:
                mask[idx[t]] = True
            if not mask.any():
                fallback = END if (kind == "next" and level >= 1) else "Id"
                log.warning("every token masked at a %s decision; emitting %s", kind, fallback)
                mask[idx[fallback]] = True
            pv = self.prior_vector(prior, context, mask)
            restricted = mask & (pv > 0)
            if restricted.any():
                mask = restricted
            if self.mode == "tree":
                prev = tree_prev
                p_in = idx[parent_sym] if parent_sym is not None else self.null
                s_in = idx[sib_sym] if sib_sym is not None else self.null
            else:
                prev = len(decisions) - 1
                p_in = decisions[-1].token if decisions else self.null
                s_in = self.null
            d = Decision(KINDS.index(kind), p_in, s_in, min(level, self.max_depth), prev,
                         mask, -1, context)
            if policy:
                hp = hiddens[prev] if prev >= 0 else zeros
                h, _, _, logits = self._cell(d, hp)
                probs = self._masked_softmax(logits, mask)
            else:
                h = zeros
                probs = np.where(mask, pv, 0.0)
                probs = probs / probs.sum()
            j = int(rng.choice(len(tok), p=probs))
            d.token = j
            decisions.append(d)
            hiddens.append(h)
            logps.append(float(np.log(probs[j])))
            return tok[j]

        def path_ok(path: list[str], t: str) -> bool:
            return not violates(path + [t], hc_paths)

        def grow(op: str, pos: int, didx: int, path: list[str], chain: int):
            """Decide what follows unary ``op`` at path position ``pos``."""
            is_root = pos == 0
            lvl = min(pos, self.max_depth)
            legal = legal_tokens("next", op, 0, lvl, self.unary, prior.hc1)
            allowed = []
            for t in legal:
                if t == END:
                    allowed.append(t)
                elif t in BINARY:
                    if pos + 3 <= self.max_depth and chain <= self.max_seq and not (op == "Id" and chain >= 2):
                        allowed.append(t)
                else:
                    if (pos + 2 <= self.max_depth and chain <= self.max_seq
                            and not (op == "Id" and chain >= 2) and path_ok(path, t)):
                        allowed.append(t)
            t = decide("next", op, None, pos, didx, allowed, ("next", op, (), lvl))
            my = len(decisions) - 1
            if t == END:
                return Leaf(op, (1.0,) * self.n_vars, tuple(range(self.n_vars)))
            if t in BINARY:
                children = []
                heads: list[str] = []
                prev = my
                cap = 2 if t == "div" else self.max_width
                clvl = min(pos + 1, self.max_depth)
                while True:
                    ctx = sibling_context(heads, rank)
                    legal = legal_tokens("sib", t, len(heads), clvl, self.unary, prior.hc1)
                    if len(heads) >= cap:
                        legal = [CLOSE]
                    allowed = [s for s in legal if s == CLOSE or path_ok(path + [t], s)]
                    s = decide("sib", t, heads[-1] if heads else None, clvl, prev, allowed,
                               ("sib", t, ctx, clvl))
                    if s == CLOSE:
                        break
                    hd = len(decisions) - 1
                    children.append(grow(s, pos + 2, hd, path + [t, s], 1))
                    heads.append(s)
                    prev = hd
                return Unary(op, 1.0, 0.0, t, tuple(children))
            child = grow(t, pos + 1, my, path + [t], 1 if is_root else chain + 1)
            return Unary(op, 1.0, 0.0, None, (child,))

        root_legal = [u for u in self.unary if path_ok([], u)]
        r = decide("root", None, None, 0, -1, root_legal, ("root", "ROOT", (), 0))
        root = grow(r, 0, 0, [r], 0)
        tree = ExpressionTree(root)
        return SampledSkeleton(tree, decisions, self.tokens, self.mode, np.array(logps))

    # objectives ----------------------------------------------------------------

    def outputs(self, skel: SampledSkeleton) -> list[NodeOutput]:
        return [NodeOutput(y, d.mask, h) for d, (h, _, _, y, _) in zip(skel.decisions, self.forward(skel))]

    def log_prob_and_grad(self, skel: SampledSkeleton):
        cache = self.forward(skel)
        total = 0.0
        dlogits = []
        for d, (_, _, _, y, _) in zip(skel.decisions, cache):
            total += float(np.log(y[d.token]))
            dl = -y.copy()
            dl[d.token] += 1.0
            dlogits.append(dl)
        return total, self.backward(skel, cache, dlogits)

    def kl_and_grad(self, skel: SampledSkeleton, prior: PriorModel):
        """Mean over decisions of KL(prior || policy) and its gradient."""
        cache = self.forward(skel)
        n = len(skel.decisions)
        total = 0.0
        dlogits = []
        for d, (_, _, _, y, _) in zip(skel.decisions, cache):
            p = self.prior_vector(prior, d.context, d.mask)
            total += categorical_kl(p, y)
            dlogits.append((y - p) / n)
        return total / n, self.backward(skel, cache, dlogits)

    def combined_grad(self, skel: SampledSkeleton, prior: PriorModel, w_logp: float, w_kl: float):
        """Gradient of ``w_logp * log p(skel) + w_kl * KL_avg(skel)`` with one forward/backward.

        Returns (log p, KL_avg, gradient).
        """
        cache = self.forward(skel)
        n = len(skel.decisions)
        lp = kl = 0.0
        dlogits = []
        for d, (_, _, _, y, _) in zip(skel.decisions, cache):
            lp += float(np.log(y[d.token]))
            p = self.prior_vector(prior, d.context, d.mask)
            kl += categorical_kl(p, y)
            dl = -w_logp * y
            dl[d.token] += w_logp
            dl += w_kl * (y - p) / n
            dlogits.append(dl)
        return lp, kl / n, self.backward(skel, cache, dlogits)


# functional surface ------------------------------------------------------------


def sample(params: Controller, prior_model: PriorModel, rng: np.random.Generator) -> SampledSkeleton:
    return params.sample(prior_model, rng)


def log_prob_and_grad(params: Controller, skeleton: SampledSkeleton):
    return params.log_prob_and_grad(skeleton)


def kl_and_grad(params: Controller, skeleton: SampledSkeleton, prior_model: PriorModel):
    return params.kl_and_grad(skeleton, prior_model)


class Adam:
    """Adam on a dict of arrays; ``step`` ascends when ``ascent`` is set."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], ascent: bool = True) -> None:
        self.t += 1
        sign = 1.0 if ascent else -1.0
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] + sign * self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
