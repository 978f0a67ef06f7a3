"""Symbol priors estimated from an expression corpus.

Every tree is decomposed into the same sequence of decisions the controller
makes when it samples a skeleton:

``root``
    the root operator, keyed ``ROOT||0``;
``next``
    what follows a unary node at path position ``h``: another unary operator
    (the chain continues), a connector, or ``END`` (the node was a leaf
    operator).  Keyed ``<unary>||h``: the vertical prior;
``sib``
    the first symbol of the next branch under a connector at position ``h``,
    or ``CLOSE`` when no further branch follows.  Keyed
    ``<connector>|s1,s2,s3|h`` with up to three earlier siblings: the
    horizontal prior.

Counts are divided by the number of variables of the expression they come
from before being pooled over the corpus, so an operator applied to many
variables does not dominate the tables.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .expr import BINARY, DEFAULT_UNARY, TRIG, ExpressionTree, Leaf, Unary, iter_nodes, load_jsonl

log = logging.getLogger(__name__)

END = "END"
CLOSE = "CLOSE"
ROOT = "ROOT"
ROOT_KEY = "ROOT||0"
WILDCARD = "*"
MAX_SIBLING_CONTEXT = 3
DEFAULT_EPSILON = 1e-3
DEFAULT_MAX_DEPTH = 8


class IngestionError(ValueError):
    """A corpus record cannot be used for counting."""


# ---------------------------------------------------------------------------
# hard constraints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Adjacent:
    """Forbids ``lower`` applied directly inside ``upper``."""

    upper: str
    lower: str

    def matches(self, path: Sequence[str]) -> bool:
        return any(a == self.upper and b == self.lower for a, b in zip(path, path[1:]))

    def to_json(self) -> dict:
        return {"kind": "adjacent", "upper": self.upper, "lower": self.lower}


@dataclass(frozen=True)
class NestingLimit:
    """At most ``limit`` operators from ``group`` on one root-to-leaf path."""

    group: frozenset
    limit: int = 2

    def matches(self, path: Sequence[str]) -> bool:
        return sum(s in self.group for s in path) > self.limit

    def to_json(self) -> dict:
        return {"kind": "nesting", "group": sorted(self.group), "limit": self.limit}


@dataclass(frozen=True)
class IdInSequence:
    """``Id`` inside a sequence of two or more unary operators."""

    def matches(self, path: Sequence[str]) -> bool:
        seg: list[str] = []
        # path[0] is the root, path[-1] the leaf operator; neither is in a sequence
        for s in list(path[1:-1]) + [BINARY[0]]:
            if s in BINARY:
                if len(seg) >= 2 and "Id" in seg:
                    return True
                seg = []
            else:
                seg.append(s)
        return False

    def to_json(self) -> dict:
        return {"kind": "id_in_sequence"}


Pattern = Adjacent | NestingLimit | IdInSequence


def pattern_from_json(obj: dict) -> Pattern:
    kind = obj["kind"]
    if kind == "adjacent":
        return Adjacent(obj["upper"], obj["lower"])
    if kind == "nesting":
        return NestingLimit(frozenset(obj["group"]), int(obj["limit"]))
    if kind == "id_in_sequence":
        return IdInSequence()
    raise ValueError(f"unknown constraint kind {kind!r}")


def build_hc1() -> frozenset:
    return frozenset({
        Adjacent("exp", "exp"),
        Adjacent("log", "log"),
        Adjacent("exp", "log"),
        Adjacent("log", "exp"),
        NestingLimit(TRIG, 2),
        IdInSequence(),
    })


def violates(path: Sequence[str], hc1: Iterable[Pattern]) -> bool:
    return any(p.matches(path) for p in hc1)


def forbidden_after(upper: str, hc1: Iterable[Pattern]) -> set[str]:
    return {p.lower for p in hc1 if isinstance(p, Adjacent) and p.upper == upper}


# ---------------------------------------------------------------------------
# decision grammar shared with the controller
# ---------------------------------------------------------------------------


def context_key(parent: str, siblings: Sequence[str], level: int) -> str:
    return f"{parent}|{','.join(siblings)}|{level}"


def split_key(key: str) -> tuple[str, tuple[str, ...], int]:
    parent, sibs, level = key.split("|")
    return parent, tuple(s for s in sibs.split(",") if s), int(level)


def sibling_context(previous: Sequence[str], rank: dict[str, int]) -> tuple[str, ...]:
    """Earlier siblings ordered by corpus frequency rank (ties by name), at most three."""
    ordered = sorted(previous, key=lambda s: (rank.get(s, len(rank)), s))
    return tuple(ordered[:MAX_SIBLING_CONTEXT])


def legal_tokens(kind: str, parent: str, n_siblings: int, level: int,
                 unary: Sequence[str], hc1: Iterable[Pattern]) -> list[str]:
    """Tokens the grammar and the adjacency constraints allow for a decision."""
    if kind == "root":
        return list(unary)
    if kind == "next":
        banned = forbidden_after(parent, hc1) if parent != WILDCARD else set()
        toks = [u for u in unary if u not in banned]
        if parent == "Id" and level >= 1:
            toks = []
        toks += list(BINARY)
        if level >= 1:
            toks.append(END)
        return toks
    if kind == "sib":
        if parent == "div" and n_siblings >= 2:
            return [CLOSE]
        toks = list(unary)
        if n_siblings >= 2 or parent == WILDCARD:
            toks.append(CLOSE)
        return toks
    raise ValueError(f"unknown decision kind {kind!r}")


def key_kind(key: str) -> str:
    parent, _, _ = split_key(key)
    if parent == ROOT:
        return "root"
    if parent in BINARY or key.startswith(f"{WILDCARD}|{WILDCARD}|"):
        return "sib"
    return "next"


def decision_events(tree: ExpressionTree, rank: dict[str, int],
                    max_depth: int = DEFAULT_MAX_DEPTH) -> list[tuple[str, str, str]]:
    """(kind, context key, token) for every decision that generates ``tree``."""
    events: list[tuple[str, str, str]] = [("root", ROOT_KEY, tree.root.op)]

    def visit(node, pos: int) -> None:
        lvl = min(pos, max_depth)
        if isinstance(node, Leaf):
            events.append(("next", context_key(node.op, (), lvl), END))
            return
        if node.connector is None:
            child = node.children[0]
            events.append(("next", context_key(node.op, (), lvl), child.op))
            visit(child, pos + 1)
            return
        events.append(("next", context_key(node.op, (), lvl), node.connector))
        clvl = min(pos + 1, max_depth)
        heads: list[str] = []
        for child in node.children:
            events.append(("sib", context_key(node.connector, sibling_context(heads, rank), clvl),
                           child.op))
            heads.append(child.op)
        events.append(("sib", context_key(node.connector, sibling_context(heads, rank), clvl),
                       CLOSE))
        for child in node.children:
            visit(child, pos + 2)

    visit(tree.root, 0)
    return events


# ---------------------------------------------------------------------------
# normalized counts
# ---------------------------------------------------------------------------


def n_variables(tree: ExpressionTree) -> int:
    n = len(tree.variables())
    if n == 0:
        raise IngestionError("expression references no variables")
    return n


def symbol_counts(tree: ExpressionTree) -> Counter:
    """Raw symbol occurrences; a leaf operator counts once per variable it is applied to."""
    c: Counter = Counter()
    for node in iter_nodes(tree.root):
        if isinstance(node, Leaf):
            c[node.op] += len(node.vars)
        else:
            c[node.op] += 1
            if node.connector:
                c[node.connector] += 1
    return c


def branch_heads(tree: ExpressionTree) -> Counter:
    c: Counter = Counter()
    for node in iter_nodes(tree.root):
        if isinstance(node, Unary) and node.connector:
            c.update(child.op for child in node.children)
    return c


def normalized_count(corpus: Sequence[ExpressionTree], combination,
                     rank: dict[str, int] | None = None,
                     max_depth: int = DEFAULT_MAX_DEPTH) -> float:
    """Mean over expressions of raw count / number of variables.

    ``combination`` is either a symbol name or a ``(context key, token)``
    decision pair.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if rank is None:
        rank = sibling_rank(corpus)
    total = 0.0
    for tree in corpus:
        nv = n_variables(tree)
        if isinstance(combination, str):
            raw = symbol_counts(tree)[combination]
        else:
            key, token = combination
            raw = sum(1 for _, k, t in decision_events(tree, rank, max_depth)
                      if k == key and t == token)
        total += raw / nv
    return total / len(corpus)


def sibling_rank(corpus: Sequence[ExpressionTree]) -> dict[str, int]:
    """Rank of each symbol by corpus-wide normalized count as a branch head (0 = most frequent)."""
    freq: dict[str, float] = defaultdict(float)
    for tree in corpus:
        nv = n_variables(tree)
        for s, c in branch_heads(tree).items():
            freq[s] += c / nv
    ordered = sorted(freq, key=lambda s: (-freq[s], s))
    return {s: i for i, s in enumerate(ordered)}


# ---------------------------------------------------------------------------
# prior model
# ---------------------------------------------------------------------------


def floor_distribution(empirical: dict[str, float], legal: Sequence[str],
                       epsilon: float) -> tuple[dict[str, float], list[str]]:
    """Give every legal unseen token exactly ``epsilon``; seen tokens share the rest.

    Returns the distribution and the list of floored tokens.
    """
    seen = {t: empirical[t] for t in legal if empirical.get(t, 0.0) > 0.0}
    z = sum(seen.values())
    if z <= 0.0:
        u = 1.0 / len(legal)
        return {t: u for t in legal}, []
    unseen = [t for t in legal if t not in seen]
    mass = 1.0 - len(unseen) * epsilon
    if mass <= 0.0:
        raise ValueError(f"epsilon={epsilon} too large for {len(legal)} legal tokens")
    out = {t: mass * p / z for t, p in seen.items()}
    out.update({t: epsilon for t in unseen})
    return {t: out[t] for t in legal}, unseen


@dataclass
class PriorModel:
    unary: tuple[str, ...] = DEFAULT_UNARY
    vertical: dict[str, dict[str, float]] = field(default_factory=dict)
    horizontal: dict[str, dict[str, float]] = field(default_factory=dict)
    root: dict[str, float] = field(default_factory=dict)
    leaf: dict[str, float] = field(default_factory=dict)
    depth: dict[int, float] = field(default_factory=dict)
    width: dict[int, float] = field(default_factory=dict)
    hc1: frozenset = field(default_factory=build_hc1)
    hc2: tuple[tuple[str, str], ...] = ()
    epsilon: float = DEFAULT_EPSILON
    max_depth: int = DEFAULT_MAX_DEPTH
    rank: tuple[str, ...] = ()
    empirical: dict[str, dict[str, float]] = field(default_factory=dict, repr=False)

    @classmethod
    def uniform(cls, unary: Sequence[str] = DEFAULT_UNARY, max_depth: int = DEFAULT_MAX_DEPTH,
                epsilon: float = DEFAULT_EPSILON) -> "PriorModel":
        """No tables: every lookup falls through to a uniform distribution over legal tokens."""
        return cls(unary=tuple(unary), max_depth=max_depth, epsilon=epsilon, rank=tuple(unary))

    @property
    def rank_map(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.rank)}

    def lookup(self, kind: str, parent: str, siblings: Sequence[str], level: int) -> dict[str, float] | None:
        """Conditional for one decision; falls back to the pooled table at that level."""
        level = min(level, self.max_depth)
        if kind == "root":
            return self.vertical.get(ROOT_KEY)
        table = self.horizontal if kind == "sib" else self.vertical
        key = context_key(parent, siblings, level)
        dist = table.get(key)
        if dist is None:
            pooled = (context_key(WILDCARD, (), level) if kind == "next"
                      else context_key(WILDCARD, (WILDCARD,), level))
            dist = table.get(pooled)
            if table:
                log.debug("no prior context %s; using %s", key, pooled if dist else "uniform")
        return dist

    # serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "vertical": self.vertical,
            "horizontal": self.horizontal,
            "root": self.root,
            "leaf": self.leaf,
            "depth": {str(k): v for k, v in sorted(self.depth.items())},
            "width": {str(k): v for k, v in sorted(self.width.items())},
            "hc1": sorted((p.to_json() for p in self.hc1), key=lambda d: json.dumps(d, sort_keys=True)),
            "hc2": [list(e) for e in self.hc2],
            "epsilon": self.epsilon,
            "symbol_registry": {
                "unary": list(self.unary),
                "binary": list(BINARY),
                "special": [END, CLOSE],
                "sibling_rank": list(self.rank),
                "max_depth": self.max_depth,
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_json(cls, obj: dict) -> "PriorModel":
        reg = obj["symbol_registry"]
        return cls(
            unary=tuple(reg["unary"]),
            vertical=obj["vertical"],
            horizontal=obj["horizontal"],
            root=obj["root"],
            leaf=obj["leaf"],
            depth={int(k): v for k, v in obj["depth"].items()},
            width={int(k): v for k, v in obj["width"].items()},
            hc1=frozenset(pattern_from_json(p) for p in obj["hc1"]),
            hc2=tuple(tuple(e) for e in obj["hc2"]),
            epsilon=obj["epsilon"],
            max_depth=reg.get("max_depth", DEFAULT_MAX_DEPTH),
            rank=tuple(reg.get("sibling_rank", reg["unary"])),
        )

    @classmethod
    def load(cls, path) -> "PriorModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _normalize(counts: dict) -> dict:
    z = sum(counts.values())
    return {k: v / z for k, v in sorted(counts.items())} if z > 0 else {}


def structural_distributions(corpus: Sequence[ExpressionTree]):
    """Root-operator, leaf-operator, depth and width distributions.

    Root and leaf operator weights are divided by each expression's variable
    count; depth and width contribute one observation per expression.
    """
    root: dict[str, float] = defaultdict(float)
    leaf: dict[str, float] = defaultdict(float)
    depth: dict[int, float] = defaultdict(float)
    width: dict[int, float] = defaultdict(float)
    for tree in corpus:
        nv = n_variables(tree)
        root[tree.root.op] += 1.0 / nv
        for lf in tree.leaves():
            leaf[lf.op] += len(lf.vars) / nv
        depth[tree.depth] += 1.0
        width[tree.width] += 1.0
    return _normalize(root), _normalize(leaf), _normalize(depth), _normalize(width)


def estimate_conditional(corpus: Sequence[ExpressionTree], *, epsilon: float = DEFAULT_EPSILON,
                         max_depth: int = DEFAULT_MAX_DEPTH, unary: Sequence[str] | None = None,
                         hc1: frozenset | None = None) -> PriorModel:
    """Vertical and horizontal conditionals plus structural distributions."""
    if not corpus:
        raise ValueError("empty corpus")
    hc1 = build_hc1() if hc1 is None else hc1
    if unary is None:
        seen = {lf_op for t in corpus for lf_op in _unary_symbols(t)}
        unary = tuple(DEFAULT_UNARY) + tuple(sorted(seen - set(DEFAULT_UNARY)))
    rank = sibling_rank(corpus)
    full_rank = tuple(sorted(rank, key=rank.get)) + tuple(sorted(set(unary) - set(rank)))

    joint: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
    for tree in corpus:
        w = 1.0 / n_variables(tree)
        for kind, key, token in decision_events(tree, rank, max_depth):
            joint[key][token] += w
            if kind == "next":
                joint[context_key(WILDCARD, (), split_key(key)[2])][token] += w
            elif kind == "sib":
                joint[context_key(WILDCARD, (WILDCARD,), split_key(key)[2])][token] += w

    vertical: dict[str, dict[str, float]] = {}
    horizontal: dict[str, dict[str, float]] = {}
    empirical: dict[str, dict[str, float]] = {}
    hc2: list[tuple[str, str]] = []
    for key in sorted(joint):
        counts = joint[key]
        kind = key_kind(key)
        parent, sibs, level = split_key(key)
        legal = legal_tokens(kind, parent, len(sibs), level, unary, hc1)
        emp = _normalize(counts)
        empirical[key] = emp
        dist, floored = floor_distribution({t: emp.get(t, 0.0) for t in legal}, legal, epsilon)
        hc2.extend((key, t) for t in floored)
        (horizontal if kind == "sib" else vertical)[key] = dist

    root, leaf, depth, width = structural_distributions(corpus)
    return PriorModel(
        unary=tuple(unary), vertical=vertical, horizontal=horizontal, root=root, leaf=leaf,
        depth=depth, width=width, hc1=hc1, hc2=tuple(hc2), epsilon=epsilon,
        max_depth=max_depth, rank=full_rank, empirical=empirical,
    )


def _unary_symbols(tree: ExpressionTree) -> set[str]:
    return {n.op for n in iter_nodes(tree.root)}


def load_corpus(path) -> list[ExpressionTree]:
    """Read a ``.jsonl`` corpus, skipping records that reference no variables."""
    kept = []
    for i, tree in enumerate(load_jsonl(path)):
        if not tree.variables():
            log.warning("corpus record %d rejected: no variables", i)
            continue
        kept.append(tree)
    return kept


def kl_divergence(p: dict[str, float], q: dict[str, float]) -> float:
    return sum(pv * math.log(pv / q[t]) for t, pv in p.items() if pv > 0)
