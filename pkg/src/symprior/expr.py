"""Multi-branch expression trees.

A tree is rooted at a :class:`Unary` node.  A unary node either chains into a
single child (``connector=None``) or applies its operator to the output of a
binary connector that joins two or more branches.  Leaves apply one unary
operator element-wise to a set of input columns and return the
gamma-weighted sum::

    Unary:  alpha * op(input) + beta
    Leaf:   sum_i gamma_i * op(x[:, vars_i])

Consecutive non-root unary nodes form a *sequence*; ``Id`` may appear in a
sequence only when it is the sole operator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, Union

import numpy as np

GUARD = 1e-12
TAN_GUARD = 1e-8


class ExprError(ValueError):
    """Base class for malformed expression trees."""


class ParseError(ExprError):
    def __init__(self, message: str, position: int | str | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)


class ArityError(ExprError):
    pass


class StructureError(ExprError):
    pass


# ---------------------------------------------------------------------------
# operator registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnaryOp:
    """A guarded scalar function and its derivative.

    Both callables receive an array and must return NaN (never raise) where
    the input lies outside the operator's domain.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]


def _where(ok, value):
    return np.where(ok, value, np.nan)


def _tan(u):
    c = np.cos(u)
    return _where(np.abs(c) > TAN_GUARD, np.sin(u) / c)


def _dtan(u):
    c = np.cos(u)
    return _where(np.abs(c) > TAN_GUARD, 1.0 / (c * c))


def _log(u):
    ok = u > GUARD
    return _where(ok, np.log(np.where(ok, u, 1.0)))


def _dlog(u):
    ok = u > GUARD
    return _where(ok, 1.0 / np.where(ok, u, 1.0))


def _sqrt(u):
    ok = u >= 0
    return _where(ok, np.sqrt(np.where(ok, u, 0.0)))


def _dsqrt(u):
    ok = u >= 0
    return _where(ok, 0.5 / np.sqrt(np.where(ok, u, 0.0)))


def _inv(u):
    ok = np.abs(u) > GUARD
    return _where(ok, 1.0 / np.where(ok, u, 1.0))


def _dinv(u):
    ok = np.abs(u) > GUARD
    safe = np.where(ok, u, 1.0)
    return _where(ok, -1.0 / (safe * safe))


UNARY_OPS: dict[str, UnaryOp] = {}


def register_unary(name: str, fn, deriv) -> UnaryOp:
    """Add a unary operator to the global registry (idempotent per name)."""
    op = UnaryOp(name, fn, deriv)
    UNARY_OPS[name] = op
    return op


register_unary("Id", lambda u: u, np.ones_like)
register_unary("sin", np.sin, np.cos)
register_unary("cos", np.cos, lambda u: -np.sin(u))
register_unary("tan", _tan, _dtan)
register_unary("exp", np.exp, np.exp)
register_unary("log", _log, _dlog)
register_unary("sqrt", _sqrt, _dsqrt)
register_unary("square", np.square, lambda u: 2.0 * u)
# not part of the default search set; used by built-in ground truths
register_unary("inv", _inv, _dinv)

DEFAULT_UNARY = ("Id", "sin", "cos", "tan", "exp", "log", "sqrt", "square")
BINARY = ("add", "mul", "div")
TRIG = frozenset({"sin", "cos", "tan"})

VARIABLE_ROLES = ("variable", "function-value", "first-derivative", "second-derivative")


@dataclass(frozen=True)
class VariableRef:
    index: int
    role: str = "variable"

    def __post_init__(self):
        if self.role not in VARIABLE_ROLES:
            raise ValueError(f"unknown variable role {self.role!r}")


# ---------------------------------------------------------------------------
# nodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    op: str
    gamma: tuple[float, ...]
    vars: tuple[int, ...]


@dataclass(frozen=True)
class Unary:
    op: str
    alpha: float = 1.0
    beta: float = 0.0
    connector: str | None = None
    children: tuple["Node", ...] = ()


Node = Union[Leaf, Unary]


def leaf(op: str, gamma: Sequence[float], vars: Sequence[int] | None = None) -> Leaf:
    gamma = tuple(float(g) for g in gamma)
    if vars is None:
        vars = range(len(gamma))
    return Leaf(op, gamma, tuple(int(v) for v in vars))


def unary(op: str, child: Node | None = None, alpha=1.0, beta=0.0, *,
          connector: str | None = None, children: Sequence[Node] = ()) -> Unary:
    """Convenience constructor: ``unary("exp", child)`` or ``unary("Id", connector="add", children=[...])``."""
    if child is not None:
        if connector is not None or children:
            raise StructureError("pass either a single child or connector+children")
        return Unary(op, float(alpha), float(beta), None, (child,))
    return Unary(op, float(alpha), float(beta), connector, tuple(children))


def _check(node: Node, *, is_root: bool, path: str) -> None:
    if isinstance(node, Leaf):
        if node.op not in UNARY_OPS:
            raise StructureError(f"unknown unary operator {node.op!r} at {path}")
        if len(node.gamma) != len(node.vars):
            raise StructureError(f"gamma/vars length mismatch at {path}")
        if any(v < 0 for v in node.vars):
            raise StructureError(f"negative variable index at {path}")
        return
    if node.op not in UNARY_OPS:
        raise StructureError(f"unknown unary operator {node.op!r} at {path}")
    if node.connector is None:
        if len(node.children) != 1:
            raise ArityError(f"unary node without connector needs exactly one child at {path}")
        child = node.children[0]
        if not is_root and isinstance(child, Unary):
            # node and child sit in the same multi-operator sequence
            if node.op == "Id" or child.op == "Id":
                raise StructureError(f"Id inside a multi-operator sequence at {path}")
        _check(child, is_root=False, path=f"{path}.children[0]")
        return
    if node.connector not in BINARY:
        raise StructureError(f"unknown binary operator {node.connector!r} at {path}")
    if node.connector == "div" and len(node.children) != 2:
        raise ArityError(f"div takes exactly 2 children, got {len(node.children)} at {path}")
    if len(node.children) < 2:
        raise ArityError(f"{node.connector} needs at least 2 children at {path}")
    for k, child in enumerate(node.children):
        _check(child, is_root=False, path=f"{path}.children[{k}]")


@dataclass(frozen=True)
class ExpressionTree:
    """Immutable multi-branch expression tree rooted at a unary node."""

    root: Unary
    _leaves: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.root, Unary):
            raise StructureError("the root must be a unary node")
        _check(self.root, is_root=True, path="$")
        paths: list[tuple[Node, ...]] = []
        _collect_paths(self.root, (), paths)
        object.__setattr__(self, "_leaves", tuple(paths))

    # structure -----------------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return len(self._leaves)

    def leaves(self) -> list[Leaf]:
        return [p[-1] for p in self._leaves]

    def subsequence(self, leaf_id: int) -> list[str]:
        """Ordered symbols from the root operator down to leaf ``leaf_id`` (preorder index)."""
        if not 0 <= leaf_id < len(self._leaves):
            raise LookupError(f"no leaf {leaf_id}; tree has {len(self._leaves)} leaves")
        return _path_symbols(self._leaves[leaf_id])

    def subsequences(self) -> list[list[str]]:
        return [_path_symbols(p) for p in self._leaves]

    @property
    def width(self) -> int:
        return len(self.root.children) if self.root.connector else 1

    @property
    def depth(self) -> int:
        return max(len(s) for s in self.subsequences())

    def variables(self) -> set[int]:
        return {v for lf in self.leaves() for v in lf.vars}

    def n_nodes(self) -> int:
        return sum(1 for _ in iter_nodes(self.root))

    def check_bounds(self, max_depth: int, max_width: int) -> None:
        if self.depth > max_depth:
            raise StructureError(f"depth {self.depth} exceeds max_depth {max_depth}")
        for node in iter_nodes(self.root):
            if isinstance(node, Unary) and node.connector and len(node.children) > max_width:
                raise StructureError(
                    f"{len(node.children)} branches exceed max_width {max_width}")

    # parameters ----------------------------------------------------------

    def theta(self) -> np.ndarray:
        """Flat parameter vector: (alpha, beta) per unary node, gamma per leaf, preorder."""
        out: list[float] = []
        for node in iter_nodes(self.root):
            if isinstance(node, Unary):
                out.extend((node.alpha, node.beta))
            else:
                out.extend(node.gamma)
        return np.array(out, dtype=float)

    def param_layout(self) -> list[tuple[str, str, int]]:
        """(node path, field, index) for each entry of :meth:`theta`."""
        layout = []
        for path, node in iter_nodes_with_path(self.root):
            if isinstance(node, Unary):
                layout += [(path, "alpha", 0), (path, "beta", 0)]
            else:
                layout += [(path, "gamma", i) for i in range(len(node.gamma))]
        return layout

    def with_theta(self, theta: Sequence[float]) -> "ExpressionTree":
        it = iter(np.asarray(theta, dtype=float).tolist())
        root = _rebuild(self.root, it)
        if next(it, None) is not None:
            raise ValueError("theta is longer than the tree's parameter count")
        return ExpressionTree(root)

    @property
    def n_params(self) -> int:
        return sum(2 if isinstance(n, Unary) else len(n.gamma) for n in iter_nodes(self.root))

    # evaluation ----------------------------------------------------------

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        return evaluate(self, X)

    def __str__(self) -> str:
        return to_infix(self)


def iter_nodes(node: Node) -> Iterator[Node]:
    yield node
    if isinstance(node, Unary):
        for c in node.children:
            yield from iter_nodes(c)


def iter_nodes_with_path(node: Node, path: str = "$") -> Iterator[tuple[str, Node]]:
    yield path, node
    if isinstance(node, Unary):
        for k, c in enumerate(node.children):
            yield from iter_nodes_with_path(c, f"{path}.children[{k}]")


def _collect_paths(node: Node, prefix: tuple, out: list) -> None:
    prefix = prefix + (node,)
    if isinstance(node, Leaf):
        out.append(prefix)
        return
    for c in node.children:
        _collect_paths(c, prefix, out)


def _path_symbols(path: tuple[Node, ...]) -> list[str]:
    syms: list[str] = []
    for node in path:
        syms.append(node.op)
        if isinstance(node, Unary) and node.connector:
            syms.append(node.connector)
    return syms


def _rebuild(node: Node, it) -> Node:
    if isinstance(node, Leaf):
        return Leaf(node.op, tuple(next(it) for _ in node.gamma), node.vars)
    alpha, beta = next(it), next(it)
    kids = tuple(_rebuild(c, it) for c in node.children)
    return Unary(node.op, alpha, beta, node.connector, kids)


def width(tree: ExpressionTree) -> int:
    return tree.width


def depth(tree: ExpressionTree) -> int:
    return tree.depth


def subsequence(tree: ExpressionTree, leaf_id: int) -> list[str]:
    return tree.subsequence(leaf_id)


# ---------------------------------------------------------------------------
# compiled evaluation with reverse-mode parameter gradients
# ---------------------------------------------------------------------------


class Program:
    """Postorder instruction list for a fixed skeleton.

    Leaf features ``op(X[:, vars])`` do not depend on the parameters, so they
    are computed once by :meth:`features` and reused across optimizer steps.
    """

    def __init__(self, tree: ExpressionTree):
        self.tree = tree
        self.n_params = tree.n_params
        self._instrs: list[tuple] = []
        self._leaves: list[Leaf] = []
        offset = [0]

        def visit(node: Node) -> int:
            slot_offset = offset[0]
            if isinstance(node, Leaf):
                offset[0] += len(node.gamma)
                self._leaves.append(node)
                self._instrs.append(("leaf", len(self._leaves) - 1, slot_offset, len(node.gamma)))
                return len(self._instrs) - 1
            offset[0] += 2
            kids = tuple(visit(c) for c in node.children)
            self._instrs.append(("unary", UNARY_OPS[node.op], slot_offset, node.connector, kids))
            return len(self._instrs) - 1

        visit(tree.root)

    def features(self, X: np.ndarray) -> list[np.ndarray]:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        feats = []
        with np.errstate(all="ignore"):
            for lf in self._leaves:
                if lf.vars and max(lf.vars) >= X.shape[1]:
                    raise StructureError(
                        f"variable index {max(lf.vars)} out of range for {X.shape[1]} columns")
                feats.append(UNARY_OPS[lf.op].fn(X[:, list(lf.vars)]))
        return feats

    def forward(self, theta: np.ndarray, feats: list[np.ndarray]):
        n = feats[0].shape[0] if feats else 0
        vals: list = [None] * len(self._instrs)
        inner: list = [None] * len(self._instrs)
        with np.errstate(all="ignore"):
            for i, ins in enumerate(self._instrs):
                if ins[0] == "leaf":
                    _, k, off, m = ins
                    vals[i] = feats[k] @ theta[off:off + m] if m else np.zeros(n)
                    continue
                _, op, off, conn, kids = ins
                if conn is None:
                    u = vals[kids[0]]
                elif conn == "add":
                    u = vals[kids[0]]
                    for c in kids[1:]:
                        u = u + vals[c]
                elif conn == "mul":
                    u = vals[kids[0]]
                    for c in kids[1:]:
                        u = u * vals[c]
                else:
                    den = vals[kids[1]]
                    ok = np.abs(den) > GUARD
                    u = np.where(ok, vals[kids[0]] / np.where(ok, den, 1.0), np.nan)
                inner[i] = (u, op.fn(u))
                vals[i] = theta[off] * inner[i][1] + theta[off + 1]
        return vals[-1], (vals, inner)

    def backward(self, theta: np.ndarray, feats, cache, dout: np.ndarray) -> np.ndarray:
        vals, inner = cache
        grad = np.zeros(self.n_params)
        adj: list = [None] * len(self._instrs)
        adj[-1] = dout
        with np.errstate(all="ignore"):
            for i in range(len(self._instrs) - 1, -1, -1):
                g = adj[i]
                if g is None:
                    continue
                ins = self._instrs[i]
                if ins[0] == "leaf":
                    _, k, off, m = ins
                    if m:
                        grad[off:off + m] += g @ feats[k]
                    continue
                _, op, off, conn, kids = ins
                u, fu = inner[i]
                grad[off] += g @ fu
                grad[off + 1] += g.sum()
                du = g * theta[off] * op.deriv(u)
                if conn is None or conn == "add":
                    for c in kids:
                        _accumulate(adj, c, du)
                elif conn == "mul":
                    kv = [vals[c] for c in kids]
                    prefix = [np.ones_like(du)]
                    for v in kv[:-1]:
                        prefix.append(prefix[-1] * v)
                    suffix = np.ones_like(du)
                    for j in range(len(kids) - 1, -1, -1):
                        _accumulate(adj, kids[j], du * prefix[j] * suffix)
                        suffix = suffix * kv[j]
                else:
                    a, b = vals[kids[0]], vals[kids[1]]
                    _accumulate(adj, kids[0], du / b)
                    _accumulate(adj, kids[1], -du * a / (b * b))
        return grad


def _accumulate(adj: list, i: int, g: np.ndarray) -> None:
    adj[i] = g if adj[i] is None else adj[i] + g


def evaluate(tree: ExpressionTree, X: np.ndarray) -> np.ndarray:
    """Evaluate ``tree`` on the rows of ``X``.

    Rows that leave an operator's domain come back as NaN (or inf on
    overflow); nothing here raises on numeric trouble.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    prog = Program(tree)
    out, _ = prog.forward(tree.theta(), prog.features(X))
    return np.broadcast_to(out, (X.shape[0],)).astype(float)


# ---------------------------------------------------------------------------
# canonical text
# ---------------------------------------------------------------------------


def to_dict(node: Node, *, constants: bool = True) -> dict:
    if isinstance(node, Leaf):
        d: dict = {"leaf": node.op}
        if constants:
            d["gamma"] = list(node.gamma)
        d["vars"] = list(node.vars)
        return d
    d = {"op": node.op}
    if constants:
        d["alpha"] = node.alpha
        d["beta"] = node.beta
    d["connector"] = node.connector
    d["children"] = [to_dict(c, constants=constants) for c in node.children]
    return d


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=True)


def canonicalize(tree: ExpressionTree) -> ExpressionTree:
    """Sort the branches under every add/mul connector by their canonical text."""
    return ExpressionTree(_canon(tree.root, constants=True))


def _canon(node: Node, constants: bool) -> Node:
    if isinstance(node, Leaf):
        return node
    kids = [_canon(c, constants) for c in node.children]
    if node.connector in ("add", "mul"):
        kids.sort(key=lambda c: _dumps(to_dict(c, constants=constants)))
    return Unary(node.op, node.alpha, node.beta, node.connector, tuple(kids))


def serialize(tree: ExpressionTree) -> str:
    return _dumps(to_dict(canonicalize(tree).root))


def skeleton_key(tree: ExpressionTree) -> str:
    """Canonical text of the discrete structure, constants dropped."""
    return _dumps(to_dict(_canon(tree.root, constants=False), constants=False))


def structurally_equal(a: ExpressionTree, b: ExpressionTree) -> bool:
    return serialize(a) == serialize(b)


def from_dict(obj, path: str = "$") -> Node:
    if not isinstance(obj, dict):
        raise ParseError("expected an object", path)
    if "leaf" in obj:
        try:
            gamma = tuple(float(g) for g in obj["gamma"])
            vars_ = tuple(int(v) for v in obj["vars"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad leaf fields: {exc}", path) from None
        if not isinstance(obj["leaf"], str):
            raise ParseError("leaf operator must be a string", path)
        return Leaf(obj["leaf"], gamma, vars_)
    if "op" not in obj:
        raise ParseError("node needs an 'op' or 'leaf' key", path)
    children = obj.get("children", [])
    if not isinstance(children, list):
        raise ParseError("'children' must be a list", path)
    try:
        alpha = float(obj.get("alpha", 1.0))
        beta = float(obj.get("beta", 0.0))
    except (TypeError, ValueError):
        raise ParseError("alpha/beta must be numbers", path) from None
    kids = tuple(from_dict(c, f"{path}.children[{k}]") for k, c in enumerate(children))
    return Unary(obj["op"], alpha, beta, obj.get("connector"), kids)


def parse(text: str) -> ExpressionTree:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos) from None
    root = from_dict(obj)
    if not isinstance(root, Unary):
        raise ParseError("the root must be a unary node", "$")
    return ExpressionTree(root)


def load_jsonl(path) -> list[ExpressionTree]:
    with open(path) as fh:
        return [parse(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# infix printing
# ---------------------------------------------------------------------------

_CONNECTOR_TEXT = {"add": " + ", "mul": " * ", "div": " / "}


def _num(x: float) -> str:
    return f"{x:.6g}"


def to_infix(tree: ExpressionTree, names: Sequence[str] | None = None) -> str:
    def var(i: int) -> str:
        return names[i] if names is not None else f"x{i}"

    def apply(op: str, inner: str) -> str:
        if op == "Id":
            return f"({inner})"
        if op == "square":
            return f"({inner})^2"
        return f"{op}({inner})"

    def render(node: Node) -> str:
        if isinstance(node, Leaf):
            terms = [f"{_num(g)}*{apply(node.op, var(v)) if node.op != 'Id' else var(v)}"
                     for g, v in zip(node.gamma, node.vars)]
            return " + ".join(terms) if terms else "0"
        if node.connector:
            inner = _CONNECTOR_TEXT[node.connector].join(f"({render(c)})" for c in node.children)
        else:
            inner = render(node.children[0])
        s = apply(node.op, inner)
        if node.alpha != 1.0:
            s = f"{_num(node.alpha)}*{s}"
        if node.beta != 0.0:
            s = f"{s} + {_num(node.beta)}"
        return s

    return render(tree.root)
