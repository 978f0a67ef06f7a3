import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symprior.expr import (
    BINARY, DEFAULT_UNARY, ArityError, ExpressionTree, Leaf, ParseError, Program, StructureError,
    Unary, canonicalize, depth, evaluate, leaf, parse, serialize, skeleton_key, structurally_equal,
    subsequence, to_dict, to_infix, unary, width,
)


def test_leaf_square_weighted_sum():
    t = ExpressionTree(unary("Id", leaf("square", [2.0, 3.0])))
    assert evaluate(t, np.array([[1.0, 2.0]]))[0] == pytest.approx(14.0)


def test_affine_exp_at_zero():
    t = ExpressionTree(unary("exp", leaf("Id", [1.0]), alpha=2.0, beta=1.0))
    assert evaluate(t, np.array([[0.0]]))[0] == pytest.approx(3.0)


def test_id_is_identity(rng):
    x = rng.normal(size=(20, 1))
    t = ExpressionTree(unary("Id", leaf("Id", [1.0])))
    np.testing.assert_array_equal(evaluate(t, x), x[:, 0])


def test_reference_trees_subsequences(left_tree, right_tree):
    assert left_tree.subsequence(0) == ["tan", "add", "exp", "square", "Id"]
    assert left_tree.subsequences() == [
        ["tan", "add", "exp", "square", "Id"],
        ["tan", "add", "exp", "add", "square", "Id"],
        ["tan", "add", "exp", "add", "exp", "square", "Id"],
    ]
    for k in range(3):
        assert subsequence(right_tree, k) == ["sqrt", "add", "square", "Id"]


def test_single_leaf_subsequence():
    t = ExpressionTree(unary("Id", leaf("sin", [1.0])))
    assert t.subsequence(0) == ["Id", "sin"]
    assert (width(t), depth(t)) == (1, 2)


def test_unknown_leaf_is_lookup_error(right_tree):
    with pytest.raises(LookupError):
        right_tree.subsequence(3)


def test_reference_trees_width_depth(left_tree, right_tree):
    assert (left_tree.width, left_tree.depth) == (2, 7)
    assert (right_tree.width, right_tree.depth) == (3, 4)


def test_round_trip_reference_trees(right_tree, left_tree):
    for t in (left_tree, right_tree):
        assert structurally_equal(parse(serialize(t)), t)


def test_id_inside_sequence_rejected():
    text = json.dumps({"op": "Id", "alpha": 1, "beta": 0, "connector": None, "children": [
        {"op": "sin", "alpha": 1, "beta": 0, "connector": None, "children": [
            {"op": "Id", "alpha": 1, "beta": 0, "connector": None, "children": [
                {"leaf": "cos", "gamma": [1.0], "vars": [0]}]}]}]})
    with pytest.raises(StructureError):
        parse(text)


def test_div_arity():
    kids = [leaf("Id", [1.0])] * 3
    with pytest.raises(ArityError):
        ExpressionTree(unary("Id", connector="div", children=kids))


def test_malformed_text_has_position():
    with pytest.raises(ParseError) as err:
        parse('{"op": "Id", "children": [')
    assert err.value.position is not None


def test_permuted_add_children_same_text():
    kids = [leaf("sin", [1.0]), leaf("cos", [2.0]), unary("exp", leaf("Id", [0.5]))]
    texts = {serialize(ExpressionTree(unary("Id", connector="add", children=p)))
             for p in itertools.permutations(kids)}
    assert len(texts) == 1


def test_div_children_order_kept():
    a, b = leaf("sin", [1.0]), leaf("cos", [1.0])
    t1 = ExpressionTree(unary("Id", connector="div", children=[a, b]))
    t2 = ExpressionTree(unary("Id", connector="div", children=[b, a]))
    assert serialize(t1) != serialize(t2)


def test_guarded_domains_flag_rows():
    x = np.array([[-1.0], [0.0], [2.0]])
    for op in ("log", "sqrt"):
        out = evaluate(ExpressionTree(unary("Id", leaf(op, [1.0]))), x)
        assert np.isnan(out[0]) and np.isfinite(out[2])
    t = ExpressionTree(unary("Id", connector="div", children=[leaf("Id", [1.0]), leaf("Id", [0.0])]))
    assert np.isnan(evaluate(t, x)).all()


def test_unresolved_variable():
    t = ExpressionTree(unary("Id", leaf("Id", [1.0], [3])))
    with pytest.raises(StructureError):
        evaluate(t, np.ones((2, 2)))


def test_gamma_linearity(rng):
    t = ExpressionTree(unary("Id", connector="add", children=[leaf("sin", [0.3, -1.2]), leaf("exp", [0.7, 0.1])]))
    x = rng.normal(size=(10, 2))
    theta = t.theta()
    doubled = theta.copy()
    doubled[2:] *= 2
    np.testing.assert_allclose(evaluate(t.with_theta(doubled), x), 2 * evaluate(t, x), rtol=1e-12)


def test_infix_six_digits():
    t = ExpressionTree(unary("exp", leaf("Id", [1.0 / 3.0]), alpha=2.0))
    assert to_infix(t) == "2*exp(0.333333*x0)"


def test_skeleton_key_ignores_constants():
    a = ExpressionTree(unary("sin", leaf("Id", [1.0]), alpha=2.0))
    b = ExpressionTree(unary("sin", leaf("Id", [-4.0]), beta=1.0))
    assert skeleton_key(a) == skeleton_key(b)
    assert serialize(a) != serialize(b)


# --- brute-force depth/width oracle ---------------------------------------------


def _paths(obj, prefix):
    """Enumerate root-to-leaf symbol lists on the plain JSON form."""
    if "leaf" in obj:
        yield prefix + [obj["leaf"]]
        return
    here = prefix + [obj["op"]]
    if obj["connector"]:
        here = here + [obj["connector"]]
    for c in obj["children"]:
        yield from _paths(c, here)


def _small_trees(max_depth=4, max_width=3):
    """Every tree over a two-symbol alphabet within the bounds (all constants 1)."""
    ops = ("sin", "exp")

    def nodes(budget, top):
        # budget = symbols left on the path, including this node's own op
        if budget >= 1:
            for op in ops:
                yield leaf(op, [1.0])
        if budget >= 2 and not top:
            for op in ops:
                for child in nodes(budget - 1, False):
                    if isinstance(child, Unary) and child.connector is None:
                        continue  # keep the enumeration finite and small
                    yield unary(op, child)
        if budget >= 3:
            kids = list(nodes(budget - 2, False))
            for k in range(2, max_width + 1):
                for combo in itertools.combinations_with_replacement(range(len(kids)), k):
                    if len(combo) > 2 and len(kids) > 6:
                        continue
                    for op in ops:
                        yield unary(op, connector="add", children=[kids[i] for i in combo])

    for root_op in ops:
        for child in nodes(max_depth - 1, False):
            yield ExpressionTree(unary(root_op, child))
        for node in nodes(max_depth, True):
            if isinstance(node, Unary) and node.connector:
                yield ExpressionTree(node)


def test_depth_width_match_enumerator():
    n = 0
    for t in _small_trees():
        obj = to_dict(t.root)
        paths = list(_paths(obj, []))
        assert t.depth == max(len(p) for p in paths)
        assert t.subsequences() == paths
        assert t.width == (len(obj["children"]) if obj["connector"] else 1)
        n += 1
    assert n > 100


# --- random trees for the round-trip property ---------------------------------------


@st.composite
def trees(draw, max_depth=6):
    unary_ops = st.sampled_from([u for u in DEFAULT_UNARY if u != "Id"])
    const = st.floats(-5, 5, allow_nan=False, allow_infinity=False)

    def branch(level, in_chain):
        if level >= max_depth - 1 or draw(st.booleans()):
            n = draw(st.integers(1, 2))
            return leaf(draw(st.sampled_from(DEFAULT_UNARY)), [draw(const) for _ in range(n)],
                        draw(st.lists(st.integers(0, 2), min_size=n, max_size=n)))
        op = draw(unary_ops)
        if level < max_depth - 2 and draw(st.booleans()):
            conn = draw(st.sampled_from(BINARY))
            k = 2 if conn == "div" else draw(st.integers(2, 3))
            kids = [branch(level + 2, False) for _ in range(k)]
            return unary(op, alpha=draw(const), beta=draw(const), connector=conn, children=kids)
        return unary(op, branch(level + 1, True), alpha=draw(const), beta=draw(const))

    root_op = draw(st.sampled_from(DEFAULT_UNARY))
    conn = draw(st.sampled_from((None,) + BINARY))
    if conn is None:
        return ExpressionTree(unary(root_op, branch(1, False)))
    k = 2 if conn == "div" else draw(st.integers(2, 3))
    return ExpressionTree(unary(root_op, connector=conn, children=[branch(2, False) for _ in range(k)]))


@settings(max_examples=1000, deadline=None)
@given(trees())
def test_round_trip_random(t):
    back = parse(serialize(t))
    assert structurally_equal(back, t)
    assert serialize(back) == serialize(t)
    assert serialize(canonicalize(back)) == serialize(t)


@settings(max_examples=200, deadline=None)
@given(trees(), st.integers(0, 2**31 - 1))
def test_evaluation_never_raises(t, seed):
    x = np.random.default_rng(seed).normal(scale=3, size=(16, 3))
    out = evaluate(t, x)
    assert out.shape == (16,)


def test_program_matches_evaluate(left_tree, rng):
    x = rng.uniform(0.1, 1.0, size=(8, 1))
    prog = Program(left_tree)
    out, _ = prog.forward(left_tree.theta(), prog.features(x))
    np.testing.assert_allclose(out, evaluate(left_tree, x))
