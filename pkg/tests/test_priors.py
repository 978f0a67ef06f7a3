import json

import pytest

from oracles import L, N, conditional, hand_corpus
from symprior.expr import DEFAULT_UNARY, ExpressionTree, from_dict, leaf, unary
from symprior.priors import (
    ROOT_KEY, Adjacent, IngestionError, PriorModel, build_hc1, estimate_conditional, floor_distribution,
    legal_tokens, load_corpus, normalized_count, sibling_context, split_key, structural_distributions,
    violates,
)


def trees(dicts):
    return [ExpressionTree(from_dict(d)) for d in dicts]


def test_hand_corpus_depths():
    assert all(t.depth <= 4 for t in trees(hand_corpus()))


def test_conditionals_match_bruteforce():
    corpus = hand_corpus()
    model = estimate_conditional(trees(corpus))
    ref = conditional(corpus)
    tables = {**model.vertical, **model.horizontal}
    observed = {k for k in tables if not k.startswith("*")}
    assert observed == set(ref)
    for key, dist in ref.items():
        assert set(tables[key]) == set(dist)
        for t, p in dist.items():
            assert abs(tables[key][t] - float(p)) <= 1e-12, (key, t)


def test_every_table_is_normalized():
    model = estimate_conditional(trees(hand_corpus()))
    for dist in list(model.vertical.values()) + list(model.horizontal.values()):
        assert abs(sum(dist.values()) - 1.0) <= 1e-9


def test_cos_sum_normalized_count():
    t = ExpressionTree(unary("Id", connector="add", children=[leaf("cos", [1.0], [i]) for i in range(3)]))
    assert normalized_count([t], "cos") == 1.0


def test_absent_symbol_zero():
    assert normalized_count(trees([N("Id", None, L("cos"))]), "sin") == 0.0


def test_corpus_mean_of_expressions():
    corpus = trees([N("Id", None, L("cos")), N("Id", "add", L("cos", 0), L("sin", 1))])
    assert normalized_count(corpus, "cos") == 0.75


@pytest.mark.parametrize("as_leaf", [True, False])
def test_variable_count_insensitivity(as_leaf):
    values = []
    for n in (2, 5, 10):
        if as_leaf:
            d = N("Id", None, {"leaf": "cos", "gamma": [1.0] * n, "vars": list(range(n))})
        else:
            d = N("Id", "add", *[L("cos", i) for i in range(n)])
        values.append(normalized_count(trees([d]), "cos"))
    assert values[0] == values[1] == values[2]


def test_zero_variable_record_rejected(tmp_path):
    bad = ExpressionTree(unary("Id", leaf("sin", [], [])))
    with pytest.raises(IngestionError):
        normalized_count([bad], "sin")
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(N("Id", None, {"leaf": "sin", "gamma": [], "vars": []})) + "\n"
                 + json.dumps(N("Id", None, L("cos"))) + "\n")
    assert len(load_corpus(p)) == 1


def test_sibling_conditional_example():
    corpus = trees([N("Id", "add", L("sin", 0), L("cos", 1)), N("Id", "add", L("sin", 0), L("sin", 1))])
    model = estimate_conditional(corpus)
    assert model.empirical["add|sin|1"]["cos"] == 0.5
    assert model.empirical["add|sin|1"]["sin"] == 0.5


def test_single_symbol_context_floor():
    eps = 1e-3
    model = estimate_conditional(trees([N("sin", None, L("Id"))]), epsilon=eps)
    dist = model.vertical[ROOT_KEY]
    assert dist["sin"] == pytest.approx(1 - (len(dist) - 1) * eps, abs=1e-15)
    assert all(dist[u] == eps for u in dist if u != "sin")
    assert ("ROOT||0", "cos") in model.hc2


def test_floor_distribution_exact():
    dist, floored = floor_distribution({"a": 0.25, "b": 0.75}, ["a", "b", "c", "d"], 0.01)
    assert dist == {"a": 0.98 * 0.25, "b": 0.98 * 0.75, "c": 0.01, "d": 0.01}
    assert floored == ["c", "d"]


def test_hc1_combinations_are_zero():
    corpus = trees([N("exp", None, L("exp")), N("log", None, N("log", None, L("Id"))), N("Id", None, L("sin"))])
    model = estimate_conditional(corpus)
    hc1 = build_hc1()
    for key, dist in model.vertical.items():
        parent, _, _ = split_key(key)
        for t, p in dist.items():
            if p > 0 and parent not in ("ROOT", "*"):
                assert not violates([parent, t], hc1), (key, t)
    assert "exp" not in model.vertical["exp||0"]
    assert model.vertical["exp||0"].get("exp", 0.0) == 0.0


def test_hc1_patterns():
    hc1 = build_hc1()
    assert violates(["cos", "add", "sin", "add", "tan"], hc1)
    assert violates(["exp", "log"], hc1)
    assert not violates(["sin", "exp"], hc1)
    assert not violates(["sin", "add", "cos"], hc1)
    assert violates(["Id", "sin", "Id", "cos"], hc1)
    assert not violates(["Id", "Id", "add", "sin"], hc1)
    assert Adjacent("log", "exp") in hc1


def test_structural_distributions():
    root, leafd, depth, width = structural_distributions(trees([N("tan", None, L("Id"))]))
    assert root == {"tan": 1.0}
    assert abs(sum(depth.values()) - 1.0) < 1e-12


def test_reference_trees_width_histogram(left_tree, right_tree):
    _, _, depth, width = structural_distributions([left_tree, right_tree])
    assert width == {2: 0.5, 3: 0.5}
    assert depth == {7: 0.5, 4: 0.5}


def test_truncation_monotone():
    corpus = trees(hand_corpus())
    model = estimate_conditional(corpus)
    rank = model.rank_map
    common = sorted(rank, key=rank.get)[:3]
    rare = sorted(rank, key=rank.get)[-1]
    assert sibling_context(common + [rare], rank) == sibling_context(common, rank)
    assert len(sibling_context(list(DEFAULT_UNARY), rank)) == 3


def test_tie_break_lexicographic():
    assert sibling_context(["sin", "cos", "exp", "Id"], {}) == ("Id", "cos", "exp")


def test_lookup_pooled_fallback(caplog):
    model = estimate_conditional(trees(hand_corpus()))
    dist = model.lookup("next", "tan", (), 3)
    assert dist == model.vertical["*||3"]


def test_prior_json_round_trip(tmp_path):
    model = estimate_conditional(trees(hand_corpus()))
    p = tmp_path / "priors.json"
    model.save(p)
    obj = json.loads(p.read_text())
    assert set(obj) == {"vertical", "horizontal", "root", "leaf", "depth", "width", "hc1", "hc2",
                        "epsilon", "symbol_registry"}
    back = PriorModel.load(p)
    assert back.vertical == model.vertical and back.horizontal == model.horizontal
    assert back.hc1 == model.hc1 and back.hc2 == model.hc2 and back.rank == model.rank
    assert back.dumps() == model.dumps()


def test_legal_tokens_rules():
    assert "END" not in legal_tokens("next", "sin", 0, 0, DEFAULT_UNARY, build_hc1())
    assert "exp" not in legal_tokens("next", "exp", 0, 2, DEFAULT_UNARY, build_hc1())
    assert legal_tokens("sib", "div", 2, 1, DEFAULT_UNARY, build_hc1()) == ["CLOSE"]
    assert "CLOSE" not in legal_tokens("sib", "add", 1, 1, DEFAULT_UNARY, build_hc1())
    nxt = legal_tokens("next", "Id", 0, 2, DEFAULT_UNARY, build_hc1())
    assert not set(nxt) & set(DEFAULT_UNARY)
