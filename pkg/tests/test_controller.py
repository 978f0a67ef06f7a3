import math

import numpy as np
import pytest

from oracles import L, N, controller_fd_errors, forbidden, paths, random_prior
from symprior.controller import Controller, categorical_kl, kl_and_grad, log_prob_and_grad, sample
from symprior.expr import DEFAULT_UNARY, ExpressionTree, from_dict, serialize, to_dict
from symprior.priors import CLOSE, END, PriorModel, estimate_conditional


def small(mode="tree", **kw):
    kw.setdefault("max_depth", 6)
    return Controller(DEFAULT_UNARY, 16, mode=mode, **kw)


@pytest.mark.parametrize("mode", ["tree", "linear"])
def test_probability_integrity(mode):
    rng = np.random.default_rng(0)
    ctl = small(mode)
    ctl.set_flat(ctl.flat() * 20)
    prior = random_prior(rng, max_depth=6)
    for _ in range(50):
        sk = ctl.sample(prior, rng)
        for out in ctl.outputs(sk):
            assert abs(out.y.sum() - 1.0) <= 1e-9
            assert np.all(out.y >= 0)
            assert np.all(out.y[~out.mask] == 0.0)
            assert out.hidden.shape == (16,)


@pytest.mark.parametrize("mode", ["tree", "linear"])
def test_sampled_log_probs_match_forward(mode):
    rng = np.random.default_rng(1)
    ctl = small(mode)
    sk = ctl.sample(PriorModel.uniform(max_depth=6), rng)
    lp, _ = ctl.log_prob_and_grad(sk)
    assert lp == pytest.approx(float(sk.log_probs.sum()), abs=1e-12)


def test_determinism():
    prior = PriorModel.uniform(max_depth=6)
    a = [serialize(small().sample(prior, np.random.default_rng(5)).tree) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_degenerate_support():
    corpus = [ExpressionTree(from_dict(N("Id", "add", L("sin"), L("sin"))))]
    prior = estimate_conditional(corpus, epsilon=0.0)
    ctl = small()
    rng = np.random.default_rng(0)
    texts = {serialize(ctl.sample(prior, rng).tree) for _ in range(100)}
    assert texts == {serialize(corpus[0])}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hc1_patterns_never_sampled(seed):
    rng = np.random.default_rng(seed)
    prior = random_prior(rng)
    ctl = Controller(DEFAULT_UNARY, 16, seed=seed)
    for _ in range(2000):
        d = to_dict(ctl.sample(prior, rng).tree.root)
        assert not any(forbidden(p) for p in paths(d))


@pytest.mark.parametrize("mode", ["tree", "linear"])
def test_structural_caps(mode):
    rng = np.random.default_rng(3)
    prior = random_prior(rng, max_depth=5)
    ctl = Controller(DEFAULT_UNARY, 16, mode=mode, max_depth=5, max_width=3)
    for _ in range(500):
        tree = ctl.sample(prior, rng).tree
        assert tree.depth <= 5 and tree.width <= 3
        tree.check_bounds(5, 3)
        ExpressionTree(from_dict(to_dict(tree.root)))


def test_sibling_conditioning():
    prior = PriorModel.uniform(max_depth=6)
    for c in ("add", "mul", "div"):
        for h in range(7):
            prior.horizontal[f"{c}|sin|{h}"] = {"cos": 1.0}
    ctl = small()
    rng = np.random.default_rng(4)
    seen = 0

    def check(o):
        nonlocal seen
        if "leaf" in o:
            return
        heads = [c.get("op", c.get("leaf")) for c in o["children"]]
        if o["connector"] and heads[0] == "sin":
            seen += 1
            assert heads[1] == "cos"
        for c in o["children"]:
            check(c)

    for _ in range(500):
        check(to_dict(ctl.sample(prior, rng).tree.root))
    assert seen > 10


def test_uniform_single_decision():
    unary = ("Id", "sin", "cos", "exp")
    ctl = Controller(unary, 8)
    ctl.set_flat(np.zeros_like(ctl.flat()))
    sk = ctl.sample(PriorModel.uniform(unary), np.random.default_rng(0))
    first = ctl.outputs(sk)[0]
    assert first.mask.sum() == 4
    assert math.log(first.y[sk.decisions[0].token]) == pytest.approx(math.log(0.25), abs=1e-15)


def test_masked_logit_is_dead():
    rng = np.random.default_rng(2)
    ctl = small()
    sk = ctl.sample(PriorModel.uniform(max_depth=6), rng)
    before, _ = ctl.log_prob_and_grad(sk)
    end = ctl.index[END]
    ctl.params["bo_sib"][end] = 3.0
    ctl.params["Wo_sib"][end] *= 2.0
    mid, _ = ctl.log_prob_and_grad(sk)
    ctl.params["bo_sib"][end] *= 2.0
    after, _ = ctl.log_prob_and_grad(sk)
    assert before == mid == after


def test_kl_closed_form():
    assert categorical_kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    unary = ("Id", "sin")
    ctl = Controller(unary, 8)
    ctl.set_flat(np.zeros_like(ctl.flat()))
    sk = ctl.sample(PriorModel.uniform(unary), np.random.default_rng(0))
    prior = PriorModel.uniform(unary)
    prior.vertical["ROOT||0"] = {"Id": 1.0, "sin": 0.0}
    kl, _ = ctl.kl_and_grad(sk, prior)
    assert kl * len(sk) == pytest.approx(math.log(2), abs=1e-9)


def test_kl_zero_when_policy_equals_prior():
    ctl = small()
    ctl.set_flat(np.zeros_like(ctl.flat()))
    prior = PriorModel.uniform(max_depth=6)
    sk = ctl.sample(prior, np.random.default_rng(0))
    kl, grads = ctl.kl_and_grad(sk, prior)
    assert abs(kl) < 1e-15
    assert max(np.abs(g).max() for g in grads.values()) < 1e-15


def test_combined_gradient_is_linear():
    rng = np.random.default_rng(7)
    ctl = small()
    prior = random_prior(rng, max_depth=6)
    sk = ctl.sample(prior, rng)
    lp, glp = ctl.log_prob_and_grad(sk)
    kl, gkl = ctl.kl_and_grad(sk, prior)
    lp2, kl2, g = ctl.combined_grad(sk, prior, 0.3, -0.7)
    assert (lp2, kl2) == pytest.approx((lp, kl), abs=1e-12)
    for k in g:
        np.testing.assert_allclose(g[k], 0.3 * glp[k] - 0.7 * gkl[k], atol=1e-12)


def test_gradients_match_finite_differences():
    worst = controller_fd_errors(n_instances=20, seed=11)
    assert worst["log_prob"] < 1e-4 and worst["kl"] < 1e-4


def test_checkpoint_round_trip(tmp_path):
    ctl = small("linear", seed=3)
    path = tmp_path / "ckpt.json"
    ctl.save(path)
    back = Controller.load(path)
    assert np.array_equal(back.flat(), ctl.flat())
    assert back.mode == "linear" and back.unary == ctl.unary
    prior = PriorModel.uniform(max_depth=6)
    a = ctl.sample(prior, np.random.default_rng(9))
    b = back.sample(prior, np.random.default_rng(9))
    assert serialize(a.tree) == serialize(b.tree) and np.array_equal(a.log_probs, b.log_probs)


def test_registry_mismatch():
    prior = PriorModel.uniform(max_depth=6)
    sk = small().sample(prior, np.random.default_rng(0))
    with pytest.raises(ValueError):
        small("linear").log_prob_and_grad(sk)
    other = Controller(("Id", "sin"), 8, max_depth=6)
    with pytest.raises(ValueError):
        other.kl_and_grad(sk, PriorModel.uniform(("Id", "sin")))
    with pytest.raises(ValueError):
        other.sample(prior, np.random.default_rng(0))


def test_all_masked_falls_back(monkeypatch, caplog):
    import symprior.controller as mod

    monkeypatch.setattr(mod, "legal_tokens", lambda *a, **k: [])
    ctl = small()
    with caplog.at_level("WARNING", logger="symprior.controller"):
        sk = ctl.sample(PriorModel.uniform(max_depth=6), np.random.default_rng(0))
    assert "every token masked" in caplog.text
    assert sk.symbols[1:] == ["Id", END]
    assert sk.tree.depth == 2


def test_registry_needs_identity():
    with pytest.raises(ValueError):
        Controller(("sin", "cos"), 8)


def test_functional_wrappers():
    ctl = small()
    prior = PriorModel.uniform(max_depth=6)
    sk = sample(ctl, prior, np.random.default_rng(0))
    assert log_prob_and_grad(ctl, sk)[0] == ctl.log_prob_and_grad(sk)[0]
    assert kl_and_grad(ctl, sk, prior)[0] == ctl.kl_and_grad(sk, prior)[0]
    assert CLOSE in ctl.tokens
