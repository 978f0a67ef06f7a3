import numpy as np
import pytest

from symprior.expr import ExpressionTree, leaf, unary


def deep_example() -> ExpressionTree:
    # tan( exp((.)^2(Id)) + exp( (.)^2(Id) + exp((.)^2(Id)) ) )
    a = unary("exp", unary("square", leaf("Id", [1.0])))
    inner = unary("exp", connector="add", children=[
        unary("square", leaf("Id", [1.0])),
        unary("exp", unary("square", leaf("Id", [1.0]))),
    ])
    return ExpressionTree(unary("tan", connector="add", children=[a, inner]))


def wide_example() -> ExpressionTree:
    kids = [unary("square", leaf("Id", [1.0], [i])) for i in range(3)]
    return ExpressionTree(unary("sqrt", connector="add", children=kids))


@pytest.fixture
def left_tree():
    return deep_example()


@pytest.fixture
def right_tree():
    return wide_example()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
