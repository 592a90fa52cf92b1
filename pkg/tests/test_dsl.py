import math
import pickle

import numpy as np
import pytest

from branching_clt.dsl import DSLError, Expr, parse


def test_arithmetic_and_powers():
    x = np.array([0.0, 0.5, 2.0])
    np.testing.assert_allclose(Expr("2*x^2 + 1")(x), 2 * x ** 2 + 1)
    np.testing.assert_allclose(Expr("x**3 - x/2")(x), x ** 3 - x / 2)
    np.testing.assert_allclose(Expr("-x + 3")(x), 3 - x)


def test_functions_and_constants():
    x = np.linspace(0.1, 1, 7)
    np.testing.assert_allclose(Expr("exp(-x) + log(x) + sqrt(x) + abs(x - 0.5)")(x),
                               np.exp(-x) + np.log(x) + np.sqrt(x) + np.abs(x - 0.5))
    assert Expr("x - 1/(e - 1)")(0.0) == pytest.approx(-1 / (math.e - 1))
    assert Expr("pi")(1.0) == pytest.approx(math.pi)


def test_min_max_elementwise():
    x = np.array([0.0, 0.4, 0.9])
    np.testing.assert_allclose(Expr("min(x, 0.5, 0.7)")(x), np.minimum(x, 0.5))
    np.testing.assert_allclose(Expr("max(x, 0.5)")(x), np.maximum(x, 0.5))


def test_piecewise():
    e = Expr("piecewise(1, 0.5, 0)")
    np.testing.assert_array_equal(e(np.array([0.0, 0.49, 0.5, 1.0])), [1, 1, 0, 0])
    e3 = Expr("piecewise(0, 0.25, x, 0.75, 2)")
    np.testing.assert_allclose(e3(np.array([0.1, 0.5, 0.8])), [0, 0.5, 2])


def test_constant_broadcasts():
    e = Expr("3")
    assert e.is_constant
    assert e(np.zeros((2, 3))).shape == (2, 3)
    assert not Expr("x + 1").is_constant


@pytest.mark.parametrize("src", [
    "", "y + 1", "__import__('os')", "x.real", "exp(x, 2)", "min(x)", "lambda: 1",
    "piecewise(0, x, 1)", "piecewise(0, 0.5, 1, 0.2, 2)", "piecewise(0, 0.5)", "x +",
    "[x]", "x if x else 1", "sin(x)",
])
def test_rejects_bad_expressions(src):
    with pytest.raises(DSLError):
        parse(src)


def test_equality_hash_and_pickle():
    a, b = Expr("x + 1"), Expr(" x + 1 ")
    assert a == b and hash(a) == hash(b)
    c = pickle.loads(pickle.dumps(a))
    assert c == a and c(2.0) == 3.0
