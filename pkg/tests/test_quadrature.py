import math

import numpy as np
import pytest

from branching_clt.quadrature import (QuadratureError, gauss_legendre01, hermite_rule, integrate01,
                                      integrate_log)


def test_gauss_legendre_polynomials_exact():
    x, w = gauss_legendre01(8)
    for k in range(16):
        assert np.dot(w, x ** k) == pytest.approx(1 / (k + 1), rel=1e-14)


def test_peaked_integrand():
    c = 1e-6
    assert integrate01(lambda x: 1 / (c + x)) == pytest.approx(math.log((1 + c) / c), rel=1e-11)


def test_non_convergence_strict_and_lenient():
    g = lambda x: np.sin(1e7 * x)
    with pytest.raises(QuadratureError):
        integrate01(g, nmax=64)
    assert math.isfinite(integrate01(g, nmax=64, strict=False))


def test_log_substitution():
    assert integrate_log(lambda x: 1 / x, eps=1e-8) == pytest.approx(-math.log(1e-8), rel=1e-10)


def test_hermite_moments():
    z, w = hermite_rule(64)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.dot(w, z ** 2) == pytest.approx(1.0, rel=1e-13)
    assert np.dot(w, z ** 4) == pytest.approx(3.0, rel=1e-13)
    assert np.dot(w, np.cos(z)) == pytest.approx(math.exp(-0.5), rel=1e-13)
