import json
import math

import numpy as np
import pytest
from scipy import linalg

from branching_clt.dsl import Expr
from branching_clt.models import (HouseOfCardsParams, make_finite_type, make_house_of_cards,
                                  make_yule, mutation_channel)
from branching_clt.quadrature import integrate01
from branching_clt.semigroup import (EigenError, NotSupercriticalError, classify_regime,
                                     limit_variances, martingale_variance, mean_semigroup_apply,
                                     second_moment_ode, solve_eigentriplet, verify_assumption2)

E = math.e


def two_type(r=(0.5, 1.0), swap=0.5):
    mut = mutation_channel([swap, swap], [[0, 1], [1, 0]])
    return make_finite_type(list(r), [[0, 0, 1], [0, 0, 1]], extra_mechanisms=(mut,))


def hoc(src):
    return make_house_of_cards(HouseOfCardsParams(Expr(src)))


def test_yule_triplet():
    tr = solve_eigentriplet(make_yule(1.5))
    assert tr.lam == pytest.approx(1.5, abs=1e-14)
    assert tr.h_values([0])[0] == pytest.approx(1.0)
    assert tr.gamma_weights[0] == pytest.approx(1.0)


def test_two_type_closed_form():
    # A = [[r1 - s, s], [s, r2 - s]]; eigenvalues (tr +- sqrt((r1 - r2)^2 + 4 s^2)) / 2
    r1, r2, s = 1.0, 2.0, 0.1
    tr = solve_eigentriplet(two_type((r1, r2), s))
    disc = math.sqrt((r1 - r2) ** 2 + 4 * s * s)
    lam = (r1 + r2 - 2 * s + disc) / 2
    assert tr.lam == pytest.approx(lam, abs=1e-12)
    assert tr.raw_gap == pytest.approx(disc, abs=1e-12)
    assert tr.rho == pytest.approx(disc)   # gap below lambda is stored as is
    h = tr.h_values([0, 1])
    assert max(h) == pytest.approx(1.0)
    assert tr.gamma_of(tr.h) == pytest.approx(1.0, abs=1e-12)


def test_rho_is_shrunk_when_gap_exceeds_lambda():
    tr = solve_eigentriplet(two_type())
    assert tr.raw_gap > tr.lam
    assert tr.rho == pytest.approx(tr.lam * (1 - 1e-6), rel=1e-15)
    assert classify_regime(tr).kind == "small"


def test_reducible_and_subcritical_rejected():
    with pytest.raises(EigenError):
        solve_eigentriplet(make_finite_type([1.0, 1.0], [[0, 0, 1], [0, 0, 1]]))
    with pytest.raises(NotSupercriticalError):
        solve_eigentriplet(make_finite_type([1.0], [[0.5, 0, 0.5]]))


def test_hoc_eigen_relations():
    tr = solve_eigentriplet(hoc("x"))
    lam = tr.lam
    assert integrate01(lambda x: 1 / (lam + x)) == pytest.approx(1.0, abs=1e-12)
    assert tr.rho == pytest.approx(lam * (1 - 1e-6))
    assert tr.gamma_of(tr.h) == pytest.approx(1.0, abs=1e-10)
    x = np.linspace(0, 1, 5)
    ratio = tr.h_values(x) * (lam + x)
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)


def test_regimes():
    assert classify_regime(solve_eigentriplet(hoc("x"))).kind == "small"
    reg = classify_regime(solve_eigentriplet(hoc("x - 1/(e - 1)")))
    assert reg.kind == "critical" and reg.consistent
    # a deeper dip at 0 with a flat tail is large branching
    reg = classify_regime(solve_eigentriplet(hoc("min(20*x, 1) - 0.95")))
    assert reg.kind == "large" and reg.consistent


def test_triplet_serialization():
    tr = solve_eigentriplet(hoc("x"))
    d = json.loads(tr.to_json(n_nodes=16))
    assert d["lambda"] == tr.lam and len(d["nodes"]) == len(d["h"]) == 16


@pytest.mark.parametrize("model", [two_type(), two_type((1.0, 2.0), 0.1), hoc("x"),
                                   hoc("x - 1/(e - 1)")], ids=["2a", "2b", "hoc", "hoc_crit"])
def test_semigroup_and_eigen_properties(model):
    tr = solve_eigentriplet(model)
    rng = np.random.default_rng(4)
    fs = [lambda x: np.cos(3 * np.asarray(x, float)) + 1.5, lambda x: np.asarray(x, float) ** 2]
    x = None if model.is_finite else np.linspace(0, 1, 7)
    for _ in range(3):
        t, s = rng.uniform(0, 2, 2)
        for f in fs:
            a = mean_semigroup_apply(model, t + s, f, x=x)
            # apply M_s on the full node set, then M_t on the result
            inner = mean_semigroup_apply(model, s, f, x=x if model.is_finite else None)
            if model.is_finite:
                b = mean_semigroup_apply(model, t, inner)
            else:
                from branching_clt.semigroup import _Operator
                op = _Operator(model, x)
                vals = np.concatenate([inner, np.asarray(f(x)) * 0])
                # extra nodes have zero quadrature weight: M_s f at x comes from expm on all nodes
                vals[-x.size:] = mean_semigroup_apply(model, s, f, x=x)
                b = (linalg.expm(op.B * t) @ vals)[op.out_index]
            np.testing.assert_allclose(a, b, rtol=1e-7)
            assert np.all(a >= 0)
    xs = np.arange(model.space.d) if model.is_finite else np.linspace(0, 1, 5)
    mh = mean_semigroup_apply(model, 1.3, tr.h, x=None if model.is_finite else xs)
    np.testing.assert_allclose(mh, math.exp(1.3 * tr.lam) * tr.h_values(xs), rtol=1e-7)


def test_gamma_is_left_eigenvector():
    model = two_type((1.0, 2.0), 0.1)
    tr = solve_eigentriplet(model)
    P = linalg.expm(model.mean_matrix() * 0.7)
    np.testing.assert_allclose(tr.gamma_weights @ P, math.exp(0.7 * tr.lam) * tr.gamma_weights,
                               rtol=1e-10)


def test_second_moment_yule():
    # E Z_t^2 = 2 e^{2t} - e^t for Yule(1)
    m = make_yule(1.0)
    for t in (0.5, 2.0):
        v = second_moment_ode(m, t, lambda x: np.ones_like(np.asarray(x, float)))
        assert v[0] == pytest.approx(2 * math.exp(2 * t) - math.exp(t), rel=1e-9)


def test_martingale_variance_yule():
    psi, _ = martingale_variance(make_yule(1.0), solve_eigentriplet(make_yule(1.0)))
    assert psi[0] == pytest.approx(1.0, abs=1e-8)


def test_limit_variance_is_independent_of_start():
    model = two_type()
    tr = solve_eigentriplet(model)
    f = lambda x: (np.asarray(x) == 0).astype(float)
    a = limit_variances(model, tr, f, 0)
    b = limit_variances(model, tr, f, 1)
    assert a["converged"] and a["sigma2"] == pytest.approx(b["sigma2"], rel=1e-7)


def test_verify_assumption2():
    model = two_type((1.0, 2.0), 0.1)
    tr = solve_eigentriplet(model)
    rep = verify_assumption2(model, tr, np.linspace(1, 8, 8),
                             {"h": tr.h, "f": lambda x: (np.asarray(x) == 0).astype(float)})
    assert rep.passed["h"] and rep.passed["f"]
    assert rep.fitted_rate["f"] == pytest.approx(tr.raw_gap, rel=0.1)
    one = make_yule(1.0)
    r1 = verify_assumption2(one, solve_eigentriplet(one), [1, 2, 3],
                            {"g": lambda x: 2 + 0 * np.asarray(x, float)})
    assert max(r for _, _, _, r in r1.rows) < 1e-10


def test_moment_oracle_growth_rates():
    model = two_type()
    tr = solve_eigentriplet(model)
    f = lambda x: np.asarray(x, float) + 1
    t = np.linspace(2, 8, 7)
    m1 = [mean_semigroup_apply(model, s, f)[0] for s in t]
    m2 = [second_moment_ode(model, s, f)[0] for s in t]
    assert np.polyfit(t, np.log(m1), 1)[0] == pytest.approx(tr.lam, rel=0.05)
    assert np.polyfit(t, np.log(m2), 1)[0] == pytest.approx(2 * tr.lam, rel=0.05)
