import numpy as np
import pytest

from branching_clt.dsl import Expr
from branching_clt.models import (IMMIGRATION, LOCAL, HouseOfCardsParams, ModelError, TraitSpace,
                                  make_finite_type, make_house_of_cards, make_yule,
                                  mutation_channel)


def two_type():
    mut = mutation_channel([0.5, 0.5], [[0, 1], [1, 0]])
    return make_finite_type([0.5, 1.0], [[0, 0, 1], [0, 0, 1]], extra_mechanisms=(mut,))


def test_yule_mean_matrix():
    m = make_yule(2.0)
    np.testing.assert_allclose(m.mean_matrix(), [[2.0]])
    with pytest.raises(ModelError):
        make_yule(0.0)


def test_two_type_mean_matrix():
    A = two_type().mean_matrix()
    # fission adds r_i, swaps move mass at rate 0.5
    np.testing.assert_allclose(A, [[0.5 - 0.5, 0.5], [0.5, 1.0 - 0.5]])


def test_kernel_placement_mean_matrix():
    K = [[0.8, 0.2], [0.1, 0.9]]
    m = make_finite_type([1.0, 2.0], [[0.25, 0, 0.75], [0.5, 0, 0.5]], type_kernel=K)
    r, m1 = np.array([1.0, 2.0]), np.array([1.5, 1.0])
    np.testing.assert_allclose(m.mean_matrix(), (r * m1)[:, None] * np.array(K) - np.diag(r))


def test_offspring_law_must_sum_to_one():
    with pytest.raises(ModelError):
        make_finite_type([1.0], [[0.5, 0.0, 0.4]])


def test_kernel_rows_must_be_stochastic():
    with pytest.raises(ModelError):
        make_finite_type([1.0, 1.0], [[0, 0, 1], [0, 0, 1]], type_kernel=[[0.5, 0.4], [0, 1]])


def test_dimension_mismatch():
    with pytest.raises(ModelError, match="dimension"):
        make_finite_type([1.0, 1.0], [[0, 0, 1]])


def test_trait_space():
    assert TraitSpace.finite(3).contains(2) and not TraitSpace.finite(3).contains(3)
    assert TraitSpace.unit_interval().contains(0.5)
    with pytest.raises(ModelError):
        TraitSpace.finite(0)
    assert TraitSpace.unit_interval().validation_grid().size == 10_000


def test_house_of_cards_structure():
    m = make_house_of_cards(HouseOfCardsParams(Expr("x")))
    assert m.name == "house_of_cards"
    placements = {mech.name: mech.placement for mech in m.mechanisms}
    assert placements == {"branching": LOCAL, "mutation": IMMIGRATION}
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(m.alpha(x), x)


def test_default_realization_reproduces_alpha():
    p = HouseOfCardsParams(Expr("x - 0.3"))
    rate, laws = p.realization()
    x = np.linspace(0, 1, 101)
    probs = np.stack([q(x) for q in laws], axis=-1)
    implied = -rate(x) * (probs @ (np.arange(3) - 1.0))
    np.testing.assert_allclose(implied, x - 0.3, atol=1e-15)
    np.testing.assert_allclose(probs.sum(-1), 1.0)


def test_selection_gap_violation_reports_value():
    with pytest.raises(ModelError, match="selection-gap.*min value"):
        make_house_of_cards(HouseOfCardsParams(Expr("-x")))


def test_integral_condition_violation_reports_value():
    # int_0^1 dx / (4 sqrt(x)) = 0.5, minus 5e-5 from the cut at 1e-8
    with pytest.raises(ModelError, match=r"integral condition.*= 0\.4999"):
        make_house_of_cards(HouseOfCardsParams(Expr("4*sqrt(x)")))


def test_constant_alpha_is_accepted():
    cond = HouseOfCardsParams(Expr("0.25")).check()
    assert cond.constant_alpha


def test_explicit_realization_checked():
    with pytest.raises(ModelError, match="realization"):
        HouseOfCardsParams(Expr("x"), rate=Expr("1"), offspring=[Expr("1"), Expr("0"), Expr("0")]).check()
    ok = HouseOfCardsParams(Expr("x"), rate=Expr("x"), offspring=[Expr("1"), Expr("0")]).check()
    assert ok.min_gap > 0


def test_moment_order_validated():
    with pytest.raises(ModelError):
        make_finite_type([1.0], [[0, 0, 1]], moment_order=2)
