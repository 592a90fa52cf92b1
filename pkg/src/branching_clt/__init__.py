"""Simulation and fluctuation analysis of supercritical branching Markov
processes: finite-type models and the house-of-cards mutation model."""

from .dsl import DSLError, Expr
from .models import (HouseOfCardsParams, Model, ModelError, TraitSpace, make_finite_type,
                     make_house_of_cards, make_yule, mutation_channel)
from .semigroup import (EigenTriplet, Regime, classify_regime, limit_variances,
                        mean_semigroup_apply, second_moment_ode, solve_eigentriplet,
                        verify_assumption2)
from .simulator import Ensemble, Trajectory, simulate_ensemble, simulate_trajectory

__version__ = "0.1.0"

__all__ = [
    "DSLError", "Expr", "HouseOfCardsParams", "Model", "ModelError", "TraitSpace",
    "make_finite_type", "make_house_of_cards", "make_yule", "mutation_channel",
    "EigenTriplet", "Regime", "classify_regime", "limit_variances", "mean_semigroup_apply",
    "second_moment_ode", "solve_eigentriplet", "verify_assumption2",
    "Ensemble", "Trajectory", "simulate_ensemble", "simulate_trajectory",
]
