import io
import math

import numpy as np
import pytest
from scipy import stats

from branching_clt.dsl import Expr
from branching_clt.models import (HouseOfCardsParams, make_finite_type, make_house_of_cards,
                                  make_yule, mutation_channel)
from branching_clt.semigroup import mean_semigroup_apply
from branching_clt.simulator import (SimulationError, observe, replica_stream, simulate_ensemble,
                                     simulate_trajectory, simulate_two_stage)


def two_type():
    mut = mutation_channel([0.5, 0.5], [[0, 1], [1, 0]])
    return make_finite_type([0.5, 1.0], [[0, 0, 1], [0, 0, 1]], extra_mechanisms=(mut,))


ONE = {"one": "1"}


def test_yule_population_is_geometric():
    t, n = 1.5, 3000
    ens = simulate_ensemble(make_yule(1.0), 0, [t], 0, n, 1, test_functions=ONE)
    z = ens.Z("one", t).astype(int)
    p = math.exp(-t)
    ks = np.arange(1, 13)
    expected = n * np.append(p * (1 - p) ** (ks - 1), (1 - p) ** ks[-1])
    observed = np.append([np.sum(z == k) for k in ks], np.sum(z > ks[-1]))
    assert stats.chisquare(observed, expected).pvalue > 0.001


def test_pure_death_survival():
    m = make_finite_type([1.0], [[1.0, 0.0]])
    ens = simulate_ensemble(m, 0, [0.7], 0, 4000, 2, test_functions=ONE)
    z = ens.Z("one", 0.7)
    assert set(np.unique(z)) <= {0.0, 1.0}
    assert stats.binomtest(int(z.sum()), z.size, math.exp(-0.7)).pvalue > 0.001
    assert np.array_equal(ens.extinct, z == 0)


def test_two_type_mean_matches_semigroup():
    m = two_type()
    f = "piecewise(2, 0.5, 1)"
    ens = simulate_ensemble(m, 1, [2.0], 0, 3000, 3, test_functions={"f": f})
    z = ens.Z("f", 2.0)
    oracle = mean_semigroup_apply(m, 2.0, Expr(f))[1]
    assert abs(z.mean() - oracle) < 4 * z.std(ddof=1) / math.sqrt(z.size)


def test_hoc_mean_matches_semigroup():
    m = make_house_of_cards(HouseOfCardsParams(Expr("x")))
    ens = simulate_ensemble(m, 0.3, [2.5], 0, 2000, 4, test_functions={"f": "1 + x"})
    z = ens.Z("f", 2.5)
    oracle = mean_semigroup_apply(m, 2.5, Expr("1 + x"), x=[0.3])[0]
    assert abs(z.mean() - oracle) < 4 * z.std(ddof=1) / math.sqrt(z.size)


def test_mutant_traits_are_uniform():
    m = make_house_of_cards(HouseOfCardsParams(Expr("x")))
    mutants = []
    for seed in range(6):
        tr = simulate_trajectory(m, 0.0, 8.0, seed)
        starts = np.concatenate([[0], np.cumsum(tr.event_nchild)])
        _, _, trait, _ = tr.particles()
        for i in range(tr.n_events):
            kids = tr.child_trait[starts[i]: starts[i + 1]]
            # binary fission copies the trait; a mutation adds a fresh one
            if kids.size == 2 and kids[1] != trait[tr.event_parent[i]]:
                mutants.append(kids[1])
    assert len(mutants) > 100
    assert stats.kstest(mutants, "uniform").pvalue > 0.001


def test_determinism_and_thread_independence():
    m = two_type()
    a = simulate_ensemble(m, 0, [1, 2], 1.0, 40, 9, test_functions=ONE, threads=1)
    b = simulate_ensemble(m, 0, [1, 2], 1.0, 40, 9, test_functions=ONE, threads=3)
    c = simulate_ensemble(m, 0, [1, 2], 1.0, 40, 10, test_functions=ONE)
    assert a.to_csv_string() == b.to_csv_string()
    assert a.to_csv_string() != c.to_csv_string()


def test_single_replica_matches_trajectory():
    m = two_type()
    ens = simulate_ensemble(m, 0, [1.0, 3.0], 0, 1, 3, test_functions=ONE)
    tr = simulate_trajectory(m, 0, 3.0, replica_stream(3, 0))
    for j, t in enumerate([1.0, 3.0]):
        assert ens.values[0, j, 0] == observe(tr, t, "1") == tr.population(t)


def test_genealogy_consistency():
    m = two_type()
    tr = simulate_trajectory(m, 1, 4.0, 8)
    ids, parent, trait, birth = tr.particles()
    assert parent[0] == -1 and np.all(parent[1:] >= 0)
    assert np.all(birth[1:] >= birth[parent[1:]])
    assert np.all(np.diff(tr.event_time) >= 0)
    # every event removes one particle and adds its children
    assert tr.population(4.0) == 1 + int(np.sum(tr.event_nchild - 1))
    buf = io.StringIO()
    tr.to_tsv(buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == tr.n_events
    f = lines[0].split("\t")
    assert len(f) == 4 and int(f[2]) == len(f[3].split(","))


def test_truncation():
    ens = simulate_ensemble(make_yule(1.0), 0, [2, 8], 0, 20, 1, cap=50, test_functions=ONE)
    assert ens.truncated.any()
    assert np.all(np.isnan(ens.values[ens.truncated, -1, 0]))
    assert ens.Z("one", 8).size == ens.n - ens.n_truncated


def test_all_truncated_raises():
    from branching_clt.semigroup import solve_eigentriplet
    m = make_yule(1.0)
    with pytest.raises(SimulationError), pytest.warns(RuntimeWarning):
        simulate_ensemble(m, 0, [10], 0, 5, 1, cap=10, triplet=solve_eigentriplet(m))


def test_seed_required():
    with pytest.raises(ValueError):
        simulate_ensemble(make_yule(1.0), 0, [1], 0, 5, None)


def test_dump_trajectories(tmp_path):
    m = two_type()
    simulate_ensemble(m, 0, [1.0], 0, 3, 2, test_functions=ONE, dump_dir=str(tmp_path))
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "trajectory_000000.tsv", "trajectory_000001.tsv", "trajectory_000002.tsv"]


def test_two_stage_small():
    m = two_type()
    z = simulate_two_stage(m, 0, 0.0, 1.0, "1", 5, 4, cap=1000)
    assert z.shape == (5,) and np.all(z >= 0)
