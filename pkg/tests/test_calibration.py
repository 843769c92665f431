import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfcalib.calibration import (ParameterBounds, PairObjective, calibrate_pair,
                                 compare_optimizers, differential_evolution, evaluate_population,
                                 genetic_algorithm, ground_truth_spacing, model_space, reflect,
                                 results_from_json, results_to_json, rmse, summarize)
from cfcalib.models import ConfigurationError, IdmParams, ParameterSet, default_parameters
from cfcalib.synthetic import drive_off_pair


def sphere(X):
    X = np.atleast_2d(X)
    return np.sum((X - 0.3) ** 2, axis=1)


def rosenbrock(X):
    X = np.atleast_2d(X)
    return np.sum(100 * (X[:, 1:] - X[:, :-1] ** 2) ** 2 + (1 - X[:, :-1]) ** 2, axis=1)


class Recorder:
    def __init__(self, f, bounds):
        self.f, self.bounds, self.out_of_bounds = f, bounds, 0

    def __call__(self, X):
        bad = (X < self.bounds.lb - 1e-12) | (X > self.bounds.ub + 1e-12)
        self.out_of_bounds += int(bad.any())
        return self.f(X)


@pytest.fixture(scope="module")
def synth():
    return drive_off_pair(11)


def test_rmse_hand_value():
    assert rmse([0, 0, 0], [3, 4, 0]) == pytest.approx(math.sqrt(25 / 3))


def test_rmse_rejects_mismatched():
    with pytest.raises(ValueError):
        rmse([1, 2], [1])
    with pytest.raises(ValueError):
        rmse([], [])


@given(x=st.floats(-100, 100), lo=st.floats(-5, 0), w=st.floats(0.1, 10))
def test_reflect_lands_in_bounds(x, lo, w):
    y = reflect(np.array([x]), np.array([lo]), np.array([lo + w]))[0]
    assert lo - 1e-9 <= y <= lo + w + 1e-9


def test_reflect_identity_inside():
    x = np.array([0.2, 0.9])
    np.testing.assert_array_equal(reflect(x, np.zeros(2), np.ones(2)), x)
    np.testing.assert_allclose(reflect(np.array([1.2, -0.3]), np.zeros(2), np.ones(2)), [0.8, 0.3])


def test_bounds_validation():
    with pytest.raises(ConfigurationError):
        ParameterBounds.from_pairs([(1.0, 1.0)])
    with pytest.raises(ConfigurationError):
        ParameterBounds.from_pairs([(0.0, math.inf)])


def test_de_solves_sphere():
    b = ParameterBounds.from_pairs([(-5, 5)] * 4)
    res = differential_evolution(sphere, b, pop=40, iters=150, seed=1)
    assert res.gof < 1e-6
    np.testing.assert_allclose(res.best_vector, 0.3, atol=1e-3)


def test_de_solves_rosenbrock_2d():
    b = ParameterBounds.from_pairs([(-2, 2)] * 2)
    res = differential_evolution(rosenbrock, b, pop=40, iters=300, seed=0)
    np.testing.assert_allclose(res.best_vector, 1.0, atol=1e-2)


def test_ga_solves_sphere():
    b = ParameterBounds.from_pairs([(-5, 5)] * 3)
    res = genetic_algorithm(sphere, b, pop=100, iters=150, seed=2)
    assert res.gof < 1e-3


@given(seed=st.integers(0, 1000), d=st.integers(1, 5))
def test_optimizers_stay_in_bounds_and_traces_monotone(seed, d):
    b = ParameterBounds.from_pairs([(-1, 2)] * d)
    for opt, pop in ((differential_evolution, 8), (genetic_algorithm, 10)):
        rec = Recorder(sphere, b)
        res = opt(rec, b, pop=pop, iters=6, seed=seed)
        assert rec.out_of_bounds == 0
        assert len(res.trace) == 7
        assert np.all(np.diff(res.trace) <= 0)
        assert res.gof == res.trace[-1]
        assert np.all(res.best_vector >= b.lb) and np.all(res.best_vector <= b.ub)


def test_de_member_zero_is_estimate():
    b = ParameterBounds.from_pairs([(-5, 5)] * 2)
    res = differential_evolution(sphere, b, pop=6, iters=0, init=np.array([0.3, 0.3]))
    assert res.gof == 0.0


def test_de_population_too_small():
    with pytest.raises(ConfigurationError, match="population too small"):
        differential_evolution(sphere, ParameterBounds.from_pairs([(0, 1)]), pop=3)


def test_ga_clone_population_is_fixed_point():
    b = ParameterBounds.from_pairs([(0, 1)] * 2)
    init = np.tile([0.25, 0.75], (10, 1))
    res = genetic_algorithm(sphere, b, pop=10, iters=5, mutation_rate=0.0, crossover_rate=0.0,
                            init=init)
    np.testing.assert_array_equal(res.best_vector, [0.25, 0.75])


def test_ga_longer_run_extends_shorter():
    b = ParameterBounds.from_pairs([(-3, 3)] * 3)
    short = genetic_algorithm(sphere, b, pop=20, iters=10, seed=4)
    long = genetic_algorithm(sphere, b, pop=20, iters=30, seed=4)
    np.testing.assert_array_equal(short.trace, long.trace[:11])


def test_optimizers_deterministic_per_seed():
    b = ParameterBounds.from_pairs([(-3, 3)] * 3)
    a = differential_evolution(sphere, b, pop=10, iters=5, seed=9)
    c = differential_evolution(sphere, b, pop=10, iters=5, seed=9)
    np.testing.assert_array_equal(a.trace, c.trace)


def test_truth_has_zero_objective(synth):
    pair, truth = synth
    assert evaluate_population(pair, [truth])[0] == pytest.approx(0.0, abs=1e-9)
    space = model_space("eidm", dt=pair.dt)
    assert PairObjective(pair, space)(space.to_vector(truth)[None, :])[0] < 1e-9


def test_collision_scores_infinite(synth):
    pair, _ = synth
    crash = ParameterSet("idm", IdmParams(a_max=4.0, T=0.0, s0=0.0, delta=1.0, b=0.5, F_v=1.4))
    g = evaluate_population(pair, [crash, default_parameters("idm")])
    assert math.isfinite(g[1])
    assert g[0] == math.inf or g[0] > 0


def test_free_leader_ground_truth_is_distance_to_stop():
    pair, _ = drive_off_pair(1)
    from cfcalib.trajectory import LeaderFollowerPair

    free = LeaderFollowerPair(pair.follower, None, True, "1", pair.v_limit, 8.0, 1.0)
    np.testing.assert_allclose(ground_truth_spacing(free), 8.0 - pair.follower.driven_distance)
    assert math.isfinite(evaluate_population(free, [default_parameters("eidm")])[0])


def test_model_space_round_trip():
    space = model_space("eidm_sched", schedule_speeds=(5, 12))
    assert space.names[-2:] == ("amax_0", "amax_1") and "a_max" not in space.names
    x = (space.bounds.lb + space.bounds.ub) / 2
    np.testing.assert_allclose(space.to_vector(space.to_params(x)), x)
    with pytest.raises(ConfigurationError):
        model_space("eidm_sched")
    with pytest.raises(ConfigurationError):
        model_space("idm", schedule_speeds=(5,))


def test_t_ap_lower_bound_is_time_step():
    assert model_space("idm", dt=0.1).bounds.to_dict()["t_AP"][0] == 0.1


def test_calibrate_pair_improves_on_seed_and_serializes(synth):
    pair, _ = synth
    res = calibrate_pair(pair, "idm", "de", pop=12, iters=4, seed=0)
    assert res.trace[-1] <= res.trace[0]
    back = results_from_json(results_to_json([res]))[0]
    assert back.gof == res.gof and back.best_params == res.best_params
    assert "wall_time" not in res.to_dict()
    assert summarize([res])["n"] == 1


def test_compare_optimizers_report_shape(synth):
    pairs = [synth[0], drive_off_pair(12)[0]]
    rep = compare_optimizers(pairs, "idm", de_pop=8, de_iters=2, ga_pop=10, ga_budgets=(2, 4))
    d = rep.to_dict()
    assert d["n_pairs"] == 2 and set(d["ga"]) == {"2", "4"}
    assert np.all(rep.ga_gof[4] <= rep.ga_gof[2])
