import itertools
import logging

import numpy as np
import pytest
from nmfnet.cascade import DelayModel
from nmfnet.graph import DirectedNetwork, random_generate, sample_rates
from nmfnet.influence_max import (
    CtmcEstimator,
    EstimatorError,
    ImProblem,
    MonteCarloEstimator,
    NmfEstimator,
    brute_force_select,
    evaluate_selection,
    greedy_select,
)
from nmfnet.nmf_core import init_parameters

EXP = DelayModel("exp")

# center 0 -> five leaves
star = DirectedNetwork.from_edges(6, [(0, v, 5.0) for v in range(1, 6)])


def random_net(seed, n, m=None):
    rng = np.random.default_rng(seed)
    m = 2 * n if m is None else m
    return sample_rates(random_generate(n, m, rng), 0.1, 1.0, rng)


class FailingEstimator:
    n = 4
    horizon = np.inf
    submodular = False

    def influence(self, source, t):
        if 2 in source:
            raise RuntimeError("boom")
        return float(len(source))


def test_star_center_selected():
    selection = greedy_select(ImProblem(CtmcEstimator(star), 3.0, 1))
    assert selection.nodes == [0]
    assert selection.influence == pytest.approx(1 + 5 * (1 - np.exp(-15.0)), abs=1e-4)


def test_single_pick_matches_brute_force():
    estimator = MonteCarloEstimator(random_net(0, 8), EXP, 3.0, num_samples=300, seed=1)
    problem = ImProblem(estimator, 3.0, 1)
    greedy, brute = greedy_select(problem), brute_force_select(problem)
    assert greedy.nodes == brute.nodes
    assert greedy.influence == brute.influence
    best = max(range(8), key=lambda v: (estimator.influence([v], 3.0), -v))
    assert greedy.nodes == [best]


@pytest.mark.parametrize("budget", [1, 2, 3])
def test_lazy_matches_plain(budget):
    estimator = MonteCarloEstimator(random_net(2, 9), EXP, 2.0, num_samples=400, seed=3)
    problem = ImProblem(estimator, 2.0, budget)
    plain, lazy = greedy_select(problem), greedy_select(problem, lazy=True)
    assert lazy.nodes == plain.nodes
    assert lazy.influence == pytest.approx(plain.influence)
    assert lazy.evaluations <= plain.evaluations + 1


def test_lazy_verification_on_exact_oracle():
    problem = ImProblem(CtmcEstimator(random_net(4, 6)), 2.0, 3)
    selection = greedy_select(problem, lazy=True, verify_lazy=True)
    assert selection.nodes == greedy_select(problem).nodes
    assert len(set(selection.nodes)) == 3


def test_greedy_gains_nonincreasing_on_oracle():
    estimator = MonteCarloEstimator(random_net(5, 10), EXP, 3.0, num_samples=500, seed=6)
    selection = greedy_select(ImProblem(estimator, 3.0, 4))
    assert all(b <= a + 1e-12 for a, b in zip(selection.gains, selection.gains[1:]))
    assert sum(selection.gains) == pytest.approx(selection.influence)


def test_greedy_approximation_ratio():
    bound = 1 - 1 / np.e
    for k in range(20):
        rng = np.random.default_rng(100 + k)
        n = int(rng.integers(5, 11))
        net = sample_rates(random_generate(n, int(rng.integers(n, 3 * n)), rng), 0.1, 1.0, rng)
        estimator = MonteCarloEstimator(net, EXP, 2.0, num_samples=200, seed=k)
        problem = ImProblem(estimator, 2.0, int(rng.integers(1, 4)))
        assert greedy_select(problem).influence >= bound * brute_force_select(problem).influence


def test_brute_force_all_but_one():
    estimator = CtmcEstimator(random_net(7, 5))
    problem = ImProblem(estimator, 1.5, 4)
    selection = brute_force_select(problem)
    best = max(
        itertools.combinations(range(5), 4), key=lambda s: estimator.influence(list(s), 1.5),
    )
    assert selection.nodes == list(best)
    assert selection.evaluations == 5


def test_problem_validation():
    estimator = MonteCarloEstimator(random_net(8, 5), EXP, 2.0, num_samples=10)
    for budget in (0, 5):
        with pytest.raises(ValueError):
            ImProblem(estimator, 1.0, budget)
    with pytest.raises(ValueError):
        ImProblem(estimator, 0.0, 1)
    with pytest.raises(ValueError):
        ImProblem(estimator, 2.5, 1)
    with pytest.raises(ValueError):
        ImProblem(estimator, 1.0, 3, candidates=[0, 1])
    with pytest.raises(ValueError):
        ImProblem(estimator, 1.0, 1, candidates=[0, 7])
    problem = ImProblem(estimator, 1.0, 2, candidates=[3, 1, 1, 4])
    assert problem.candidates == (1, 3, 4)
    assert set(greedy_select(problem).nodes) <= {1, 3, 4}


def test_brute_force_enumeration_budget(monkeypatch):
    monkeypatch.setattr("nmfnet.influence_max.MAX_COMBINATIONS", 5)
    problem = ImProblem(CtmcEstimator(random_net(9, 6)), 1.0, 2)
    with pytest.raises(ValueError):
        brute_force_select(problem)


def test_evaluate_selection():
    net = random_net(10, 6)
    value, se = evaluate_selection(net, EXP, range(6), 2.0, num_mc=50, seed=1)
    assert value == 6.0 and se == 0.0
    with pytest.raises(ValueError):
        evaluate_selection(net, EXP, [], 2.0)
    with pytest.raises(ValueError):
        evaluate_selection(net, EXP, [0], 0.0)
    assert evaluate_selection(net, EXP, [0], 2.0, 200, seed=3) == evaluate_selection(net, EXP, [0], 2.0, 200, seed=3)


def test_monte_carlo_estimator_matches_fresh_cascades():
    net = random_net(11, 7)
    estimator = MonteCarloEstimator(net, EXP, 2.0, num_samples=300, seed=4)
    value, se = evaluate_selection(net, EXP, [1, 5], 2.0, num_mc=300, seed=4)
    assert estimator.influence([1, 5], 2.0) == pytest.approx(value)
    assert estimator.standard_error([1, 5], 2.0) == pytest.approx(se)


def test_monte_carlo_estimator_marginals():
    net = random_net(13, 6)
    estimator = MonteCarloEstimator(net, EXP, 3.0, num_samples=200, seed=7)
    assert estimator.nbytes == 200 * 6 * 6 * 8
    marginals = estimator.marginals([0, 4], [1.0, 2.0, 3.0])
    assert marginals.shape == (3, 6)
    assert np.all(marginals[:, [0, 4]] == 1.0)
    assert np.all(np.diff(marginals, axis=0) >= 0)
    assert marginals[-1].sum() == pytest.approx(estimator.influence([0, 4], 3.0))
    with pytest.raises(ValueError):
        estimator.marginals([0], [4.0])


def test_monte_carlo_estimator_is_submodular():
    estimator = MonteCarloEstimator(random_net(12, 6, 14), EXP, 2.0, num_samples=200, seed=5)
    sigma = lambda s: estimator.influence(list(s), 2.0) if s else 0.0
    for small, extra in (((0,), (1, 2)), ((3,), (4,)), ((1, 2), (5,))):
        large = small + extra
        for v in range(6):
            if v in large:
                continue
            gain_small = sigma(small + (v,)) - sigma(small)
            gain_large = sigma(large + (v,)) - sigma(large)
            assert gain_small >= gain_large - 1e-12
            assert gain_large >= -1e-12


def test_nmf_estimator():
    params = init_parameters(5, correction=False, rng=np.random.default_rng(0))
    params.A[:] = 0.0
    estimator = NmfEstimator(params, horizon=10)
    assert estimator.influence([0, 2], 4) == pytest.approx(2.0, abs=1e-4)
    with pytest.raises(ValueError):
        estimator.influence([0], 2.5)
    selection = greedy_select(ImProblem(NmfEstimator(init_parameters(5, rng=np.random.default_rng(1)), 10), 5, 2))
    assert len(set(selection.nodes)) == 2


def test_estimator_failure_names_candidate_set():
    with pytest.raises(EstimatorError) as err:
        greedy_select(ImProblem(FailingEstimator(), 1.0, 2))
    assert 2 in err.value.nodes
    assert "boom" in str(err.value)


def test_rising_gains_are_logged(caplog):
    class Supermodular:
        n = 4
        horizon = np.inf
        submodular = True

        def influence(self, source, t):
            return float(len(source) ** 2)

        def gain_tolerance(self, source, t):
            return 0.0

    with caplog.at_level(logging.WARNING, logger="nmfnet.influence_max"):
        selection = greedy_select(ImProblem(Supermodular(), 1.0, 3))
    assert selection.gains == [1.0, 3.0, 5.0]
    assert "not behaving submodularly" in caplog.text
