import numpy as np
import pytest
from nmfnet.cascade import DelayModel
from nmfnet.graph import DirectedNetwork, random_generate, sample_rates
from nmfnet.oracle import (
    OracleError,
    ctmc_generator,
    ctmc_marginals,
    influence,
    marginals_frame,
    mc_marginals,
    moment_system_marginals,
)


# sample data: 2-node single edge, 3-node chain
two_node = DirectedNetwork.from_edges(2, [(0, 1, 1.0)])
chain = DirectedNetwork.from_edges(3, [(0, 1, 1.0), (1, 2, 2.0)])
times = np.array([0.5, 1.0, 2.0, 4.0])


def random_net(seed, n):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(n, n * (n - 1) + 1))
    return sample_rates(random_generate(n, m, rng), 0.1, 1.0, rng)


def test_two_node_closed_form():
    x = ctmc_marginals(two_node, [0], [1.0])
    assert x[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert x[0, 1] == pytest.approx(1 - np.exp(-1.0), abs=1e-6)
    assert influence(x)[0] == pytest.approx(1.63212, abs=1e-5)


def test_chain_closed_form():
    # hypoexponential arrival at node 2
    x = ctmc_marginals(chain, [0], times)
    expected = 1 - (2 * np.exp(-times) - np.exp(-2 * times))
    assert x[:, 2] == pytest.approx(expected, abs=1e-6)


def test_generator_rows_sum_to_zero():
    Q = ctmc_generator(random_net(0, 5)).toarray()
    assert np.allclose(Q.sum(axis=1), 0.0)
    assert np.all(Q - np.diag(np.diag(Q)) >= 0)


@pytest.mark.parametrize("seed", range(20))
def test_moment_system_matches_ctmc(seed):
    n = 2 + seed % 5
    net = random_net(seed, n)
    source = [0] if seed % 2 else [0, n - 1]
    exact = ctmc_marginals(net, source, times)
    moments = moment_system_marginals(net, source, times)
    assert np.abs(exact - moments).max() < 1e-4


def test_moment_states():
    marginals, states = moment_system_marginals(chain, [0], times, return_states=True)
    assert len(states) == len(times)
    for state, x in zip(states, marginals):
        assert np.array_equal(state.x, x)
        assert state.dimension == 7
        # e vanishes on the empty set and on singletons
        assert np.all(state.e[[0, 1, 2, 4]] == 0)


def test_sources_stay_infected():
    net = random_net(3, 6)
    x = ctmc_marginals(net, [2, 4], times)
    assert np.allclose(x[:, [2, 4]], 1.0)
    assert np.all(np.diff(x, axis=0) >= -1e-12)


def test_zero_rates_leave_only_sources_infected():
    empty = DirectedNetwork.from_edges(4, [(0, 1, 0.0), (2, 3, 0.0)])
    expected = np.tile([1.0, 0.0, 1.0, 0.0], (len(times), 1))
    assert ctmc_marginals(empty, [0, 2], times) == pytest.approx(expected, abs=1e-12)
    assert moment_system_marginals(empty, [0, 2], times) == pytest.approx(expected, abs=1e-12)
    mean, _ = mc_marginals(empty, DelayModel("exp"), [0, 2], times, 50, seed=1)
    assert np.array_equal(mean, expected)


def test_all_nodes_as_sources():
    net = random_net(4, 5)
    ones = np.ones((len(times), 5))
    assert ctmc_marginals(net, range(5), times) == pytest.approx(ones, abs=1e-12)
    assert moment_system_marginals(net, range(5), times) == pytest.approx(ones, abs=1e-12)
    mean, _ = mc_marginals(net, DelayModel("exp"), range(5), times, 50, seed=1)
    assert np.array_equal(mean, ones)
    assert influence(mean) == pytest.approx(np.full(len(times), 5.0))


def test_exact_oracle_limits():
    with pytest.raises(OracleError):
        ctmc_marginals(DirectedNetwork.from_edges(15, [(0, 1, 1.0)]), [0], times)
    with pytest.raises(OracleError):
        moment_system_marginals(DirectedNetwork.from_edges(13, [(0, 1, 1.0)]), [0], times)
    with pytest.raises(OracleError):
        ctmc_marginals(two_node, [0], times, model=DelayModel("rayleigh"))
    with pytest.raises(OracleError):
        moment_system_marginals(two_node, [0], times, model="rayleigh")
    assert ctmc_marginals(two_node, [0], times, model="exponential") == pytest.approx(ctmc_marginals(two_node, [0], times))
    with pytest.raises(ValueError):
        ctmc_marginals(two_node, [0], [2.0, 1.0])


def test_mc_two_node():
    mean, se = mc_marginals(two_node, DelayModel("exp"), [0], [1.0], 10000, seed=2)
    assert abs(mean[0, 1] - (1 - np.exp(-1.0))) < 4 * se[0, 1]
    mean, se = mc_marginals(two_node, DelayModel("exp"), [0], [1.0], 1, seed=2)
    assert se is None


@pytest.mark.slow
def test_mc_matches_ctmc_eight_nodes():
    net = random_net(11, 8)
    grid = np.arange(1, 6)
    exact = ctmc_marginals(net, [0, 1], grid)
    mean, se = mc_marginals(net, DelayModel("exp"), [0, 1], grid, 100000, seed=1)
    assert np.mean(np.abs(mean - exact) <= 3 * se + 1e-6) >= 0.95
    assert np.abs(mean - exact).mean() < 0.01


@pytest.mark.slow
def test_mc_two_node_closed_form():
    mean, _ = mc_marginals(two_node, DelayModel("exp"), [0], [1.0], 100000, seed=7)
    assert mean[0, 1] == pytest.approx(1 - np.exp(-1.0), abs=5e-3)


def test_marginals_frame():
    x = ctmc_marginals(two_node, [0], [1.0, 2.0])
    frame = marginals_frame([1.0, 2.0], x)
    assert list(frame.columns) == ["t", "node", "prob"]
    assert len(frame) == 4
    frame = marginals_frame([1.0, 2.0], x, source=(0,), se=np.zeros_like(x))
    assert list(frame.columns) == ["source", "t", "node", "prob", "se"]
    assert set(frame["source"]) == {"0"}
