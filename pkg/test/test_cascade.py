import numpy as np
import pytest
from scipy import stats
from nmfnet.cascade import (
    Cascade,
    DatasetFormatError,
    DelayModel,
    discretize,
    empirical_infection_prob,
    generate_dataset,
    group_by_source,
    load_dataset,
    sample_delay_distances,
    sample_infection_times,
    save_dataset,
    simulate_cascade,
    validate_source,
)
from nmfnet.graph import DirectedNetwork, generate_network


# sample data: a 2-node single edge and a small random network
two_node = DirectedNetwork.from_edges(2, [(0, 1, 1.0)])
small = generate_network("random", 10, 25, 0.2, 1.0, seed=5)
exp = DelayModel("exp")


def test_delay_model_validation():
    assert DelayModel("exponential").kind == "exp"
    with pytest.raises(ValueError):
        DelayModel("gamma")
    with pytest.raises(ValueError):
        DelayModel("weibull")
    with pytest.raises(ValueError):
        DelayModel("weibull", shape=-1.0)


@pytest.mark.parametrize("model", [DelayModel("exp"), DelayModel("rayleigh"), DelayModel("weibull", 2.5)])
def test_delay_sampler_matches_cdf(model):
    rng = np.random.default_rng(0)
    alpha = np.full(20000, 0.7)
    delays = model.sample(alpha, rng)
    for t in (0.5, 1.0, 2.0):
        assert np.mean(delays <= t) == pytest.approx(model.cdf(t, 0.7), abs=0.015)


def test_rayleigh_delays_pass_ks_test():
    model = DelayModel("rayleigh")
    delays = model.sample(np.full(100000, 0.7), np.random.default_rng(3))
    result = stats.kstest(delays, lambda t: model.cdf(t, 0.7))
    assert result.pvalue > 0.001


def test_validate_source():
    assert validate_source([3, 1, 3], 5) == (1, 3)
    with pytest.raises(ValueError):
        validate_source([], 5)
    with pytest.raises(ValueError):
        validate_source([5], 5)


def test_simulate_cascade_basic():
    rng = np.random.default_rng(1)
    for _ in range(20):
        c = simulate_cascade(small, exp, [0, 4], 5.0, rng)
        assert c.times[0] == 0 and c.times[4] == 0
        assert np.all((c.times <= 5.0) | np.isinf(c.times))
        assert c.is_causally_consistent(small)


def test_no_edges_only_sources_infected():
    empty = DirectedNetwork.from_edges(4, [])
    c = simulate_cascade(empty, exp, [2], 10.0, np.random.default_rng(0))
    assert np.isinf(c.times[[0, 1, 3]]).all()
    assert c.times[2] == 0


def test_cascade_validation():
    with pytest.raises(ValueError):
        Cascade((0,), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        Cascade((0,), np.array([0.0, -1.0]))


def test_discretize_monotone():
    c = simulate_cascade(small, exp, [0], 10.0, np.random.default_rng(2))
    grid = discretize(c, 10)
    assert grid.states.shape == (11, 10)
    assert np.all(np.diff(grid.states.astype(int), axis=0) >= 0)
    assert grid.states[0].tolist() == [1] + [0] * 9
    assert grid.targets().shape == (10, 10)
    with pytest.raises(ValueError):
        discretize(c, 0)


def test_dataset_deterministic_and_thread_independent():
    a = generate_dataset(small, exp, 7, 3, (1, 3), T=5, seed=9)
    b = generate_dataset(small, exp, 7, 3, (1, 3), T=5, seed=9, n_jobs=2)
    assert len(a) == 21
    assert all(x.source == y.source and np.array_equal(x.times, y.times) for x, y in zip(a, b))
    groups = group_by_source(a)
    assert all(len(v) % 3 == 0 for v in groups.values())


def test_dataset_file_round_trip(tmp_path):
    path = tmp_path / "data.jsonl"
    cascades = generate_dataset(small, exp, 4, 2, (1, 2), T=2, seed=3, out=path)
    loaded = load_dataset(path, 2)
    assert len(loaded) == len(cascades)
    for x, y in zip(cascades, loaded):
        assert x.source == y.source
        assert np.array_equal(x.times, y.times)


def test_never_infected_written_as_null(tmp_path):
    path = tmp_path / "data.jsonl"
    save_dataset([Cascade((0,), [0.0, np.inf, 2.5])], path)
    assert path.read_text() == '{"source": [0], "times": [0.0, null, 2.5]}\n'
    assert np.array_equal(load_dataset(path)[0].times, [0.0, np.inf, 2.5])


def test_dataset_bytes_identical(tmp_path):
    generate_dataset(small, exp, 5, 2, (1, 3), T=4, seed=1, out=tmp_path / "a.jsonl")
    generate_dataset(small, exp, 5, 2, (1, 3), T=4, seed=1, out=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


@pytest.mark.parametrize(
    "text",
    ['{"source": [0], "times": [0, 1.5]}\nnot json\n', '{"source": [0]}\n', '{"source": [1], "times": [0, 1.0]}\n'],
)
def test_load_dataset_errors(tmp_path, text):
    path = tmp_path / "bad.jsonl"
    path.write_text(text)
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_two_node_infection_probability():
    times = sample_infection_times(two_node, exp, [(0,)] * 20000, 3.0, seed=4)
    cascades = [Cascade((0,), t, 3.0) for t in times]
    probs = empirical_infection_prob(cascades, [0], 3)
    assert probs.shape == (3, 2)
    assert probs[:, 0].tolist() == [1.0, 1.0, 1.0]
    assert probs[:, 1] == pytest.approx(1 - np.exp(-np.arange(1, 4)), abs=0.015)


def test_distances_agree_with_cascades():
    dist = sample_delay_distances(small, exp, 50, 4.0, seed=8)
    times = sample_infection_times(small, exp, [(1, 6)] * 50, 4.0, seed=8)
    assert np.array_equal(dist[:, [1, 6], :].min(axis=1), times)
