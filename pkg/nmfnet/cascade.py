"""Continuous-time progressive cascades: simulation, discretization, datasets."""
import json
import logging
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse
from scipy.sparse import csgraph
from tqdm import tqdm

logger = logging.getLogger(__name__)

DELAY_KINDS = ("exp", "rayleigh", "weibull")

# spawn-key namespaces of the master seed
SOURCES_STREAM = 0
CASCADE_STREAM = 1
SHAPE_STREAM = 2

# cascades handed to one worker at a time; fixed so output never depends on n_jobs
CHUNK_SIZE = 500


class DatasetFormatError(ValueError):
    """Malformed cascade dataset record."""

    def __init__(self, lineno, message):
        super().__init__(f"record {lineno}: {message}")
        self.lineno = lineno


def substream(seed, *key):
    """independent random stream derived from (seed, key...)"""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def derived_seed(seed, *key):
    """integer seed for a named sub-experiment of (seed, key...)"""
    return int(np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class DelayModel:
    """
    Edge transmission-delay distribution.

    Parameters
    ----------

    kind : {"exp", "rayleigh", "weibull"}
        exp: p(t) = a exp(-a t); rayleigh: p(t) = a t exp(-a t^2 / 2);
        weibull: survival exp(-(a t)^s), so a acts as an inverse scale.

    shape : float or array of shape (num_edges,), optional
        Weibull shape s, global or aligned with the network's edge order.
    """

    kind: str = "exp"
    shape: object = None

    def __post_init__(self):
        kind = {"exponential": "exp"}.get(self.kind, self.kind)
        if kind not in DELAY_KINDS:
            raise ValueError(f"Unknown delay model {self.kind!r}; choose from {DELAY_KINDS}.")
        object.__setattr__(self, "kind", kind)
        if kind == "weibull":
            if self.shape is None:
                raise ValueError("Weibull delays need a shape parameter.")
            shape = np.asarray(self.shape, dtype=float)
            if np.any(shape <= 0):
                raise ValueError("Weibull shapes must be positive.")
            object.__setattr__(self, "shape", shape)

    @classmethod
    def weibull_sampled(cls, net, rng, low=1.0, high=10.0):
        """Weibull model with one shape per edge drawn from Unif[low, high]"""
        return cls("weibull", rng.uniform(low, high, size=net.num_edges))

    @property
    def is_exponential(self):
        return self.kind == "exp"

    def sample(self, alpha, rng):
        """one delay per edge by inverse-CDF sampling"""
        e = -np.log1p(-rng.random(len(alpha)))
        if self.kind == "exp":
            return e / alpha
        if self.kind == "rayleigh":
            return np.sqrt(2.0 * e / alpha)
        return e ** (1.0 / self.shape) / alpha

    def cdf(self, t, alpha):
        t = np.asarray(t, dtype=float)
        if self.kind == "exp":
            return 1.0 - np.exp(-alpha * t)
        if self.kind == "rayleigh":
            return 1.0 - np.exp(-alpha * t ** 2 / 2.0)
        return 1.0 - np.exp(-((alpha * t) ** self.shape))


def validate_source(source, n):
    """sorted tuple of distinct node ids; raises ValueError when empty or out of range"""
    nodes = sorted({int(v) for v in source})
    if not nodes:
        raise ValueError("Source set must be nonempty.")
    if nodes[0] < 0 or nodes[-1] >= n:
        raise ValueError(f"Source nodes must lie in [0, {n}), got {nodes}.")
    return tuple(nodes)


@dataclass(frozen=True, eq=False)
class Cascade:
    """One cascade: its source set and per-node infection times (inf if never infected)."""

    source: tuple
    times: np.ndarray
    horizon: float = np.inf

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        source = validate_source(self.source, len(times))
        if np.any(times[list(source)] != 0):
            raise ValueError("Source nodes must have infection time 0.")
        if np.any(np.isnan(times)) or np.any(times < 0):
            raise ValueError("Infection times must be nonnegative.")
        times.setflags(write=False)
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "times", times)

    @property
    def n(self):
        return len(self.times)

    def is_causally_consistent(self, net):
        """every infected non-source node has an in-neighbor infected strictly earlier"""
        earliest = np.full(self.n, np.inf)
        np.minimum.at(earliest, net.dst, self.times[net.src])
        infected = np.isfinite(self.times) & (self.times > 0)
        return bool(np.all(earliest[infected] < self.times[infected]))


@dataclass(frozen=True, eq=False)
class ObservationGrid:
    """Binary infection states on the integer grid t = 0..T, shape (T + 1, n)."""

    states: np.ndarray

    @property
    def T(self):
        return self.states.shape[0] - 1

    def targets(self):
        """float states for t = 1..T, the training targets"""
        return self.states[1:].astype(float)


class _DelayGraph:
    """CSR graph of a network whose edge weights are resampled per cascade."""

    def __init__(self, net, model):
        if model.kind == "weibull" and model.shape.ndim == 1 and len(model.shape) != net.num_edges:
            raise ValueError("Per-edge Weibull shapes must match the edge count.")
        self.net = net
        self.model = model
        order = sparse.csr_matrix(
            (np.arange(1, net.num_edges + 1, dtype=float), (net.src, net.dst)),
            shape=(net.n, net.n),
        )
        self.graph = order
        self.perm = order.data.astype(np.int64) - 1

    def infection_times(self, source, horizon, rng):
        n = self.net.n
        if self.net.num_edges == 0:
            times = np.full(n, np.inf)
        else:
            delays = self.model.sample(self.net.alpha, rng)
            # csgraph treats stored zeros as missing edges
            self.graph.data = np.maximum(delays, np.finfo(float).tiny)[self.perm]
            times = csgraph.dijkstra(self.graph, directed=True, indices=list(source), min_only=True)
        times[times > horizon] = np.inf
        times[list(source)] = 0.0
        return times

    def distances(self, horizon, rng):
        """all-pairs earliest arrival times under one delay draw; beyond horizon is inf"""
        if self.net.num_edges == 0:
            dist = np.full((self.net.n, self.net.n), np.inf)
            np.fill_diagonal(dist, 0.0)
            return dist
        delays = self.model.sample(self.net.alpha, rng)
        self.graph.data = np.maximum(delays, np.finfo(float).tiny)[self.perm]
        dist = csgraph.shortest_path(self.graph, method="D", directed=True)
        dist[dist > horizon] = np.inf
        return dist


def simulate_cascade(net, model, source, horizon, rng):
    """
    Simulate one progressive cascade.

    One delay per edge is drawn from the delay model; infection times are the
    multi-source shortest-path distances from the source set under those
    delays. Times beyond the horizon are reported as inf.
    """
    source = validate_source(source, net.n)
    if horizon <= 0:
        raise ValueError("Horizon must be positive.")
    times = _DelayGraph(net, model).infection_times(source, horizon, rng)
    return Cascade(source, times, horizon)


def observe(times, grid_times):
    """binary states of infection times at the given observation times, shape (len(grid), n)"""
    times = np.asarray(times, dtype=float)
    return (times[..., None, :] <= np.asarray(grid_times, dtype=float)[:, None]).astype(np.uint8)


def discretize(cascade, T):
    """threshold infection times on the integer grid t = 0..T"""
    if int(T) != T or T < 1:
        raise ValueError(f"Number of steps must be a positive integer, got {T}.")
    return ObservationGrid(observe(cascade.times, np.arange(T + 1)))


def _simulate_chunk(net, model, sources, indices, horizon, seed):
    sim = _DelayGraph(net, model)
    return [
        sim.infection_times(src, horizon, substream(seed, CASCADE_STREAM, idx))
        for src, idx in zip(sources, indices)
    ]


def sample_infection_times(net, model, sources, horizon, seed, n_jobs=1, progress=False):
    """
    Infection times of one cascade per entry of `sources`, shape (len(sources), n).

    Cascade k uses the random substream (seed, k), so the result does not
    depend on n_jobs.
    """
    sources = [validate_source(s, net.n) for s in sources]
    starts = list(range(0, len(sources), CHUNK_SIZE))
    jobs = (
        delayed(_simulate_chunk)(
            net, model, sources[a:a + CHUNK_SIZE], range(a, min(a + CHUNK_SIZE, len(sources))), horizon, seed
        )
        for a in tqdm(starts, desc="simulating", disable=not progress)
    )
    chunks = Parallel(n_jobs=n_jobs)(jobs)
    times = [t for chunk in chunks for t in chunk]
    return np.array(times).reshape(len(sources), net.n)


def _distance_chunk(net, model, indices, horizon, seed):
    sim = _DelayGraph(net, model)
    return [sim.distances(horizon, substream(seed, CASCADE_STREAM, idx)) for idx in indices]


def sample_delay_distances(net, model, num_samples, horizon, seed, n_jobs=1, progress=False):
    """
    All-pairs arrival times for num_samples delay realisations, shape (num_samples, n, n).

    Realisation k draws its delays from the same substream as cascade k of
    sample_infection_times, so both views agree on every sample.
    """
    if num_samples < 1:
        raise ValueError("Need at least one delay realisation.")
    starts = list(range(0, num_samples, CHUNK_SIZE))
    jobs = (
        delayed(_distance_chunk)(net, model, range(a, min(a + CHUNK_SIZE, num_samples)), horizon, seed)
        for a in tqdm(starts, desc="sampling delays", disable=not progress)
    )
    chunks = Parallel(n_jobs=n_jobs)(jobs)
    return np.stack([d for chunk in chunks for d in chunk])


def sample_source_sets(n, num_sources, size_range, rng):
    lo, hi = size_range
    if not (1 <= lo <= hi <= n):
        raise ValueError(f"Source size range must satisfy 1 <= lo <= hi <= {n}, got [{lo}, {hi}].")
    sizes = rng.integers(lo, hi + 1, size=num_sources)
    return [tuple(sorted(rng.choice(n, size=s, replace=False).tolist())) for s in sizes]


def generate_dataset(
    net, model, num_sources, cascades_per_source, source_size_range=(1, 10), T=10,
    seed=0, out=None, n_jobs=1, progress=False,
):
    """
    Generate a cascade dataset.

    Parameters
    ----------

    net : DirectedNetwork
        Ground-truth network.

    model : DelayModel
        Edge delay distribution.

    num_sources : int
        Number of source sets, sizes uniform on source_size_range, nodes
        drawn without replacement.

    cascades_per_source : int
        Cascades simulated per source set.

    T : float, default 10
        Observation horizon; later infections are recorded as never.

    seed : int
        Master seed; the same seed gives a byte-identical dataset.

    out : path, optional
        When given, the dataset is also written as JSON lines.

    Returns
    -------

    cascades : list of Cascade
        num_sources * cascades_per_source cascades, grouped by source set.
    """
    if num_sources < 1 or cascades_per_source < 1:
        raise ValueError("Need at least one source set and one cascade per source.")
    sources = sample_source_sets(net.n, num_sources, source_size_range, substream(seed, SOURCES_STREAM))
    expanded = [s for s in sources for _ in range(cascades_per_source)]
    times = sample_infection_times(net, model, expanded, T, seed, n_jobs=n_jobs, progress=progress)
    cascades = [Cascade(s, t, T) for s, t in zip(expanded, times)]
    logger.info("Simulated %d cascades from %d source sets", len(cascades), num_sources)
    if out is not None:
        save_dataset(cascades, out)
    return cascades


def save_dataset(cascades, path):
    """JSON lines {"source": [...], "times": [...]} with null for never-infected"""
    with open(path, "w", encoding="utf-8") as f:
        for c in cascades:
            times = [None if not np.isfinite(t) else float(t) for t in c.times.tolist()]
            f.write(json.dumps({"source": list(c.source), "times": times}) + "\n")


def load_dataset(path, horizon=np.inf):
    cascades = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                times = [np.inf if t is None else float(t) for t in record["times"]]
                cascades.append(Cascade(tuple(record["source"]), np.array(times), horizon))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(lineno, str(exc)) from None
    if cascades and len({c.n for c in cascades}) != 1:
        raise DatasetFormatError(0, "cascades disagree on the node count")
    return cascades


def group_by_source(cascades):
    """dict source set -> list of cascades, in order of first appearance"""
    groups = {}
    for c in cascades:
        groups.setdefault(c.source, []).append(c)
    return groups


def empirical_infection_prob(cascades, source, T):
    """Monte Carlo infection probabilities for t = 1..T from the cascades with this source set, shape (T, n)"""
    key = tuple(sorted(int(v) for v in source))
    matching = [c for c in cascades if c.source == key]
    if not matching:
        raise ValueError(f"No cascades with source set {list(key)}.")
    states = observe(np.stack([c.times for c in matching]), np.arange(1, T + 1))
    return states.mean(axis=0)
