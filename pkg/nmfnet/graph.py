"""Directed weighted diffusion networks: representation, generators, file I/O."""
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# Kronecker seed matrices for the two structured network families.
HIER_SEED = np.array([[0.9, 0.1], [0.1, 0.9]])
CORE_SEED = np.array([[0.9, 0.5], [0.5, 0.3]])

NETWORK_MODELS = ("hier", "core", "random")


class NetworkFormatError(ValueError):
    """Malformed network file; the message names the offending line."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class DirectedNetwork:
    """
    Directed diffusion network with nonnegative edge rates.

    Parameters
    ----------

    n : int
        Number of nodes; ids are 0-based.

    src, dst : array-like of int, shape (num_edges,)
        Edge endpoints, edge k goes from src[k] to dst[k].

    alpha : array-like of float, shape (num_edges,)
        Transmission rate of each edge (units 1/time).

    Notes
    -----

    The matrix view follows the convention (A)_{ji} = alpha_{ij}: row j,
    column i holds the rate of edge i -> j.
    """

    n: int
    src: np.ndarray
    dst: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"Node count must be a positive integer, got {self.n}.")
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        if not (len(src) == len(dst) == len(alpha)):
            raise ValueError("src, dst and alpha must have the same length.")
        if len(src):
            if src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= self.n:
                raise ValueError(f"Node ids must lie in [0, {self.n}).")
            if np.any(src == dst):
                raise ValueError("Self-loops are not allowed.")
            if not np.all(np.isfinite(alpha)) or np.any(alpha < 0):
                raise ValueError("Edge rates must be finite and nonnegative.")
            keys = src * self.n + dst
            if len(np.unique(keys)) != len(keys):
                raise ValueError("Duplicate edges are not allowed.")
        # zero-rate edges are not edges
        keep = alpha > 0
        for name, arr in (("src", src[keep]), ("dst", dst[keep]), ("alpha", alpha[keep])):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n", int(self.n))

    @classmethod
    def from_edges(cls, n, edges):
        """build from an iterable of (src, dst, alpha) triples"""
        edges = list(edges)
        if not edges:
            return cls(n, [], [], [])
        src, dst, alpha = zip(*edges)
        return cls(n, src, dst, alpha)

    @classmethod
    def from_matrix(cls, A):
        """build from a rate matrix with (A)_{ji} = alpha_{ij}; edges ordered by (src, dst)"""
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("Rate matrix must be square.")
        A = A.copy()
        np.fill_diagonal(A, 0.0)
        src, dst = np.nonzero(A.T > 0)
        return cls(A.shape[0], src, dst, A[dst, src])

    @property
    def num_edges(self):
        return len(self.alpha)

    def edges(self):
        return list(zip(self.src.tolist(), self.dst.tolist(), self.alpha.tolist()))

    def matrix(self):
        """dense rate matrix, row = target, column = source"""
        A = np.zeros((self.n, self.n))
        A[self.dst, self.src] = self.alpha
        return A

    def indicator(self):
        """0/1 edge indicator E with E[i, j] = 1 iff edge i -> j exists"""
        E = np.zeros((self.n, self.n), dtype=np.int8)
        E[self.src, self.dst] = 1
        return E

    def with_rates(self, alpha):
        return DirectedNetwork(self.n, self.src, self.dst, alpha)

    def __eq__(self, other):
        if not isinstance(other, DirectedNetwork):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.alpha, other.alpha)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class KroneckerSeed:
    """2x2 initiator matrix P, number of Kronecker powers k, target edge count m."""

    P: np.ndarray
    k: int
    m: int

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.shape != (2, 2):
            raise ValueError("Kronecker seed must be a 2x2 matrix.")
        if np.any(P < 0) or np.any(P > 1):
            raise ValueError("Kronecker seed entries must lie in [0, 1].")
        if P.sum() == 0:
            raise ValueError("Kronecker seed must have a positive entry.")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"Kronecker iterations must be a positive integer, got {self.k}.")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"Edge count must be a positive integer, got {self.m}.")
        if 4 ** self.k < self.m:
            raise ValueError(f"{self.m} edges do not fit into {4 ** self.k} Kronecker cells.")
        # off-diagonal cells with positive probability
        available = np.count_nonzero(P) ** self.k - np.count_nonzero(np.diag(P)) ** self.k
        if self.m > available:
            raise ValueError(
                f"Only {available} non-self-loop cells have positive probability, "
                f"cannot place {self.m} edges."
            )
        object.__setattr__(self, "P", P)

    @property
    def num_nodes(self):
        return 2 ** self.k


def kronecker_generate(seed, rng):
    """
    Sample a stochastic Kronecker network with exactly seed.m edges.

    Each draw picks one cell of the k-th Kronecker power of P by k independent
    categorical draws over the four seed cells; self-loops and repeated cells
    are rejected until m distinct edges are collected. Edges carry rate 1.0,
    use sample_rates to draw rates.
    """
    probs = seed.P.ravel() / seed.P.sum()
    place = 2 ** np.arange(seed.k - 1, -1, -1)
    chosen = {}
    draws = 0
    while len(chosen) < seed.m:
        cells = rng.choice(4, size=(seed.m, seed.k), p=probs)
        rows = (cells // 2) @ place
        cols = (cells % 2) @ place
        draws += seed.m
        for i, j in zip(rows.tolist(), cols.tolist()):
            if i != j and (i, j) not in chosen:
                chosen[(i, j)] = None
                if len(chosen) == seed.m:
                    break
    logger.debug("Kronecker sampler used %d cell draws for %d edges", draws, seed.m)
    src, dst = np.array(sorted(chosen)).T
    return DirectedNetwork(seed.num_nodes, src, dst, np.ones(seed.m))


def random_generate(n, m, rng):
    """uniform directed random network: m distinct non-self-loop edges drawn without replacement"""
    if n < 2:
        raise ValueError("A random network needs at least two nodes.")
    total = n * (n - 1)
    if m < 1 or m > total:
        raise ValueError(f"Edge count must lie in [1, {total}], got {m}.")
    idx = np.sort(rng.choice(total, size=m, replace=False))
    src = idx // (n - 1)
    rest = idx % (n - 1)
    dst = rest + (rest >= src)
    return DirectedNetwork(n, src, dst, np.ones(m))


def sample_rates(net, low, high, rng):
    """redraw every edge rate i.i.d. from Unif[low, high]; topology unchanged"""
    if low < 0:
        raise ValueError("Rate lower bound must be nonnegative.")
    if low >= high:
        raise ValueError(f"Rate bounds need low < high, got [{low}, {high}].")
    return net.with_rates(rng.uniform(low, high, size=net.num_edges))


def generate_network(model, nodes, edges, rate_low=0.1, rate_high=1.0, seed=0):
    """
    Generate a network of the given family with sampled rates.

    Parameters
    ----------

    model : {"hier", "core", "random"}
        Hierarchical or core-periphery Kronecker network, or uniform random.

    nodes : int
        Node count; a power of two for the Kronecker families.

    edges : int
        Exact number of edges.

    rate_low, rate_high : float, default 0.1, 1.0
        Edge rates are drawn from Unif[rate_low, rate_high].

    seed : int
        Seed of the random stream; the same seed gives the same network.
    """
    if model not in NETWORK_MODELS:
        raise ValueError(f"Unknown network model {model!r}; choose from {NETWORK_MODELS}.")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if model == "random":
        net = random_generate(nodes, edges, rng)
    else:
        k = int(round(np.log2(nodes))) if nodes > 0 else 0
        if k < 1 or 2 ** k != nodes:
            raise ValueError(f"Kronecker networks need a power-of-two node count, got {nodes}.")
        P = HIER_SEED if model == "hier" else CORE_SEED
        net = kronecker_generate(KroneckerSeed(P, k, edges), rng)
    net = sample_rates(net, rate_low, rate_high, rng)
    logger.info("Generated %s network with %d nodes and %d edges", model, net.n, net.num_edges)
    return net


def save_network(net, path):
    """write the tab-separated network format, rates with 17 significant digits"""
    lines = ["# src\tdst\talpha", f"n={net.n}"]
    lines += [f"{i}\t{j}\t{a:.17g}" for i, j, a in net.edges()]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_network(path):
    """read a network file; raises NetworkFormatError naming the bad line"""
    n = None
    edges = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if n is None:
                if not text.startswith("n="):
                    raise NetworkFormatError(lineno, "expected header 'n=<count>'")
                try:
                    n = int(text[2:])
                except ValueError:
                    raise NetworkFormatError(lineno, f"bad node count {text[2:]!r}") from None
                if n < 1:
                    raise NetworkFormatError(lineno, "node count must be positive")
                continue
            fields = text.split("\t")
            if len(fields) != 3:
                raise NetworkFormatError(lineno, "expected 'src<TAB>dst<TAB>alpha'")
            try:
                i, j, a = int(fields[0]), int(fields[1]), float(fields[2])
            except ValueError:
                raise NetworkFormatError(lineno, f"cannot parse {text!r}") from None
            if not (0 <= i < n and 0 <= j < n):
                raise NetworkFormatError(lineno, f"node id out of range [0, {n})")
            if i == j:
                raise NetworkFormatError(lineno, f"self-loop on node {i}")
            if not np.isfinite(a) or a < 0:
                raise NetworkFormatError(lineno, f"negative or non-finite rate {a}")
            if (i, j) in seen:
                raise NetworkFormatError(lineno, f"duplicate edge {i}->{j}")
            seen.add((i, j))
            edges.append((i, j, a))
    if n is None:
        raise NetworkFormatError(0, "missing header 'n=<count>'")
    return DirectedNetwork.from_edges(n, edges)
