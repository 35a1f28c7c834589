"""
Ground-truth infection probabilities.

Two exact methods for exponential delays on small networks (the master
equation over all 2^n infection configurations, and the closed system of
subset moments z = [x; e]) and a Monte Carlo estimator for everything else.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import sparse

from .cascade import DelayModel, sample_infection_times, validate_source

logger = logging.getLogger(__name__)

MAX_CTMC_NODES = 14
MAX_MOMENT_NODES = 12
DEFAULT_STEP = 1e-2
MASS_TOLERANCE = 1e-8


class OracleError(ValueError):
    """The requested exact oracle cannot serve this problem."""


def _check_exact(net, model, limit, method):
    model = DelayModel(model) if isinstance(model, str) else model
    if model is not None and not model.is_exponential:
        raise OracleError(f"The {method} oracle is exact only for exponential delays; use Monte Carlo.")
    if net.n > limit:
        raise OracleError(f"The {method} oracle supports at most {limit} nodes, got {net.n}.")


def _check_times(times):
    times = np.asarray(times, dtype=float).reshape(-1)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("Grid times must be nonnegative and nondecreasing.")
    return times


def _bits(n):
    masks = np.arange(2 ** n)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(float)


def rk4(drift, y0, times, step=DEFAULT_STEP, on_step=None):
    """
    Fixed-step classical Runge-Kutta from t = 0 through the given times.

    Each interval between consecutive grid times is split into equal
    substeps no longer than `step`; returns the states at the grid times.
    """
    y = np.array(y0, dtype=float)
    out = []
    t_prev = 0.0
    for t in times:
        gap = t - t_prev
        if gap > 0:
            nsub = max(1, int(np.ceil(gap / step - 1e-9)))
            h = gap / nsub
            for _ in range(nsub):
                k1 = drift(y)
                k2 = drift(y + 0.5 * h * k1)
                k3 = drift(y + 0.5 * h * k2)
                k4 = drift(y + h * k3)
                y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                if on_step is not None:
                    on_step(y)
        out.append(y.copy())
        t_prev = t
    return np.array(out)


@dataclass
class CtmcState:
    """Probability vector over the 2^n infection configurations, bitmask indexed."""

    probs: np.ndarray
    n: int

    @classmethod
    def point_mass(cls, n, source):
        probs = np.zeros(2 ** n)
        probs[sum(1 << i for i in source)] = 1.0
        return cls(probs, n)

    def marginals(self):
        return _bits(self.n).T @ self.probs


def ctmc_generator(net):
    """
    Sparse generator Q of the infection chain.

    Q[c, c | 1 << i] = sum_{j in c} alpha_{ji} for i not in c; every other
    off-diagonal entry is zero and rows sum to zero.
    """
    n = net.n
    bits = _bits(n)
    rates = bits @ net.matrix().T  # rates[c, i] = sum_j bits[c, j] * alpha_{ji}
    rates[bits > 0] = 0.0
    c, i = np.nonzero(rates)
    off = sparse.coo_matrix((rates[c, i], (c, c | (1 << i))), shape=(2 ** n, 2 ** n))
    diag = sparse.diags(-rates.sum(axis=1))
    return (off + diag).tocsr()


def ctmc_marginals(net, source, times, step=DEFAULT_STEP, model=None):
    """
    Exact infection probabilities from the Kolmogorov forward equations.

    Parameters
    ----------

    net : DirectedNetwork
        At most 14 nodes.

    source : iterable of int
        Source set; the chain starts from the point mass on it.

    times : array-like of float
        Nondecreasing observation times.

    step : float, default 1e-2
        Runge-Kutta step.

    model : DelayModel or str, optional
        Only exponential delays are accepted.

    Returns
    -------

    marginals : array, shape (len(times), n)
    """
    _check_exact(net, model, MAX_CTMC_NODES, "CTMC")
    source = validate_source(source, net.n)
    times = _check_times(times)
    QT = ctmc_generator(net).T.tocsr()

    def check_mass(p):
        total = p.sum()
        if abs(total - 1.0) > MASS_TOLERANCE:
            raise ArithmeticError(f"CTMC probability mass drifted to {total!r}")

    probs = rk4(lambda p: QT @ p, CtmcState.point_mass(net.n, source).probs, times, step, check_mass)
    return probs @ _bits(net.n)


@dataclass
class MomentState:
    """
    State z = [x; e] of the subset-moment system.

    x holds the first moments; e is indexed by bitmask over all subsets and
    is nonzero only on subsets of size two or more (e_I = x_I - prod_{i in I} x_i).
    """

    x: np.ndarray
    e: np.ndarray

    @property
    def n(self):
        return len(self.x)

    @property
    def dimension(self):
        return 2 ** self.n - 1

    @classmethod
    def initial(cls, n, source):
        x = np.zeros(n)
        x[list(source)] = 1.0
        return cls(x, np.zeros(2 ** n))


class _MomentSystem:
    """Vector field of z = [x; e] stored as one array over all bitmasks."""

    def __init__(self, net):
        n = self.n = net.n
        masks = np.arange(2 ** n)
        self.size = masks.size
        self.singletons = 1 << np.arange(n)
        popcount = _bits(n).sum(axis=1)
        self.higher = popcount >= 2
        self.has = [masks[((masks >> i) & 1) == 1] for i in range(n)]
        # raw moments X_I = E[prod_{i in I} X_i] follow the linear system
        # X_I' = sum_{i in I} sum_{j != i} alpha_ji (X_{I - i + j} - X_{I + j})
        A = net.matrix()
        rows, cols, vals = [], [], []
        for i in range(n):
            for j in range(n):
                a = A[i, j]
                if i == j or a == 0:
                    continue
                I = self.has[i]
                rows += [I, I]
                cols += [(I & ~(1 << i)) | (1 << j), I | (1 << j)]
                vals += [np.full(I.size, a), np.full(I.size, -a)]
        if rows:
            self.M = sparse.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.size, self.size),
            ).tocsr()
        else:
            self.M = sparse.csr_matrix((self.size, self.size))

    def products(self, x):
        y = np.ones(self.size)
        for i in range(self.n):
            y[self.has[i]] *= x[i]
        return y

    def pack(self, state):
        z = np.where(self.higher, state.e, 0.0)
        z[self.singletons] = state.x
        return z

    def unpack(self, z):
        return MomentState(z[self.singletons].copy(), np.where(self.higher, z, 0.0))

    def drift(self, z):
        x = z[self.singletons]
        y = self.products(x)
        X = np.where(self.higher, z + y, y)
        X[0] = 1.0
        dX = self.M @ X
        dx = dX[self.singletons]
        dy = np.zeros(self.size)
        for i in range(self.n):
            I = self.has[i]
            dy[I] += dx[i] * y[I ^ (1 << i)]
        dz = np.where(self.higher, dX - dy, 0.0)
        dz[self.singletons] = dx
        return dz


def moment_system_marginals(net, source, times, step=DEFAULT_STEP, model=None, return_states=False):
    """
    Exact infection probabilities from the closed subset-moment system.

    Integrates all 2^n - 1 components of z = [x; e] from z_0 = [chi_S; 0]
    with fixed-step RK4 and returns the x block at the grid times, shape
    (len(times), n). With return_states=True also returns the MomentState at
    every grid time.
    """
    _check_exact(net, model, MAX_MOMENT_NODES, "moment-system")
    source = validate_source(source, net.n)
    times = _check_times(times)
    system = _MomentSystem(net)
    z = rk4(system.drift, system.pack(MomentState.initial(net.n, source)), times, step)
    marginals = z[:, system.singletons]
    if return_states:
        return marginals, [system.unpack(row) for row in z]
    return marginals


def mc_marginals(net, model, source, times, num_samples, seed=0, n_jobs=1):
    """
    Monte Carlo infection probabilities with per-entry standard errors.

    Returns
    -------

    mean : array, shape (len(times), n)

    se : array of the same shape, or None when num_samples == 1
    """
    if num_samples < 1:
        raise ValueError("Need at least one Monte Carlo sample.")
    source = validate_source(source, net.n)
    times = _check_times(times)
    horizon = times[-1] if len(times) and times[-1] > 0 else 1.0
    samples = sample_infection_times(net, model, [source] * num_samples, horizon, seed, n_jobs=n_jobs)
    hits = observe_counts(samples, times)
    mean = hits / num_samples
    if num_samples == 1:
        return mean, None
    # binary samples: sum of squares equals sum
    var = (hits - num_samples * mean ** 2) / (num_samples - 1)
    return mean, np.sqrt(np.maximum(var, 0.0) / num_samples)


def observe_counts(samples, times):
    """number of samples infected by each grid time, shape (len(times), n)"""
    return np.stack([(samples <= t).sum(axis=0) for t in times]).astype(float)


def influence(marginals):
    """expected number of infected nodes, summed over the last axis"""
    return np.asarray(marginals, dtype=float).sum(axis=-1)


def marginals_frame(times, marginals, source=None, se=None):
    """long-format table t,node,prob (plus source and se columns when given)"""
    times = np.asarray(times, dtype=float)
    T, n = marginals.shape
    frame = pd.DataFrame({
        "t": np.repeat(times, n),
        "node": np.tile(np.arange(n), T),
        "prob": marginals.reshape(-1),
    })
    if se is not None:
        frame["se"] = se.reshape(-1)
    if source is not None:
        frame.insert(0, "source", ";".join(str(v) for v in source))
    return frame
