"""
Learning NMF parameters from cascades.

The gradient is computed by the discrete co-state recursion: with
p_T = -grad_{m_T} loss and p_t = p_{t+1} . grad_m g(m_t) - grad_{m_t} loss,
the gradient of the objective is -sum_t d_theta H(m_t, p_{t+1}; theta) with
H(m, p; theta) = p . g(m; theta) - r(theta) / T.
"""
import logging
import time
from dataclasses import dataclass, fields

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from .cascade import ObservationGrid, group_by_source, observe, substream
from .nmf_core import (
    DEFAULT_DELTA,
    DEFAULT_HIDDEN,
    VARIANTS,
    DivergenceError,
    forward,
    init_parameters,
    step_map,
    step_vjp,
)

logger = logging.getLogger(__name__)

REG_A = 1e-3
REG_OTHER = 1e-4

# how the backward pass treats clamped states: "exact" passes nothing, "inward"
# passes gradients that point back inside the bounds
CLAMP_GRADIENTS = ("exact", "inward")

# source groups per forward/backward pass; fixed so gradients never depend on n_jobs
GROUP_CHUNK = 64

# spawn-key namespaces of the training seed
SPLIT_STREAM = 0
INIT_STREAM = 1
SHUFFLE_STREAM = 2
GRADCHECK_STREAM = 3


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of train; batch_size None picks 100 (50 above 2048 nodes)."""

    variant: str = "exp"
    tau: int = 3
    kernel_terms: int = 1
    hidden: tuple = DEFAULT_HIDDEN
    correction: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    batch_size: int = None
    epochs: int = 200
    patience: int = 20
    seed: int = 0
    val_fraction: float = 0.2
    reg_A: float = REG_A
    reg_other: float = REG_OTHER
    clamp_delta: float = DEFAULT_DELTA
    horizon: int = 10
    init_rate: float = 0.1
    clamp_grad: str = "inward"
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown kernel variant {self.variant!r}; choose from {VARIANTS}.")
        if self.tau < 0:
            raise ValueError(f"tau must be nonnegative, got {self.tau}.")
        if self.kernel_terms < 1:
            raise ValueError(f"kernel_terms must be at least 1, got {self.kernel_terms}.")
        if any(w < 1 for w in self.hidden):
            raise ValueError(f"Hidden widths must be positive, got {self.hidden}.")
        if self.lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {self.lr}.")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1).")
        if self.eps_hat <= 0:
            raise ValueError("eps_hat must be positive.")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"Batch size must be positive, got {self.batch_size}.")
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be positive.")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}.")
        if self.reg_A < 0 or self.reg_other < 0:
            raise ValueError("Regularization weights must be nonnegative.")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError(f"horizon must be a positive integer, got {self.horizon}.")
        if self.clamp_grad not in CLAMP_GRADIENTS:
            raise ValueError(f"Unknown clamp gradient {self.clamp_grad!r}; choose from {CLAMP_GRADIENTS}.")
        if self.n_jobs == 0:
            raise ValueError("n_jobs must be nonzero.")

    def batch_size_for(self, n):
        if self.batch_size is not None:
            return self.batch_size
        return 50 if n > 2048 else 100

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def loss(x, targets, weights=None):
    """
    Negated log-likelihood (binary cross-entropy) of predicted trajectories.

    Parameters
    ----------

    x : array, shape (T, batch, n) or (T, n)
        Predicted x_1..x_T, entries inside (0, 1).

    targets : array of the same shape
        Observed states; fractional values (averaged cascades) are allowed.

    weights : array, shape (batch,), optional
        Per-trajectory weights, 1 / batch by default.
    """
    x, targets = _as_batch(x), _as_batch(targets)
    if x.shape != targets.shape:
        raise ValueError(f"Prediction shape {x.shape} does not match target shape {targets.shape}.")
    weights = _weights(weights, x.shape[1])
    ce = -(targets * np.log(x) + (1.0 - targets) * np.log1p(-x))
    return float(ce.sum(axis=(0, 2)) @ weights)


def _loss_grad(x, targets, weights):
    return -weights[:, None] * (targets / x - (1.0 - targets) / (1.0 - x))


def _as_batch(a):
    a = np.asarray(a, dtype=float)
    return a[:, None, :] if a.ndim == 2 else a


def _weights(weights, batch):
    if weights is None:
        return np.full(batch, 1.0 / batch)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (batch,):
        raise ValueError(f"Need one weight per trajectory ({batch}), got shape {weights.shape}.")
    return weights


def regularizer(params, reg_A=REG_A, reg_other=REG_OTHER):
    """r = reg_A |A|_1 + reg_other (|eta|_1 + |w|_1); masked entries of A count zero"""
    total = reg_A * np.abs(params.A * params.support()).sum()
    for name, arr in params.named_arrays().items():
        if name != "A":
            total += reg_other * np.abs(arr).sum()
    return float(total)


def regularizer_gradient(params, reg_A=REG_A, reg_other=REG_OTHER):
    """l1 subgradient with sign(0) = 0"""
    grads = {}
    for name, arr in params.named_arrays().items():
        if name == "A":
            grads[name] = reg_A * np.sign(arr) * params.support()
        else:
            grads[name] = reg_other * np.sign(arr)
    return grads


@dataclass
class GradientBundle:
    """Gradient of the training objective, one array per named parameter array."""

    arrays: dict

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.named_arrays().items()})

    @property
    def dA(self):
        return self.arrays["A"]

    @property
    def dEta(self):
        layers = sum(1 for k in self.arrays if k.startswith("W"))
        return [(self.arrays[f"W{l}"], self.arrays[f"b{l}"]) for l in range(layers)]

    @property
    def dKernel(self):
        return {k: v for k, v in self.arrays.items() if k in ("B", "C", "K")}

    def add(self, other):
        for k, v in other.items():
            self.arrays[k] = self.arrays[k] + v
        return self

    def max_abs(self):
        return max(float(np.abs(v).max(initial=0.0)) for v in self.arrays.values())


@dataclass
class CoStateTrajectory:
    """Co-states p_0..p_T, shape (T + 1, batch, blocks, n)."""

    p: np.ndarray

    @property
    def T(self):
        return self.p.shape[0] - 1


def _grid_targets(grid, trajectory):
    if isinstance(grid, ObservationGrid):
        targets = grid.targets()[:, None, :]
    elif isinstance(grid, (list, tuple)) and grid and isinstance(grid[0], ObservationGrid):
        targets = np.stack([g.targets() for g in grid], axis=1)
    else:
        targets = _as_batch(grid)
    expected = (trajectory.T, trajectory.batch_size, trajectory.states.shape[-1])
    if targets.shape != expected:
        raise ValueError(f"Targets have shape {targets.shape}, the trajectory needs {expected}.")
    return targets


def backward_gradient(
    trajectory, grid, params, weights=None, reg_A=REG_A, reg_other=REG_OTHER, return_costates=False, inward=False,
):
    """
    Gradient of mean loss + regularizer by the co-state recursion.

    Parameters
    ----------

    trajectory : Trajectory
        Forward pass run with keep_cache=True.

    grid : ObservationGrid, list of ObservationGrid, or array (T, batch, n)
        Targets for x_1..x_T.

    params : NmfParameters
        The parameters the trajectory was computed with.

    weights : array, shape (batch,), optional
        Loss weight of each trajectory, 1 / batch by default.

    inward : bool, default False
        Let clamped entries pass gradients that point back inside the
        bounds; the result is then a surrogate of the exact gradient.

    Returns
    -------

    GradientBundle, plus the CoStateTrajectory when return_costates is set.
    """
    T = trajectory.T
    grad = GradientBundle.zeros_like(params)
    if T == 0:
        costates = CoStateTrajectory(np.zeros_like(trajectory.states))
        return (grad, costates) if return_costates else grad
    if trajectory.caches is None:
        raise ValueError("Trajectory has no activation cache; rerun the forward pass with keep_cache=True.")
    targets = _grid_targets(grid, trajectory)
    weights = _weights(weights, trajectory.batch_size)
    states = trajectory.states
    A_eff = params.A * params.support()

    adjoints = [None] * (T + 1)
    adj = np.zeros_like(states[T])
    adj[:, 0] = _loss_grad(states[T, :, 0], targets[T - 1], weights)
    adjoints[T] = adj
    for t in range(T - 1, -1, -1):
        adj, step_grads = step_vjp(params, states[t], trajectory.caches[t], adj, A_eff, inward)
        grad.add(step_grads)
        if t > 0:
            adj[:, 0] += _loss_grad(states[t, :, 0], targets[t - 1], weights)
        adjoints[t] = adj
    # r / T enters every one of the T steps
    grad.add(regularizer_gradient(params, reg_A, reg_other))
    if return_costates:
        return grad, CoStateTrajectory(-np.stack(adjoints))
    return grad


def total_hamiltonian(trajectory, costates, params, reg_A=REG_A, reg_other=REG_OTHER):
    """sum_t p_{t+1} . g(m_t; params) - r(params), with m_t and p fixed"""
    T = trajectory.T
    if costates.T != T:
        raise ValueError(f"Co-states cover {costates.T} steps, the trajectory {T}.")
    if T == 0:
        return 0.0
    A_eff = params.A * params.support()
    total = 0.0
    for t in range(T):
        m_next, _ = step_map(params, trajectory.states[t], A_eff, step=t)
        total += float(np.sum(costates.p[t + 1] * m_next))
    return total - regularizer(params, reg_A, reg_other)


@dataclass
class OptimizerState:
    """Adam moment accumulators keyed like NmfParameters.named_arrays."""

    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def initial(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps_hat=1e-8):
        arrays = params.named_arrays()
        return cls(
            {k: np.zeros_like(v) for k, v in arrays.items()},
            {k: np.zeros_like(v) for k, v in arrays.items()},
            0, lr, beta1, beta2, eps_hat,
        )


def adam_step(opt, params, grad):
    """
    One bias-corrected Adam update, then A is projected onto A >= 0 and its support.

    Returns the new parameters and the new optimizer state; the inputs are
    left untouched.
    """
    arrays = params.named_arrays()
    grads = grad.arrays if isinstance(grad, GradientBundle) else grad
    if set(grads) != set(arrays):
        raise ValueError(f"Gradient arrays {sorted(grads)} do not match parameters {sorted(arrays)}.")
    step = opt.step + 1
    c1 = 1.0 - opt.beta1 ** step
    c2 = 1.0 - opt.beta2 ** step
    new, m_new, v_new = {}, {}, {}
    for k, theta in arrays.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise ValueError(f"Gradient of {k} has shape {g.shape}, expected {theta.shape}.")
        m_new[k] = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        v_new[k] = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        new[k] = theta - opt.lr * (m_new[k] / c1) / (np.sqrt(v_new[k] / c2) + opt.eps_hat)
    new["A"] = np.maximum(new["A"], 0.0) * params.support()
    state = OptimizerState(m_new, v_new, step, opt.lr, opt.beta1, opt.beta2, opt.eps_hat)
    return params.with_arrays(new), state


def _group_gradient(params, groups, T, inward=False):
    sources = [g[0] for g in groups]
    targets = np.stack([g[1] for g in groups], axis=1)
    weights = np.array([g[2] for g in groups])
    trajectory = forward(params, sources, T)
    value = loss(trajectory.x[1:], targets, weights)
    grad = backward_gradient(trajectory, targets, params, weights, reg_A=0.0, reg_other=0.0, inward=inward)
    return value, grad


def batch_gradient(params, groups, T, reg_A=REG_A, reg_other=REG_OTHER, n_jobs=1, inward=False):
    """
    Objective and gradient over weighted source groups.

    groups is a list of (source, mean targets of shape (T, n), weight). Groups
    are processed in fixed chunks and reduced left to right.
    """
    chunks = [groups[a:a + GROUP_CHUNK] for a in range(0, len(groups), GROUP_CHUNK)]
    if n_jobs == 1 or len(chunks) == 1:
        results = [_group_gradient(params, chunk, T, inward) for chunk in chunks]
    else:
        results = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_group_gradient)(params, chunk, T, inward) for chunk in chunks
        )
    total = GradientBundle.zeros_like(params)
    value = 0.0
    for chunk_value, chunk_grad in results:
        value += chunk_value
        total.add(chunk_grad.arrays)
    if T > 0:
        total.add(regularizer_gradient(params, reg_A, reg_other))
    return value + regularizer(params, reg_A, reg_other), total


def _batch_groups(cascades, indices, targets):
    """aggregate a mini-batch by source set: mean targets, weight = share of the batch"""
    members = {}
    for i in indices:
        members.setdefault(cascades[i].source, []).append(i)
    return [
        (source, targets[idx].mean(axis=0), len(idx) / len(indices))
        for source, idx in members.items()
    ]


def _split_sources(sources, val_fraction, rng):
    if len(sources) < 2:
        logger.warning("Only one source set available; validating on the training set")
        return list(sources), list(sources)
    if val_fraction == 0:
        return list(sources), list(sources)
    n_val = min(len(sources) - 1, max(1, int(round(val_fraction * len(sources)))))
    order = rng.permutation(len(sources))
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [sources[i] for i in train], [sources[i] for i in val]


def validation_mae(params, sources, probs, T):
    """mean absolute error of predicted infection probabilities over t = 1..T"""
    trajectory = forward(params, sources, T, keep_cache=False)
    return float(np.mean(np.abs(trajectory.x[1:] - probs)))


def train(cascades, config=None, mask=None, init=None, progress=False):
    """
    Train NMF parameters on a cascade dataset.

    Parameters
    ----------

    cascades : list of Cascade
        Training data; all cascades share the node count.

    config : TrainConfig, optional
        Hyperparameters; TrainConfig() by default.

    mask : array (n, n) of 0/1, optional
        Known support of A.

    init : NmfParameters, optional
        Starting point instead of a fresh initialization.

    Returns
    -------

    params : NmfParameters
        Parameters with the best validation MAE.

    log : pandas.DataFrame
        One row per epoch: epoch, train_loss, val_prob_mae, wall_seconds.
    """
    config = TrainConfig() if config is None else config
    if not cascades:
        raise ValueError("Training needs at least one cascade.")
    n = cascades[0].n
    if any(c.n != n for c in cascades):
        raise ValueError("All cascades must have the same node count.")
    T = int(config.horizon)
    grid = np.arange(1, T + 1)
    targets = np.stack([observe(c.times, grid) for c in cascades]).astype(float)

    groups = group_by_source(cascades)
    train_sources, val_sources = _split_sources(list(groups), config.val_fraction, substream(config.seed, SPLIT_STREAM))
    train_set = set(train_sources)
    train_idx = np.array([i for i, c in enumerate(cascades) if c.source in train_set])
    val_probs = np.stack(
        [targets[[i for i, c in enumerate(cascades) if c.source == s]].mean(axis=0) for s in val_sources],
        axis=1,
    )
    logger.info(
        "Training on %d cascades from %d source sets, validating on %d source sets",
        len(train_idx), len(train_sources), len(val_sources),
    )

    if init is None:
        params = init_parameters(
            n, config.variant, hidden=config.hidden, kernel_terms=config.kernel_terms, tau=config.tau,
            mask=mask, correction=config.correction, clamp_delta=config.clamp_delta,
            init_rate=config.init_rate, rng=substream(config.seed, INIT_STREAM),
        )
    else:
        params = init.copy()
    opt = OptimizerState.initial(params, config.lr, config.beta1, config.beta2, config.eps_hat)
    batch_size = config.batch_size_for(n)

    best_params, best_mae, stale = params.copy(), np.inf, 0
    rows = []
    start = time.perf_counter()
    for epoch in tqdm(range(1, config.epochs + 1), desc="training", disable=not progress):
        order = train_idx[substream(config.seed, SHUFFLE_STREAM, epoch).permutation(len(train_idx))]
        epoch_loss = 0.0
        for b, a in enumerate(range(0, len(order), batch_size)):
            idx = order[a:a + batch_size]
            try:
                value, grad = batch_gradient(
                    params, _batch_groups(cascades, idx, targets), T,
                    config.reg_A, config.reg_other, config.n_jobs, config.clamp_grad == "inward",
                )
                if not np.isfinite(value) or not np.isfinite(grad.max_abs()):
                    raise DivergenceError(None, "non-finite loss")
            except DivergenceError as exc:
                raise DivergenceError(
                    exc.step, f"training diverged at epoch {epoch}, batch {b}: {exc}"
                ) from exc
            logger.debug("epoch %d batch %d loss %.6g", epoch, b, value)
            epoch_loss += value * len(idx)
            params, opt = adam_step(opt, params, grad)
        mae = validation_mae(params, val_sources, val_probs, T)
        rows.append({
            "epoch": epoch,
            "train_loss": epoch_loss / len(train_idx),
            "val_prob_mae": mae,
            "wall_seconds": time.perf_counter() - start,
        })
        logger.info("epoch %d: train loss %.6g, validation MAE %.6g", epoch, rows[-1]["train_loss"], mae)
        if mae < best_mae:
            best_params, best_mae, stale = params.copy(), mae, 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("No validation improvement for %d epochs; stopping at epoch %d", stale, epoch)
                break
    return best_params, pd.DataFrame(rows, columns=["epoch", "train_loss", "val_prob_mae", "wall_seconds"])


def objective(params, sources, targets, T, weights=None, reg_A=REG_A, reg_other=REG_OTHER):
    """mean loss plus regularizer for one batch of source sets"""
    trajectory = forward(params, sources, T, keep_cache=False)
    value = loss(trajectory.x[1:], targets, weights) if T > 0 else 0.0
    return value + (regularizer(params, reg_A, reg_other) if T > 0 else 0.0)


def random_instance(rng, variant, n=None, T=None, hidden=(6, 5, 4), batch=2):
    """
    Random parameters, sources and binary targets for gradient checks.

    Parameters sit at least 0.01 away from zero so finite differences never
    straddle an l1 kink; the output layer is scaled down to keep states
    away from the clamp bounds.
    """
    n = int(rng.integers(2, 9)) if n is None else n
    T = int(rng.integers(1, 7)) if T is None else T
    params = init_parameters(
        n, variant, hidden=hidden, kernel_terms=int(rng.integers(1, 3)), tau=int(rng.integers(0, 3)),
        output_scale=1.0, rng=rng,
    )
    arrays = {}
    for name, arr in params.named_arrays().items():
        if name == "A":
            arrays[name] = (arr + 0.05) * params.support()
        else:
            arrays[name] = np.where(arr < 0, -1.0, 1.0) * (np.abs(arr) + 0.01)
    last = len(params.eta) - 1
    arrays[f"W{last}"] = 0.1 * arrays[f"W{last}"]
    arrays[f"b{last}"] = 0.1 * arrays[f"b{last}"]
    params = params.with_arrays(arrays)
    sources = [tuple(sorted(rng.choice(n, size=int(rng.integers(1, 3)), replace=False).tolist())) for _ in range(batch)]
    targets = (rng.random((T, batch, n)) < 0.5).astype(float)
    for b, s in enumerate(sources):
        targets[:, b, list(s)] = 1.0
    return params, sources, targets, T


def finite_difference_gradient(params, sources, targets, T, step=1e-5, reg_A=REG_A, reg_other=REG_OTHER):
    """central differences of the objective, one array per named parameter array"""
    arrays = params.named_arrays()
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            values = []
            for sign in (1.0, -1.0):
                shifted = {k: v.copy() for k, v in arrays.items()}
                shifted[name][idx] += sign * step
                values.append(objective(params.with_arrays(shifted), sources, targets, T, None, reg_A, reg_other))
            g[idx] = (values[0] - values[1]) / (2.0 * step)
        grads[name] = g
    return grads


def relative_error(analytic, numeric, floor=1e-4, cutoff=1e-8):
    """|a - fd| / max(|a|, |fd|, floor) on entries where either side exceeds cutoff"""
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric) / np.maximum(scale, floor)
    return float(np.where(scale > cutoff, err, 0.0).max(initial=0.0))


def gradient_check(seed=0, num_instances=20, step=1e-5):
    """
    Compare backward_gradient with central finite differences.

    Runs num_instances random problems (n <= 8, T <= 6), alternating the exp
    and window kernels. Returns the maximum relative error and a table with
    one row per instance and parameter array.
    """
    if num_instances < 1:
        raise ValueError("Need at least one gradient-check instance.")
    rows = []
    for k in range(num_instances):
        rng = substream(seed, GRADCHECK_STREAM, k)
        variant = VARIANTS[k % 2]
        params, sources, targets, T = random_instance(rng, variant)
        trajectory = forward(params, sources, T)
        analytic = backward_gradient(trajectory, targets, params).arrays
        numeric = finite_difference_gradient(params, sources, targets, T, step)
        for name in analytic:
            rows.append({
                "instance": k, "variant": variant, "n": params.n, "T": T, "array": name,
                "max_rel_error": relative_error(analytic[name], numeric[name]),
            })
    frame = pd.DataFrame(rows)
    worst = float(frame["max_rel_error"].max())
    logger.info("Gradient check over %d instances: max relative error %.3g", num_instances, worst)
    return worst, frame
