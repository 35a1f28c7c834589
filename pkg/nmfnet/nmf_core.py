"""
Neural mean-field (NMF) dynamics.

The state x_t of infection probabilities evolves by the mean-field drift plus
a learned correction eps(x_t, h_t) fed by a memory state h_t:

    x_{t+1} = clamp(x_t + f(x_t; A) + eps(x_t, h_t; eta))

Two memory kernels are supported. "exp" keeps h_t as its own state,
h_{t+1} = h_t + sum_l (B_l x_{t+1} - C_l h_t). "window" keeps the last
tau + 1 states m_t = [x_t; ...; x_{t-tau}] and reads h_t = sum_s K_s x_{t-s}
with diagonal K_s. In both cases the augmented state m_t is stored as an
array of shape (batch, blocks, n), and g(m_t) = m_{t+1} is the one-step map.
"""
import json
import logging
from dataclasses import dataclass

import numpy as np

from .cascade import validate_source
from .version import __version__

logger = logging.getLogger(__name__)

VARIANTS = ("exp", "window")
DEFAULT_HIDDEN = (64, 64, 64)
DEFAULT_DELTA = 1e-6


class DivergenceError(ArithmeticError):
    """A forward pass produced a non-finite state."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


@dataclass
class NmfParameters:
    """
    Parameters theta = (A, eta, w) of the NMF dynamics.

    Parameters
    ----------

    A : array, shape (n, n)
        Nonnegative rate matrix, (A)_{ji} = alpha_{ij}, zero diagonal.

    eta : list of (W, b)
        Layers of the correction network; W has shape (out, in), the first
        layer reads [x; h] of width 2n and the last one writes width n.
        An empty list means eps = 0 (pure mean-field dynamics).

    kernel : dict
        "exp": {"B": (L, n, n), "C": (L, n, n)}; "window": {"K": (tau + 1, n)},
        K[s] being the diagonal of K_s.

    variant : {"exp", "window"}

    mask : array of 0/1, shape (n, n), optional
        Known support of A; A is zero wherever the mask is.

    clamp_delta : float, default 1e-6
        States are kept in [clamp_delta, 1 - clamp_delta].
    """

    A: np.ndarray
    eta: list
    kernel: dict
    variant: str = "exp"
    mask: np.ndarray = None
    clamp_delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown kernel variant {self.variant!r}; choose from {VARIANTS}.")
        self.A = np.asarray(self.A, dtype=float)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be a square matrix.")
        self.eta = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float)) for W, b in self.eta]
        if self.eta:
            if self.eta[0][0].shape[1] != 2 * n:
                raise ValueError(f"First correction layer must read 2n = {2 * n} inputs.")
            if self.eta[-1][0].shape[0] != n:
                raise ValueError(f"Last correction layer must write n = {n} outputs.")
            for (W, b), (W_next, _) in zip(self.eta, self.eta[1:] + [(None, None)]):
                if b.shape != (W.shape[0],) or (W_next is not None and W_next.shape[1] != W.shape[0]):
                    raise ValueError("Correction layer shapes are inconsistent.")
        self.kernel = {k: np.asarray(v, dtype=float) for k, v in self.kernel.items()}
        expected = ("B", "C") if self.variant == "exp" else ("K",)
        if tuple(sorted(self.kernel)) != expected:
            raise ValueError(f"{self.variant} kernel needs arrays {expected}, got {tuple(self.kernel)}.")
        if self.variant == "exp":
            if self.kernel["B"].ndim != 3 or self.kernel["B"].shape[1:] != (n, n):
                raise ValueError("Kernel B must have shape (L, n, n).")
            if self.kernel["C"].shape != self.kernel["B"].shape:
                raise ValueError("Kernels B and C must have the same shape.")
        elif self.kernel["K"].ndim != 2 or self.kernel["K"].shape[1] != n:
            raise ValueError("Kernel K must have shape (tau + 1, n).")
        if self.mask is not None:
            self.mask = (np.asarray(self.mask) != 0).astype(float)
            if self.mask.shape != (n, n):
                raise ValueError("Support mask must have shape (n, n).")
        if not 0 < self.clamp_delta < 0.5:
            raise ValueError("clamp_delta must lie in (0, 0.5).")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def correction(self):
        return bool(self.eta)

    @property
    def hidden(self):
        return tuple(W.shape[0] for W, _ in self.eta[:-1])

    @property
    def tau(self):
        return self.kernel["K"].shape[0] - 1 if self.variant == "window" else None

    @property
    def kernel_terms(self):
        return self.kernel["B"].shape[0] if self.variant == "exp" else None

    @property
    def blocks(self):
        return 2 if self.variant == "exp" else self.tau + 1

    def support(self):
        """where A may be nonzero: off-diagonal, inside the mask"""
        S = 1.0 - np.eye(self.n)
        return S if self.mask is None else S * self.mask

    def implied_rates(self):
        """
        Continuous-time rates -log(1 - A) whose unit-time infection
        probability under exponential delays equals A; inf where A >= 1.
        """
        A = self.A * self.support()
        with np.errstate(divide="ignore"):
            return -np.log1p(-np.minimum(A, 1.0))

    def named_arrays(self):
        arrays = {"A": self.A}
        for l, (W, b) in enumerate(self.eta):
            arrays[f"W{l}"] = W
            arrays[f"b{l}"] = b
        arrays.update(sorted(self.kernel.items()))
        return arrays

    def with_arrays(self, arrays):
        return NmfParameters(
            A=arrays["A"],
            eta=[(arrays[f"W{l}"], arrays[f"b{l}"]) for l in range(len(self.eta))],
            kernel={k: arrays[k] for k in self.kernel},
            variant=self.variant,
            mask=self.mask,
            clamp_delta=self.clamp_delta,
        )

    def copy(self):
        return self.with_arrays({k: v.copy() for k, v in self.named_arrays().items()})

    def check_invariants(self):
        for name, arr in self.named_arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"Parameter {name} has non-finite entries.")
        if np.any(self.A < 0):
            raise ValueError("A must be nonnegative.")
        if np.any(self.A * (1.0 - self.support()) != 0):
            raise ValueError("A must vanish on the diagonal and outside the support mask.")


def init_parameters(
    n, variant="exp", hidden=DEFAULT_HIDDEN, kernel_terms=1, tau=3, mask=None,
    correction=True, clamp_delta=DEFAULT_DELTA, init_rate=0.1, output_scale=0.0, rng=None,
):
    """
    Initial parameters: A ~ Unif[0, init_rate] on its support, correction
    weights ~ Unif[-r, r] with r = sqrt(6 / (fan_in + fan_out)) and zero
    biases, B = 0.1 I and C = 0.5 I (or K_0 = I, K_s = 0 for s > 0).

    The output layer weights are multiplied by output_scale; the default 0
    starts eps at zero so early steps follow the mean-field drift.
    """
    if n < 1:
        raise ValueError("Node count must be positive.")
    if kernel_terms < 1:
        raise ValueError("The exponential kernel needs at least one term.")
    if tau < 0:
        raise ValueError("Window length tau must be nonnegative.")
    rng = np.random.default_rng() if rng is None else rng
    params = NmfParameters(
        A=np.zeros((n, n)),
        eta=[],
        kernel=_initial_kernel(n, variant, kernel_terms, tau),
        variant=variant,
        mask=mask,
        clamp_delta=clamp_delta,
    )
    params.A = rng.uniform(0.0, init_rate, size=(n, n)) * params.support()
    if correction:
        widths = [2 * n] + [int(w) for w in hidden] + [n]
        if min(widths) < 1:
            raise ValueError("Hidden layer widths must be positive.")
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            r = np.sqrt(6.0 / (fan_in + fan_out))
            params.eta.append((rng.uniform(-r, r, size=(fan_out, fan_in)), np.zeros(fan_out)))
        W, b = params.eta[-1]
        params.eta[-1] = (output_scale * W, b)
    return params


def _initial_kernel(n, variant, kernel_terms, tau):
    if variant == "exp":
        eye = np.eye(n)
        return {"B": np.stack([0.1 * eye] * kernel_terms), "C": np.stack([0.5 * eye] * kernel_terms)}
    K = np.zeros((tau + 1, n))
    K[0] = 1.0
    return {"K": K}


def mean_field_drift(x, A):
    """f(x; A) = A x - diag(x) A x, for a single state or a batch of rows"""
    x = np.asarray(x, dtype=float)
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or x.shape[-1] != A.shape[0]:
        raise ValueError(f"Dimension mismatch between x {x.shape} and A {A.shape}.")
    return (1.0 - x) * (x @ A.T)


def _mlp_forward(z, eta):
    acts = [z]
    a = z
    for W, b in eta[:-1]:
        a = np.tanh(a @ W.T + b)
        acts.append(a)
    W, b = eta[-1]
    return a @ W.T + b, acts


def _mlp_backward(g_out, acts, eta):
    grads = [None] * len(eta)
    grads[-1] = (g_out.T @ acts[-1], g_out.sum(axis=0))
    g = g_out @ eta[-1][0]
    for l in range(len(eta) - 2, -1, -1):
        a = acts[l + 1]
        ga = g * (1.0 - a * a)
        grads[l] = (ga.T @ acts[l], ga.sum(axis=0))
        g = ga @ eta[l][0]
    return g, grads


def epsilon_net(x, h, eta):
    """correction network on [x; h]: tanh hidden layers, linear output of width n"""
    x = np.asarray(x, dtype=float)
    if not eta:
        return np.zeros_like(x)
    z = np.concatenate([x, np.asarray(h, dtype=float)], axis=-1)
    if z.shape[-1] != eta[0][0].shape[1]:
        raise ValueError(f"Correction input has width {z.shape[-1]}, expected {eta[0][0].shape[1]}.")
    return _mlp_forward(z, eta)[0]


def memory_readout(params, m):
    """h_t from the augmented state m_t"""
    if params.variant == "exp":
        return m[:, 1]
    return np.einsum("sn,bsn->bn", params.kernel["K"], m)


@dataclass
class StepCache:
    """Intermediate values of one step, kept for the backward pass."""

    u: np.ndarray
    h: np.ndarray
    x_next: np.ndarray
    side: np.ndarray
    activations: list

    @property
    def passed(self):
        """entries the clamp left unchanged"""
        return self.side == 0


def step_map(params, m, A_eff=None, step=None):
    """one application of g: m_t -> m_{t+1}; returns the new state and its cache"""
    if A_eff is None:
        A_eff = params.A * params.support()
    delta = params.clamp_delta
    x = m[:, 0]
    h = memory_readout(params, m)
    u = x @ A_eff.T
    raw = x + (1.0 - x) * u
    acts = None
    if params.eta:
        eps, acts = _mlp_forward(np.concatenate([x, h], axis=1), params.eta)
        raw = raw + eps
    if not np.all(np.isfinite(raw)):
        raise DivergenceError(step)
    x_next = np.clip(raw, delta, 1.0 - delta)
    # +1 clamped from above, -1 from below
    side = np.where(raw > 1.0 - delta, 1, np.where(raw < delta, -1, 0)).astype(np.int8)
    if params.variant == "exp":
        B = params.kernel["B"].sum(axis=0)
        C = params.kernel["C"].sum(axis=0)
        h_next = h + x_next @ B.T - h @ C.T
        if not np.all(np.isfinite(h_next)):
            raise DivergenceError(step)
        m_next = np.stack([x_next, h_next], axis=1)
    else:
        m_next = np.concatenate([x_next[:, None], m[:, :-1]], axis=1)
    return m_next, StepCache(u, h, x_next, side, acts)


def step_vjp(params, m, cache, adj_next, A_eff=None, inward=False):
    """
    Pull the adjoint of m_{t+1} back through one step.

    Returns the adjoint of m_t and the gradient of adj_next . g(m_t; theta)
    with respect to every parameter array. Clamped entries pass nothing,
    unless inward is set: then a clamped entry passes its gradient when a
    descent step would move it back inside the bounds.
    """
    if A_eff is None:
        A_eff = params.A * params.support()
    n = params.n
    x = m[:, 0]
    grads = {}
    gx_next = adj_next[:, 0].copy()
    if params.variant == "exp":
        ah = adj_next[:, 1]
        B = params.kernel["B"].sum(axis=0)
        C = params.kernel["C"].sum(axis=0)
        gx_next += ah @ B
        L = params.kernel_terms
        grads["B"] = np.broadcast_to(ah.T @ cache.x_next, (L, n, n)).copy()
        grads["C"] = np.broadcast_to(-(ah.T @ cache.h), (L, n, n)).copy()
        adj_h = ah - ah @ C
    through = cache.passed | (cache.side * gx_next > 0) if inward else cache.passed
    graw = gx_next * through
    gd = graw * (1.0 - x)
    gx = graw - cache.u * graw + gd @ A_eff
    grads["A"] = (gd.T @ x) * params.support()
    if params.eta:
        gz, eta_grads = _mlp_backward(graw, cache.activations, params.eta)
        for l, (dW, db) in enumerate(eta_grads):
            grads[f"W{l}"] = dW
            grads[f"b{l}"] = db
        gx = gx + gz[:, :n]
        gh = gz[:, n:]
    else:
        gh = np.zeros_like(gx)
    if params.variant == "exp":
        adj = np.stack([gx, adj_h + gh], axis=1)
    else:
        K = params.kernel["K"]
        adj = K[None] * gh[:, None, :]
        adj[:, 0] += gx
        adj[:, :-1] += adj_next[:, 1:]
        grads["K"] = (gh[:, None, :] * m).sum(axis=0)
    return adj, grads


@dataclass
class Trajectory:
    """
    Forward pass for a batch of source sets.

    states has shape (T + 1, batch, blocks, n); block 0 is x_t. h holds the
    memory readout h_t, shape (T + 1, batch, n). caches holds one StepCache
    per step, or None when the pass was run without caching.
    """

    variant: str
    sources: tuple
    states: np.ndarray
    h: np.ndarray
    caches: list = None

    @property
    def x(self):
        return self.states[:, :, 0]

    @property
    def T(self):
        return self.states.shape[0] - 1

    @property
    def batch_size(self):
        return self.states.shape[1]

    def marginals(self, index=0):
        """predicted infection probabilities for t = 1..T, shape (T, n)"""
        return self.x[1:, index]


def initial_state(params, sources):
    """m_0 = [clamp(chi_S); 0; ...] for every source set"""
    delta = params.clamp_delta
    m = np.zeros((len(sources), params.blocks, params.n))
    for b, source in enumerate(sources):
        m[b, 0, list(source)] = 1.0
    m[:, 0] = np.clip(m[:, 0], delta, 1.0 - delta)
    return m


def forward(params, sources, T, keep_cache=True):
    """run the recurrence for a batch of source sets over T steps"""
    if int(T) != T or T < 0:
        raise ValueError(f"Number of steps must be a nonnegative integer, got {T}.")
    sources = tuple(validate_source(s, params.n) for s in sources)
    if not sources:
        raise ValueError("Need at least one source set.")
    A_eff = params.A * params.support()
    m = initial_state(params, sources)
    states, hs, caches = [m], [memory_readout(params, m)], []
    for t in range(int(T)):
        m, cache = step_map(params, m, A_eff, step=t)
        states.append(m)
        hs.append(memory_readout(params, m))
        if keep_cache:
            caches.append(cache)
    return Trajectory(params.variant, sources, np.stack(states), np.stack(hs), caches if keep_cache else None)


def forward_exp_kernel(params, source, T, keep_cache=True):
    """NMF recurrence with the exponential memory kernel for one source set"""
    if params.variant != "exp":
        raise ValueError("Parameters do not carry an exponential memory kernel.")
    return forward(params, [source], T, keep_cache)


def forward_window_kernel(params, source, T, keep_cache=True):
    """NMF recurrence with the truncated window kernel for one source set"""
    if params.variant != "window":
        raise ValueError("Parameters do not carry a window memory kernel.")
    return forward(params, [source], T, keep_cache)


def estimate_influence(params, source, T):
    """sigma(t; S) for t = 1..T from one forward pass"""
    return forward(params, [source], T, keep_cache=False).marginals(0).sum(axis=1)


def save_checkpoint(path, params, training_meta=None):
    doc = {
        "version": __version__,
        "n": params.n,
        "variant": params.variant,
        "layer_sizes": list(params.hidden),
        "correction": params.correction,
        "clamp_delta": params.clamp_delta,
        "arrays": {
            "A": params.A.tolist(),
            "eta": [{"W": W.tolist(), "b": b.tolist()} for W, b in params.eta],
            "kernel": {k: v.tolist() for k, v in sorted(params.kernel.items())},
        },
        "mask": None if params.mask is None else params.mask.astype(int).tolist(),
        "training_meta": training_meta or {},
    }
    if params.variant == "exp":
        doc["L"] = params.kernel_terms
    else:
        doc["tau"] = params.tau
    # json writes the shortest repr of each float, which reads back bit-identical
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")


def load_checkpoint(path):
    """read a checkpoint; returns (NmfParameters, training_meta)"""
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    try:
        arrays = doc["arrays"]
        params = NmfParameters(
            A=np.array(arrays["A"], dtype=float),
            eta=[(np.array(layer["W"], dtype=float), np.array(layer["b"], dtype=float)) for layer in arrays["eta"]],
            kernel={k: np.array(v, dtype=float) for k, v in arrays["kernel"].items()},
            variant=doc["variant"],
            mask=None if doc.get("mask") is None else np.array(doc["mask"]),
            clamp_delta=float(doc["clamp_delta"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"Malformed checkpoint {path}: {exc}") from None
    if params.n != doc.get("n", params.n):
        raise ValueError(f"Checkpoint declares n={doc['n']} but A has {params.n} rows.")
    return params, doc.get("training_meta", {})
