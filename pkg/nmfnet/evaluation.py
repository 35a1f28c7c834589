"""Accuracy metrics: infection-probability and influence errors, learned-structure quality."""
import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

DEFAULT_EDGE_THRESHOLD = 0.01


def _pair(x, x_star):
    x = np.asarray(x, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    if x.shape != x_star.shape:
        raise ValueError(f"Shape mismatch: prediction {x.shape}, reference {x_star.shape}.")
    return x, x_star


def prob_mae(x, x_star):
    """||x_t - x*_t||_1 / n for every t (every leading index)"""
    x, x_star = _pair(x, x_star)
    return np.abs(x - x_star).mean(axis=-1)


def influence_mae(x, x_star):
    """|1 . (x_t - x*_t)| for every t; signed errors cancel inside the sum"""
    x, x_star = _pair(x, x_star)
    return np.abs((x - x_star).sum(axis=-1))


def mae_table(times, predicted, reference):
    """
    Error bands over a set of test source sets.

    Parameters
    ----------

    times : array-like, shape (T,)

    predicted, reference : array, shape (num_sources, T, n)

    Returns
    -------

    DataFrame with columns t, prob_mae, prob_mae_std, influence_mae,
    influence_mae_std (mean and standard deviation over source sets).
    """
    predicted, reference = _pair(predicted, reference)
    if predicted.ndim != 3 or predicted.shape[1] != len(times):
        raise ValueError("Expected marginals of shape (num_sources, T, n) matching the time grid.")
    p = prob_mae(predicted, reference)
    s = influence_mae(predicted, reference)
    return pd.DataFrame({
        "t": np.asarray(times, dtype=float),
        "prob_mae": p.mean(axis=0),
        "prob_mae_std": p.std(axis=0),
        "influence_mae": s.mean(axis=0),
        "influence_mae_std": s.std(axis=0),
    })


def threshold_edges(A, eps=DEFAULT_EDGE_THRESHOLD):
    """
    Edge indicator of a learned rate matrix: E[i, j] = 1 iff A[j, i] >= eps.

    A is in the rate convention (A)_{ji} = alpha_{ij}, so E is A^T
    thresholded; the boundary is inclusive.
    """
    if eps <= 0:
        raise ValueError(f"Edge threshold must be positive, got {eps}.")
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("Rate matrix must be square.")
    return (A.T >= eps).astype(np.int8)


@dataclass
class StructureReport:
    """
    Quality of an inferred edge set against the ground truth.

    Metrics that are undefined (empty denominators, all-zero matrices) are
    None.
    """

    precision: float
    recall: float
    accuracy: float
    correlation: float
    threshold: float
    num_edges: int
    num_true_edges: int

    def to_dict(self):
        return asdict(self)


def _ratio(num, den):
    return float(num) / float(den) if den else None


def structure_metrics(E, E_star, A=None, A_star=None, threshold=None):
    """
    Prc, Rcl, Acc and Cor of an inferred network.

    Parameters
    ----------

    E, E_star : array of 0/1, shape (n, n)
        Inferred and true edge indicators, E[i, j] = 1 for edge i -> j.

    A, A_star : array, shape (n, n), optional
        Learned and true rate matrices for Cor; omitted means Cor is None.

    Notes
    -----

    Prc = |E & E*| / |E*| and Rcl = |E & E*| / |E| (denominators as used in
    the published tables); Acc = 1 - |E xor E*| / (|E| + |E*|);
    Cor = tr(A^T A*) / (||A||_F ||A*||_F).
    """
    E = np.asarray(E) != 0
    E_star = np.asarray(E_star) != 0
    if E.shape != E_star.shape:
        raise ValueError(f"Edge indicators differ in shape: {E.shape} vs {E_star.shape}.")
    common = int(np.count_nonzero(E & E_star))
    size, true_size = int(E.sum()), int(E_star.sum())
    differ = int(np.count_nonzero(E ^ E_star))
    accuracy = _ratio(differ, size + true_size)
    correlation = None
    if A is not None and A_star is not None:
        A, A_star = _pair(A, A_star)
        norm = np.linalg.norm(A) * np.linalg.norm(A_star)
        if norm > 0:
            correlation = float(np.sum(A * A_star) / norm)
    return StructureReport(
        precision=_ratio(common, true_size),
        recall=_ratio(common, size),
        accuracy=None if accuracy is None else 1.0 - accuracy,
        correlation=correlation,
        threshold=threshold,
        num_edges=size,
        num_true_edges=true_size,
    )


def evaluate_network(A, truth, eps=DEFAULT_EDGE_THRESHOLD):
    """structure metrics of a learned rate matrix against a DirectedNetwork"""
    A = np.asarray(A, dtype=float)
    if A.shape != (truth.n, truth.n):
        raise ValueError(f"Learned matrix has shape {A.shape}, the network has {truth.n} nodes.")
    report = structure_metrics(threshold_edges(A, eps), truth.indicator(), A, truth.matrix(), eps)
    logger.info(
        "Structure: Prc %s, Rcl %s, Acc %s, Cor %s",
        report.precision, report.recall, report.accuracy, report.correlation,
    )
    return report
