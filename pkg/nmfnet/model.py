"""Estimator-style wrapper over the functional NMF core."""
import logging
from dataclasses import fields

import numpy as np
import pandas as pd

from .cascade import load_dataset
from .nmf_core import forward, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

logger = logging.getLogger(__name__)


class NeuralMeanField:
    """
    Neural mean-field model of a diffusion network.

    Keyword arguments are the TrainConfig fields (variant, tau, hidden, lr,
    epochs, seed, ...). After fit, `params` holds the learned parameters and
    `log_` the per-epoch training log.

    Examples
    --------

    >>> model = NeuralMeanField(variant="exp", epochs=50, seed=1)
    >>> model.fit(cascades)
    >>> model.predict((0, 3), T=10)   # (10, n) infection probabilities
    """

    def __init__(self, mask=None, **config):
        known = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(config) - known)
        if unknown:
            raise ValueError(f"Unknown training options: {', '.join(unknown)}.")
        self.config = TrainConfig(**config)
        self.mask = mask
        self.params = None
        self.log_ = None
        self.meta_ = {}

    def fit(self, cascades):
        if isinstance(cascades, str):
            cascades = load_dataset(cascades, self.config.horizon)
        self.params, self.log_ = train(cascades, self.config, self.mask)
        final = float(self.log_["val_prob_mae"].min()) if len(self.log_) else None
        self.meta_ = {
            "seed": self.config.seed,
            "epochs": int(len(self.log_)),
            "final_val_mae": final,
            "horizon": int(self.config.horizon),
        }
        return self

    def _check_fitted(self):
        if self.params is None:
            raise ValueError("Model is not fitted; call fit or load first.")

    def predict(self, source, T=None):
        """infection probabilities x_1..x_T, shape (T, n)"""
        self._check_fitted()
        T = self.config.horizon if T is None else T
        return forward(self.params, [source], T, keep_cache=False).marginals(0)

    def predict_frame(self, source, T=None):
        marginals = self.predict(source, T)
        steps, n = marginals.shape
        return pd.DataFrame({
            "t": np.repeat(np.arange(1, steps + 1), n),
            "node": np.tile(np.arange(n), steps),
            "prob": marginals.reshape(-1),
        })

    def influence(self, source, T=None):
        """sigma(t; S) for t = 1..T"""
        return self.predict(source, T).sum(axis=1)

    @property
    def rate_matrix(self):
        self._check_fitted()
        return self.params.A * self.params.support()

    def save(self, path):
        self._check_fitted()
        save_checkpoint(path, self.params, self.meta_)

    @classmethod
    def load(cls, path):
        params, meta = load_checkpoint(path)
        config = {"variant": params.variant, "hidden": params.hidden, "correction": params.correction,
                  "clamp_delta": params.clamp_delta}
        if params.variant == "window":
            config["tau"] = params.tau
        else:
            config["kernel_terms"] = params.kernel_terms
        if "horizon" in meta:
            config["horizon"] = meta["horizon"]
        model = cls(mask=params.mask, **config)
        model.params = params
        model.meta_ = meta
        return model
