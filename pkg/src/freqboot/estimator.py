"""scikit-learn compatible wrapper around pretraining and feature extraction."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .data import TimeSeriesDataset, channel_stats
from .trainer import preset, pretrain


def check_timeseries(X, min_samples=2):
    """Validate a ``(n, channels, length)`` array and return it as float32.

    Two-dimensional input is read as single-channel series.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=[np.float32, np.float64],
                    ensure_min_samples=min_samples)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ValueError(f"expected an array of shape (n, channels, length), got {X.shape}")
    return np.ascontiguousarray(X, dtype=np.float32)


class FreqBootstrapEncoder(TransformerMixin, BaseEstimator):
    """Self-supervised encoder with TCN and MLP bootstrapping heads.

    ``fit`` pretrains on unlabeled series; ``transform`` returns the
    flattened frozen encoder representation, so the estimator can sit in
    front of any scikit-learn classifier.

    Parameters
    ----------
    preset : str
        Name of a configuration preset (``"synthetic"``, ``"HAR"``, ...).
    epochs, batch_size, lam, tau : optional
        Overrides of the preset values; ``None`` keeps the preset.
    overrides : dict, optional
        Further configuration overrides, nested like a JSON config file.
    normalize : bool
        Z-score each channel with statistics of the data passed to ``fit``.
    random_state : int
        Seed for every random draw made while fitting.
    """

    def __init__(self, preset="synthetic", epochs=None, batch_size=None, lam=None, tau=None,
                 overrides=None, normalize=True, random_state=0):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.lam = lam
        self.tau = tau
        self.overrides = overrides
        self.normalize = normalize
        self.random_state = random_state

    def _config(self):
        extra = dict(self.overrides or {})
        for key in ("epochs", "batch_size", "lam", "tau"):
            if getattr(self, key) is not None:
                extra[key] = getattr(self, key)
        extra["seed"] = int(self.random_state)
        return preset(self.preset, **extra)

    def _scale(self, X):
        if not self.normalize:
            return X
        return (X - self.mean_[None, :, None]) / self.std_[None, :, None]

    def fit(self, X, y=None):
        X = check_timeseries(X)
        self.n_channels_in_, self.length_in_ = X.shape[1:]
        if self.normalize:
            self.mean_, self.std_ = channel_stats(X)
        cfg = self._config()
        ds = TimeSeriesDataset(self._scale(X).astype(np.float32), np.zeros(len(X), dtype=np.int64), 1,
                               name="estimator", split="train")
        self.network_ = pretrain(cfg, ds)
        self.history_ = self.network_.history_
        self.config_hash_ = cfg.config_hash()
        self.n_features_out_ = self.network_.online.encoder.out_features
        return self

    def transform(self, X):
        check_is_fitted(self, "network_")
        X = check_timeseries(X, min_samples=1)
        if X.shape[1:] != (self.n_channels_in_, self.length_in_):
            raise ValueError(f"expected series of shape {(self.n_channels_in_, self.length_in_)}, "
                             f"got {X.shape[1:]}")
        x = torch.as_tensor(self._scale(X), dtype=torch.float32)
        return self.network_.embed(x).numpy()

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "network_")
        return np.array([f"e_{j}" for j in range(self.n_features_out_)], dtype=object)
