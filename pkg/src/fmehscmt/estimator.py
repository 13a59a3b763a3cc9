"""scikit-learn compatible wrappers around the network and the PCA."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import PRESETS
from .data import DatasetSplit, Sample
from .errors import ConfigError
from .evalkit import pca_project
from .model import HSCMTNet
from .training import TrainConfig, fit


def _images(X, size: Optional[int] = None) -> np.ndarray:
    """Validate an (N, S, S) or (N, 1, S, S) stack of [0, 1] images."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1 or X.shape[2] != X.shape[3]:
        raise ValueError(f"expected square single-channel images, got shape {X.shape}")
    if size is not None and X.shape[2] != size:
        raise ValueError(f"model expects {size}x{size} images, got {X.shape[2]}x{X.shape[3]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


class HSCMTClassifier(ClassifierMixin, BaseEstimator):
    """Two-stream hybrid CNN/transformer image classifier.

    ``X`` holds grayscale images scaled to [0, 1]. When ``X_val``/``y_val``
    are given to :meth:`fit`, the parameters with the best validation accuracy
    are kept; otherwise the final ones are.
    """

    def __init__(self, preset: str = "desk", epochs: int = 20, lr0: float = 1e-3,
                 batch_size: int = 16, weight_decay: float = 0.04, dropout: float = 0.3,
                 augment: bool = True, clip_norm: Optional[float] = 5.0, seed: int = 0,
                 threads: int = 1):
        self.preset = preset
        self.epochs = epochs
        self.lr0 = lr0
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.augment = augment
        self.clip_norm = clip_norm
        self.seed = seed
        self.threads = threads

    def _samples(self, X, y):
        idx = np.searchsorted(self.classes_, y)
        if np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise ValueError("validation labels contain classes unseen in training")
        return [Sample(img[0], int(lab), f"array/{i}") for i, (img, lab) in enumerate(zip(X, idx))]

    def fit(self, X, y, X_val=None, y_val=None):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        cfg = PRESETS[self.preset]()
        X = _images(X, cfg.input_size)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"{y.shape[0] if y.ndim else 0} labels for {X.shape[0]} images")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg.num_classes = len(self.classes_)
        cfg.dropout = self.dropout
        tcfg = TrainConfig(lr0=self.lr0, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.seed, dropout=self.dropout,
                           clip_norm=self.clip_norm, augment=self.augment)
        val = []
        if X_val is not None:
            val = self._samples(_images(X_val, cfg.input_size), np.asarray(y_val))
        data = DatasetSplit(self._samples(X, y), val, [], self.seed,
                            [str(c) for c in self.classes_])
        self.net_ = HSCMTNet(cfg, seed=self.seed)
        state = fit(self.net_, data, tcfg)
        if val and state.best_params is not None:
            self.net_.store.load_state(state.best_params)
        self.history_ = state.history
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = _images(X, self.net_.config.input_size)
        return self.net_.infer(X, threads=self.threads)[0]

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X):
        """Penultimate (pooled, gated) feature vectors."""
        check_is_fitted(self, "net_")
        X = _images(X, self.net_.config.input_size)
        return self.net_.infer(X, threads=self.threads)[1]


class JacobiPCA(TransformerMixin, BaseEstimator):
    """Principal component projection via cyclic Jacobi eigen-decomposition."""

    def __init__(self, n_components: int = 2, tol: float = 1e-10):
        self.n_components = n_components
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=3, ensure_min_features=2)
        res = pca_project(X, self.n_components, self.tol)
        self.mean_ = res.mean
        self.components_ = res.components
        self.explained_variance_ = res.explained_variance
        self.degenerate_ = res.degenerate
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.mean_) @ self.components_.T
