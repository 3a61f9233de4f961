"""Scikit-learn style wrappers around the density network and isotonic cleanup."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import net as cnn
from .augment import augment_dataset, tta_count
from .errors import ParameterError
from .grid import RasterGrid, sum_pool
from .isotonic import pava


class DensityRegressor(BaseEstimator, RegressorMixin):
    """Counts objects in images by regressing a density map.

    fit(X, y) takes a list of H x W x C images and a matching list of
    full-resolution density targets (each summing to the image's count);
    predict(X) returns per-image counts, optionally ensembled over the
    eight dihedral views.
    """

    def __init__(
        self,
        arch: str = "tuned",
        width_scale: float = 1.0,
        epochs: int = 15,
        lr: float = 3e-3,
        lr_decay: float = 1.0,
        batch_size: int = 8,
        momentum: float = 0.9,
        seed: int = 0,
        augment: bool = False,
        tta: str | None = "median",
        target_scale: float = 100.0,
    ):
        self.arch = arch
        self.width_scale = width_scale
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.momentum = momentum
        self.seed = seed
        self.augment = augment
        self.tta = tta
        self.target_scale = target_scale

    def _make_config(self, input_channels: int) -> cnn.NetConfig:
        if self.arch == "tuned":
            return cnn.tuned_config(input_channels, width_scale=self.width_scale, target_scale=self.target_scale)
        if self.arch == "ccnn":
            return cnn.ccnn_config(input_channels, target_scale=self.target_scale)
        raise ParameterError(f"unknown arch {self.arch!r}")

    def fit(self, X, y):
        if len(X) != len(y) or not len(X):
            raise ParameterError("X and y must be non-empty and the same length")
        first = np.asarray(X[0].data if isinstance(X[0], RasterGrid) else X[0])
        channels = 1 if first.ndim == 2 else first.shape[2]
        config = self._make_config(channels)
        init_seed, train_seed = np.random.SeedSequence(self.seed).spawn(2)
        model = cnn.init_model(config, seed=int(init_seed.generate_state(1)[0]))
        pairs = list(zip(X, y))
        if self.augment:
            pairs = augment_dataset(pairs)
        dataset = [
            (
                img,
                RasterGrid(
                    sum_pool(
                        RasterGrid.from_array(np.asarray(t.data if isinstance(t, RasterGrid) else t)),
                        config.pool_factor,
                    ).data
                    * self.target_scale
                ),
            )
            for img, t in pairs
        ]
        self.model_ = cnn.train(
            model,
            dataset,
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            seed=int(train_seed.generate_state(1)[0]),
            momentum=self.momentum,
            lr_decay=self.lr_decay,
        )
        self.loss_trace_ = list(self.model_.loss_trace)
        self.n_features_in_ = channels
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        counts = np.empty(len(X), dtype=np.float64)
        for i, img in enumerate(X):
            if self.tta:
                counts[i] = tta_count(self.model_, img, reduce=self.tta)
            else:
                counts[i] = cnn.predict_count(self.model_, img)
        return counts


class IsotonicCounts(BaseEstimator, TransformerMixin):
    """Monotone cleanup of a time-ordered count sequence (stateless)."""

    def fit(self, X, y=None):
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 2 and arr.shape[1] == 1:
            return np.asarray(pava(arr[:, 0]), dtype=np.float64)[:, None]
        if arr.ndim == 1:
            return np.asarray(pava(arr), dtype=np.float64)
        raise ParameterError("expected a 1-d sequence or single-column array of counts")
