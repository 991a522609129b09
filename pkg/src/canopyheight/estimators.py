"""Scikit-learn style estimators wrapping the patch-regression pipeline.

``CanopyHeightRegressor`` fits one heteroscedastic network on labeled patches;
``CanopyHeightEnsembleRegressor`` trains several members and fuses their
predictions by inverse-variance weighting. Both follow the fit/predict and
get_params/set_params conventions so they compose with sklearn tooling
(clone, pipelines, cross-validation over patch arrays).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .fusion import Ensemble, predict_patch_centers
from .model import IN_CHANNELS, ModelConfig, build, predict
from .synthdata import PATCH_SIZE, compute_norm_stats, denormalize_prediction, normalize_labels, normalize_patches
from .training import TrainConfig, compute_balance_weights, finetune_mean_head, train

_PATCH_SHAPE = (IN_CHANNELS, PATCH_SIZE, PATCH_SIZE)
_FLAT_FEATURES = int(np.prod(_PATCH_SHAPE))


def _validate_patches(X) -> np.ndarray:
    """Accept (n, 15, 15, 15) patch stacks or their flat (n, 3375) form."""
    X = np.asarray(X)
    if X.ndim == 2:
        if X.shape[1] != _FLAT_FEATURES:
            raise ValueError(
                f"flat input must have {_FLAT_FEATURES} features on axis 1 "
                f"(= {IN_CHANNELS}x{PATCH_SIZE}x{PATCH_SIZE}), got {X.shape[1]}"
            )
        X = X.reshape(-1, *_PATCH_SHAPE)
    if X.ndim != 4 or X.shape[1:] != _PATCH_SHAPE:
        raise ValueError(f"expected patches shaped (n, {IN_CHANNELS}, {PATCH_SIZE}, {PATCH_SIZE}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("patches contain non-finite values")
    return X.astype(np.float32, copy=False)


def _validate_targets(y, n) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != n:
        raise ValueError(f"y has {y.size} entries but X has {n} samples (axis 0)")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain non-finite values")
    return y


class CanopyHeightRegressor(BaseEstimator, RegressorMixin):
    """Single fully-convolutional network trained with the Gaussian NLL.

    predict returns the height at each patch center in meters; with
    ``return_std`` it also returns the predictive standard deviation.
    """

    def __init__(self, num_blocks=4, filters_per_block=32, iterations=2000, batch_size=32,
                 base_lr=1e-4, lr_drop_at=(0.4, 0.7), balanced_finetune=False,
                 finetune_iterations=300, random_state=0):
        self.num_blocks = num_blocks
        self.filters_per_block = filters_per_block
        self.iterations = iterations
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lr_drop_at = lr_drop_at
        self.balanced_finetune = balanced_finetune
        self.finetune_iterations = finetune_iterations
        self.random_state = random_state

    def fit(self, X, y):
        X = _validate_patches(X)
        y = _validate_targets(y, X.shape[0])
        self.stats_ = compute_norm_stats(X, y)
        patches = normalize_patches(X, self.stats_)
        labels = normalize_labels(y, self.stats_)
        config = ModelConfig(num_blocks=self.num_blocks, filters_per_block=self.filters_per_block)
        params = build(config, seed=self.random_state)
        train_config = TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                                   base_lr=self.base_lr, lr_drop_at=tuple(self.lr_drop_at),
                                   seed=self.random_state)
        self.log_ = train(params, patches, labels, train_config)
        if self.balanced_finetune:
            q = compute_balance_weights(y).weights_for(y)
            params, ft_log = finetune_mean_head(params, patches, labels, q,
                                                iterations=self.finetune_iterations,
                                                seed=self.random_state + 1,
                                                base_lr=self.base_lr,
                                                batch_size=self.batch_size)
            self.log_.extend(ft_log)
        self.params_ = params
        self.n_features_in_ = _FLAT_FEATURES
        return self

    def predict(self, X, return_std=False):
        if not hasattr(self, "params_"):
            raise RuntimeError("estimator is not fitted; call fit first")
        X = _validate_patches(X)
        center = PATCH_SIZE // 2
        norm = normalize_patches(X, self.stats_)
        pair = predict(self.params_, norm)
        mean, var = denormalize_prediction(pair.mean[:, 0, center, center],
                                           pair.variance[:, 0, center, center], self.stats_)
        if return_std:
            return mean, np.sqrt(var)
        return mean


class CanopyHeightEnsembleRegressor(BaseEstimator, RegressorMixin):
    """Deep ensemble: members differ only in their random initialization; the
    per-sample predictions are merged by inverse-variance weighting, and the
    returned std is the square root of the fused total variance."""

    def __init__(self, n_members=3, num_blocks=4, filters_per_block=32, iterations=2000,
                 batch_size=32, base_lr=1e-4, lr_drop_at=(0.4, 0.7), balanced_finetune=False,
                 finetune_iterations=300, random_state=0):
        self.n_members = n_members
        self.num_blocks = num_blocks
        self.filters_per_block = filters_per_block
        self.iterations = iterations
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lr_drop_at = lr_drop_at
        self.balanced_finetune = balanced_finetune
        self.finetune_iterations = finetune_iterations
        self.random_state = random_state

    def fit(self, X, y):
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")
        X = _validate_patches(X)
        y = _validate_targets(y, X.shape[0])
        self.stats_ = compute_norm_stats(X, y)
        patches = normalize_patches(X, self.stats_)
        labels = normalize_labels(y, self.stats_)
        config = ModelConfig(num_blocks=self.num_blocks, filters_per_block=self.filters_per_block)
        q = compute_balance_weights(y).weights_for(y) if self.balanced_finetune else None
        members = []
        for m in range(self.n_members):
            seed = self.random_state + m
            params = build(config, seed=seed)
            train_config = TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                                       base_lr=self.base_lr, lr_drop_at=tuple(self.lr_drop_at),
                                       seed=seed)
            train(params, patches, labels, train_config)
            if q is not None:
                params, _ = finetune_mean_head(params, patches, labels, q,
                                               iterations=self.finetune_iterations,
                                               seed=seed + 1000, base_lr=self.base_lr,
                                               batch_size=self.batch_size)
            members.append(params)
        self.ensemble_ = Ensemble(members=members, assignment_seed=self.random_state)
        self.n_features_in_ = _FLAT_FEATURES
        return self

    def predict(self, X, return_std=False):
        if not hasattr(self, "ensemble_"):
            raise RuntimeError("estimator is not fitted; call fit first")
        X = _validate_patches(X)
        mean, var = predict_patch_centers(self.ensemble_, X, self.stats_)
        if return_std:
            return mean, np.sqrt(var)
        return mean
