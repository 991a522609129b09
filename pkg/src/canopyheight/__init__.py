"""Probabilistic canopy-height regression on synthetic worlds.

Sparse-supervision training of a fully-convolutional heteroscedastic
regressor, deep-ensemble inference with inverse-variance fusion, calibration
metrics, and tiled map production.
"""

__version__ = "0.1.0"

from .estimators import CanopyHeightEnsembleRegressor, CanopyHeightRegressor
from .fusion import Ensemble, ObservationStack, assign_members, fuse, predict_patch_centers, predict_tile
from .metrics import balanced_metrics, calibration, filtering_curve, mae, me, rmse, rmv
from .model import (IN_CHANNELS, ModelConfig, NetworkParams, PAPER_CONFIG, PredictionPair,
                    build, encode_geo, forward, load_model, predict, receptive_field_radius, save_model)
from .synthdata import (FootprintDataset, FootprintSample, NormStats, SceneClass, SplitSpec,
                        WorldParams, WorldState, build_dataset, compute_norm_stats,
                        denormalize_prediction, generate_world, load_dataset, load_world,
                        normalize_labels, normalize_patches, render_observations, sample_footprints,
                        save_dataset, save_world, split_by_tile)
from .training import (BalanceWeights, TrainConfig, compute_balance_weights, finetune_mean_head,
                       gaussian_nll, train)

__all__ = [
    "CanopyHeightEnsembleRegressor",
    "CanopyHeightRegressor",
    "Ensemble",
    "ObservationStack",
    "assign_members",
    "fuse",
    "predict_patch_centers",
    "predict_tile",
    "balanced_metrics",
    "calibration",
    "filtering_curve",
    "mae",
    "me",
    "rmse",
    "rmv",
    "IN_CHANNELS",
    "ModelConfig",
    "NetworkParams",
    "PAPER_CONFIG",
    "PredictionPair",
    "build",
    "encode_geo",
    "forward",
    "load_model",
    "predict",
    "receptive_field_radius",
    "save_model",
    "FootprintDataset",
    "FootprintSample",
    "NormStats",
    "SceneClass",
    "SplitSpec",
    "WorldParams",
    "WorldState",
    "build_dataset",
    "compute_norm_stats",
    "denormalize_prediction",
    "generate_world",
    "load_dataset",
    "load_world",
    "normalize_labels",
    "normalize_patches",
    "render_observations",
    "sample_footprints",
    "save_dataset",
    "save_world",
    "split_by_tile",
    "BalanceWeights",
    "TrainConfig",
    "compute_balance_weights",
    "finetune_mean_head",
    "gaussian_nll",
    "train",
]
