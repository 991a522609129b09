"""Ensemble inference over acquisition dates and per-pixel fusion.

Each date's image is processed by one randomly assigned ensemble member (or by
every member, behind a flag); the per-date (mean, variance) estimates are then
merged per pixel by inverse-variance weighting, with the fused variance given
by the weighted law of total variance:

    p_t   = (1 / var_t) / sum_j (1 / var_j)          over valid dates
    y     = sum_t p_t * mu_t
    Var(y) = sum_t p_t * mu_t^2 - y^2 + sum_t p_t * var_t

Pixels with no valid observation fuse to NaN (no-data).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import NetworkParams, predict
from .synthdata import NormStats, denormalize_prediction, normalize_patches

#: Variances are clamped here before inversion so a single overconfident
#: observation cannot claim infinite weight.
VARIANCE_FLOOR = 1e-6


def assign_members(n_dates: int, n_members: int, seed: int) -> np.ndarray:
    """Uniform independent member id per date, deterministic per seed."""
    if n_dates < 1 or n_members < 1:
        raise ValueError("n_dates and n_members must be >= 1")
    return np.random.default_rng(seed).integers(0, n_members, size=n_dates)


@dataclass
class ObservationStack:
    """Per-date predictions for one window, in meters."""

    means: np.ndarray  # (T, ...) float
    variances: np.ndarray  # (T, ...) float, positive where valid
    valid: np.ndarray  # (T, ...) bool
    member_ids: np.ndarray  # (T,) int
    dates: np.ndarray  # (T,) int


@dataclass
class FusedPrediction:
    mean: np.ndarray  # meters; NaN where no valid observation
    variance: np.ndarray  # meters^2; NaN where no valid observation
    n_valid: np.ndarray  # int, per pixel


def fuse(means: np.ndarray, variances: np.ndarray, valid: np.ndarray | None = None) -> FusedPrediction:
    """Per-pixel inverse-variance merge over the leading (date) axis."""
    m = np.asarray(means, dtype=np.float64)
    v = np.asarray(variances, dtype=np.float64)
    if m.shape != v.shape:
        raise ValueError(f"means shape {m.shape} does not match variances shape {v.shape}")
    if m.shape[0] < 1:
        raise ValueError("need at least one observation")
    if valid is None:
        valid = np.ones(m.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != m.shape:
            raise ValueError(f"valid mask shape {valid.shape} does not match observations {m.shape}")
    if np.any(v[valid] <= 0):
        raise ValueError("non-positive variance among valid observations")

    v_safe = np.where(valid, np.maximum(v, VARIANCE_FLOOR), 1.0)
    w = np.where(valid, 1.0 / v_safe, 0.0)
    total = w.sum(axis=0)
    has = total > 0
    p = np.divide(w, total[None], out=np.zeros_like(w), where=has[None])
    mean = (p * m).sum(axis=0)
    second = (p * m * m).sum(axis=0)
    within = (p * np.where(valid, v, 0.0)).sum(axis=0)
    variance = np.maximum(second - mean * mean, 0.0) + within
    mean = np.where(has, mean, np.nan)
    variance = np.where(has, variance, np.nan)
    return FusedPrediction(mean=mean, variance=variance, n_valid=valid.sum(axis=0))


def fuse_stack(stack: ObservationStack) -> FusedPrediction:
    return fuse(stack.means, stack.variances, stack.valid)


@dataclass
class Ensemble:
    """Trained members sharing one architecture; assignment seed fixes which
    member processes which acquisition date."""

    members: list[NetworkParams]
    assignment_seed: int = 0
    mode: str = "random"  # "random": one member per date; "all": every member per date
    stats: NormStats | None = field(default=None)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        cfg = self.members[0].config
        for m in self.members[1:]:
            if m.config != cfg:
                raise ValueError("ensemble members must share one architecture config")
        if self.mode not in ("random", "all"):
            raise ValueError(f"unknown assignment mode {self.mode!r}")

    @property
    def config(self):
        return self.members[0].config


def predict_tile(ensemble: Ensemble, images: np.ndarray, stats: NormStats,
                 valid: np.ndarray | None = None, dates: np.ndarray | None = None,
                 member_ids: np.ndarray | None = None) -> ObservationStack:
    """Run assigned members over per-date 15-channel images of one window.

    images: (T, 15, H, W) in raw units; outputs are denormalized to meters.
    ``member_ids`` overrides the per-date assignment (used by the tiler to
    keep one global assignment across windows). With mode "all" each date is
    processed by every member, yielding T*M observations.
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError("images must be (dates, channels, height, width)")
    T = images.shape[0]
    if images.shape[1] != ensemble.config.in_channels:
        raise ValueError(
            f"channel mismatch on axis 1: images have {images.shape[1]}, "
            f"model expects {ensemble.config.in_channels}"
        )
    if dates is None:
        dates = np.arange(T)
    if valid is None:
        valid = np.ones((T,) + images.shape[2:], dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (T,) + images.shape[2:]:
            raise ValueError(f"valid mask shape {valid.shape} does not match images extent")

    norm = normalize_patches(images.astype(np.float32), stats)
    M = len(ensemble.members)
    if ensemble.mode == "random":
        if member_ids is None:
            member_ids = assign_members(T, M, ensemble.assignment_seed)
        else:
            member_ids = np.asarray(member_ids)
            if member_ids.shape != (T,):
                raise ValueError(f"member_ids must have one entry per image, got shape {member_ids.shape}")
        obs_members = member_ids
        obs_dates = np.asarray(dates)
        obs_valid = valid
        obs_inputs = norm
    else:
        obs_members = np.repeat(np.arange(M), T)
        obs_dates = np.tile(np.asarray(dates), M)
        obs_valid = np.tile(valid, (M, 1, 1))
        obs_inputs = np.tile(norm, (M, 1, 1, 1))

    means = np.empty((obs_members.size,) + images.shape[2:], dtype=np.float64)
    variances = np.empty_like(means)
    for mid in np.unique(obs_members):
        sel = np.flatnonzero(obs_members == mid)
        pair = predict(ensemble.members[int(mid)], obs_inputs[sel])
        mean_m, var_m = denormalize_prediction(pair.mean[:, 0], pair.variance[:, 0], stats)
        means[sel] = mean_m
        variances[sel] = var_m
    return ObservationStack(means=means, variances=variances, valid=obs_valid,
                            member_ids=obs_members, dates=obs_dates)


def predict_patch_centers(ensemble: Ensemble, patches: np.ndarray, stats: NormStats,
                          batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Fused (mean, variance) in meters at patch centers, every member voting.

    Each patch counts as a single acquisition, so the ensemble contributes M
    observations per sample fused by the same inverse-variance rule.
    """
    patches = np.asarray(patches)
    n = patches.shape[0]
    cy, cx = patches.shape[2] // 2, patches.shape[3] // 2
    norm = normalize_patches(patches.astype(np.float32), stats)
    M = len(ensemble.members)
    means = np.empty((M, n), dtype=np.float64)
    variances = np.empty((M, n), dtype=np.float64)
    for mid, member in enumerate(ensemble.members):
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            pair = predict(member, norm[start:stop])
            mu, var = denormalize_prediction(pair.mean[:, 0, cy, cx], pair.variance[:, 0, cy, cx], stats)
            means[mid, start:stop] = mu
            variances[mid, start:stop] = var
    fused = fuse(means, variances)
    return fused.mean, fused.variance
