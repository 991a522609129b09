"""Sparse-supervision training: masked Gaussian NLL, step-decay schedule,
frequency-balanced sample weights, and mean-head-only fine-tuning.

The loss is evaluated only at labeled pixels; unlabeled pixels contribute
neither loss nor gradient. Heights are binned into 1 m intervals for the
imbalance correction, and each sample is weighted by the square root of its
bin's inverse frequency, normalized over occupied bins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import NetworkParams, forward
from .optim import AdamState, adam_step, grad_norm, zero_grads
from .tensor import Tensor, add, exp, masked_select, mul, neg, square, sub, tmean, tsum


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 32
    base_lr: float = 1e-4
    lr_drop_factor: float = 0.1
    lr_drop_at: tuple = (0.4, 0.7)
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 < self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must be in (0, 1]")
        if any(not 0 < f < 1 for f in self.lr_drop_at):
            raise ValueError("lr drops must fall strictly inside the run")
        if tuple(sorted(self.lr_drop_at)) != tuple(self.lr_drop_at):
            raise ValueError("lr_drop_at must be sorted")

    def drop_steps(self) -> tuple[int, ...]:
        return tuple(round(f * self.iterations) for f in self.lr_drop_at)

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``; drops apply after each drop step."""
        lr = self.base_lr
        for d in self.drop_steps():
            if step > d:
                lr *= self.lr_drop_factor
        return lr


def gaussian_nll(mean: Tensor, log_var: Tensor, labels: np.ndarray, mask: np.ndarray,
                 weights: np.ndarray | None = None) -> Tensor:
    """Masked Gaussian negative log likelihood.

    loss = (1/N) * sum over labeled pixels of
           (mean - y)^2 / (2 sigma^2) + 0.5 * log sigma^2,
    with optional per-pixel weights applied as a weighted mean (weights are
    normalized to sum to one, so uniform weights reduce to the plain mean).
    """
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise TypeError("mask must be boolean")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty label mask: no labeled pixels in the batch")
    labels = np.asarray(labels)
    if labels.shape != mask.shape:
        raise ValueError(f"labels shape {labels.shape} does not match mask shape {mask.shape}")
    mu = masked_select(mean, mask)
    s = masked_select(log_var, mask)
    y = labels[mask].astype(mean.dtype)
    d = sub(mu, y)
    per_pixel = add(mul(mul(square(d), 0.5), exp(neg(s))), mul(0.5, s))
    if weights is None:
        return tmean(per_pixel)
    w = np.asarray(weights)[mask].astype(np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("weights over labeled pixels must have a positive sum")
    return tsum(mul(per_pixel, (w / total).astype(mean.dtype)))


@dataclass
class BalanceWeights:
    """Square-root inverse-frequency weights over 1 m height bins.

    ``bin_weights`` follow q = sqrt(1/N_k) / sum_j sqrt(1/N_j) over occupied
    bins, so they sum to one; empty bins never enter the denominator.
    """

    bin_width: float
    bin_ids: np.ndarray  # sorted occupied bin indices
    counts: np.ndarray
    bin_weights: np.ndarray

    def weights_for(self, labels: np.ndarray) -> np.ndarray:
        bins = np.floor(np.asarray(labels, dtype=np.float64) / self.bin_width).astype(np.int64)
        pos = np.searchsorted(self.bin_ids, bins)
        bad = (pos >= self.bin_ids.size) | (self.bin_ids[np.minimum(pos, self.bin_ids.size - 1)] != bins)
        if np.any(bad):
            raise ValueError(f"label {np.asarray(labels)[bad][0]} falls in a bin with no recorded count")
        return self.bin_weights[pos]


def compute_balance_weights(labels: np.ndarray, bin_width: float = 1.0) -> BalanceWeights:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("cannot balance an empty label set")
    bins = np.floor(labels / bin_width).astype(np.int64)
    ids, counts = np.unique(bins, return_counts=True)
    raw = np.sqrt(1.0 / counts)
    return BalanceWeights(bin_width=bin_width, bin_ids=ids, counts=counts, bin_weights=raw / raw.sum())


def _center_mask(batch: int, height: int, width: int) -> np.ndarray:
    mask = np.zeros((batch, 1, height, width), dtype=bool)
    mask[:, 0, height // 2, width // 2] = True
    return mask


def train(params: NetworkParams, patches: np.ndarray, labels: np.ndarray, config: TrainConfig,
          sample_weights: np.ndarray | None = None, head_only: bool = False,
          log_path=None, checkpoint_fn=None) -> list[dict]:
    """Train (in place) on normalized patches labeled at their centers.

    Returns the per-step log records (step, loss, lr, grad_norm); aborts with
    a diagnostic if the loss diverges. With ``head_only`` only the mean-head
    parameters receive gradients and updates.
    """
    n = patches.shape[0]
    if n < 1:
        raise ValueError("empty training set")
    if labels.shape[0] != n:
        raise ValueError("labels do not align with patches")
    if sample_weights is not None and sample_weights.shape[0] != n:
        raise ValueError("sample_weights do not align with patches")

    trainable = dict(params.tensors)
    frozen_flags = {}
    if head_only:
        trainable = {k: params.tensors[k] for k in NetworkParams.MEAN_HEAD}
        for name, t in params.tensors.items():
            if name not in trainable:
                frozen_flags[name] = t.requires_grad
                t.requires_grad = False

    state = AdamState(learning_rate=config.base_lr)
    rng = np.random.default_rng(config.seed)
    _, _, ph, pw = patches.shape
    mask = _center_mask(config.batch_size, ph, pw)
    log: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for step in range(1, config.iterations + 1):
            idx = rng.integers(0, n, size=config.batch_size)
            xb = Tensor(patches[idx])
            yb = np.zeros(mask.shape, dtype=np.float32)
            yb[mask] = labels[idx]
            wb = None
            if sample_weights is not None:
                wb = np.zeros(mask.shape, dtype=np.float64)
                wb[mask] = sample_weights[idx]
            mean, log_var = forward(params, xb)
            loss = gaussian_nll(mean, log_var, yb, mask, weights=wb)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise RuntimeError(
                    f"training diverged at step {step}: loss={loss_val} (lr={config.lr_at(step)})"
                )
            zero_grads(trainable)
            loss.backward()
            gnorm = grad_norm(trainable)
            lr = config.lr_at(step)
            adam_step(trainable, state, lr=lr)
            record = {"step": step, "loss": loss_val, "lr": lr, "grad_norm": gnorm}
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
            if checkpoint_fn and config.checkpoint_every and step % config.checkpoint_every == 0:
                checkpoint_fn(step, params)
    finally:
        if log_file:
            log_file.close()
        for name, flag in frozen_flags.items():
            params.tensors[name].requires_grad = flag
    return log


def finetune_mean_head(params: NetworkParams, patches: np.ndarray, labels: np.ndarray,
                       sample_weights: np.ndarray, iterations: int, seed: int,
                       base_lr: float = 1e-4, batch_size: int = 32,
                       log_path=None) -> tuple[NetworkParams, list[dict]]:
    """Balanced fine-tuning of the mean head only; the input params are
    untouched and every non-head parameter of the result is bit-identical.

    ``patches``/``labels`` are normalized; ``sample_weights`` are the Eq-style
    balance weights computed from the labels in meters. The learning rate is
    held constant (no drops) over the fine-tuning run.
    """
    tuned = params.copy()
    config = TrainConfig(iterations=iterations, batch_size=batch_size, base_lr=base_lr,
                         lr_drop_at=(), seed=seed)
    log = train(tuned, patches, labels, config, sample_weights=sample_weights,
                head_only=True, log_path=log_path)
    return tuned, log
