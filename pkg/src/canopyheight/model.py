"""Fully-convolutional height regressor: stem, residual separable-conv blocks,
and twin 1x1 heads for mean height and log-variance.

The network never downsamples, so it trains on 15x15 patches and runs on
arbitrarily sized windows. The variance head emits s = log(sigma^2); the
variance is exp(clamp(s, -10, 10)), strictly positive for finite inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .tensor import Tensor, clamp, conv2d, exp, no_grad, parameter, relu, separable_conv2d

SPECTRAL_CHANNELS = 12
GEO_CHANNELS = 3
IN_CHANNELS = SPECTRAL_CHANNELS + GEO_CHANNELS

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    filters_per_block: int = 32
    in_channels: int = IN_CHANNELS

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.filters_per_block < 1:
            raise ValueError("filters_per_block must be >= 1")
        if self.in_channels != SPECTRAL_CHANNELS + GEO_CHANNELS:
            raise ValueError(f"in_channels must be {SPECTRAL_CHANNELS + GEO_CHANNELS} (12 spectral + 3 geo)")


#: Full-size configuration: 8 blocks of 256 filters.
PAPER_CONFIG = ModelConfig(num_blocks=8, filters_per_block=256)


@dataclass
class PredictionPair:
    """Per-pixel mean height and variance (same spatial dims as the input)."""

    mean: np.ndarray
    variance: np.ndarray


class NetworkParams:
    """All learnable weights of one ensemble member, as named tensors.

    The mean head ('mean_head.*') and variance head ('var_head.*') are
    disjoint from the trunk so fine-tuning can update the mean head alone.
    """

    MEAN_HEAD = ("mean_head.w", "mean_head.b")

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig, seed: int):
        self.tensors = tensors
        self.config = config
        self.seed = seed

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "NetworkParams":
        tensors = {k: parameter(t.data.copy(), name=k, dtype=t.data.dtype) for k, t in self.tensors.items()}
        return NetworkParams(tensors, self.config, self.seed)

    def astype(self, dtype) -> "NetworkParams":
        tensors = {k: parameter(t.data.astype(dtype), name=k, dtype=dtype) for k, t in self.tensors.items()}
        return NetworkParams(tensors, self.config, self.seed)


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def build(config: ModelConfig, seed: int, dtype=np.float32) -> NetworkParams:
    """Deterministic He-initialized parameter set for ``config`` and ``seed``."""
    rng = np.random.default_rng(seed)
    F = config.filters_per_block
    C = config.in_channels
    tensors: dict[str, Tensor] = {}

    def par(name, data):
        tensors[name] = parameter(data, name=name, dtype=dtype)

    par("stem.w", _he_normal(rng, (F, C, 3, 3), C * 9, dtype))
    par("stem.b", np.zeros(F, dtype=dtype))
    for i in range(config.num_blocks):
        for j in (1, 2):
            par(f"block{i}.conv{j}.dw", _he_normal(rng, (F, 1, 3, 3), 9, dtype))
            # The closing pointwise conv of each block starts 10x smaller so
            # the residual sum does not compound activation variance per block.
            scale = 0.1 if j == 2 else 1.0
            par(f"block{i}.conv{j}.pw", scale * _he_normal(rng, (F, F, 1, 1), F, dtype))
            par(f"block{i}.conv{j}.b", np.zeros(F, dtype=dtype))
    par("mean_head.w", _he_normal(rng, (1, F, 1, 1), F, dtype))
    par("mean_head.b", np.zeros(1, dtype=dtype))
    par("var_head.w", _he_normal(rng, (1, F, 1, 1), F, dtype))
    par("var_head.b", np.zeros(1, dtype=dtype))
    return NetworkParams(tensors, config, seed)


def forward(params: NetworkParams, x: Tensor) -> tuple[Tensor, Tensor]:
    """Run the network; returns (mean, log_variance), each [B, 1, H, W].

    The log-variance is already clamped to [LOGVAR_MIN, LOGVAR_MAX].
    """
    if x.data.ndim != 4:
        raise ValueError(f"input must be 4-D (batch, channels, height, width), got {x.data.ndim}-D")
    if x.data.shape[1] != params.config.in_channels:
        raise ValueError(
            f"channel mismatch on axis 1: input has {x.data.shape[1]}, "
            f"model expects {params.config.in_channels}"
        )
    if x.data.shape[2] < 3 or x.data.shape[3] < 3:
        raise ValueError("spatial dims must be >= 3")
    t = params.tensors
    h = relu(conv2d(x, t["stem.w"], t["stem.b"]))
    for i in range(params.config.num_blocks):
        y = relu(separable_conv2d(h, t[f"block{i}.conv1.dw"], t[f"block{i}.conv1.pw"], t[f"block{i}.conv1.b"]))
        y = separable_conv2d(y, t[f"block{i}.conv2.dw"], t[f"block{i}.conv2.pw"], t[f"block{i}.conv2.b"])
        h = relu(h + y)
    mean = conv2d(h, t["mean_head.w"], t["mean_head.b"])
    log_var = clamp(conv2d(h, t["var_head.w"], t["var_head.b"]), LOGVAR_MIN, LOGVAR_MAX)
    return mean, log_var


def predict(params: NetworkParams, images: np.ndarray) -> PredictionPair:
    """Inference convenience: forward without graph recording.

    images: [B, 15, H, W] (normalized units in, normalized units out).
    """
    with no_grad():
        mean, log_var = forward(params, Tensor(images, dtype=images.dtype if images.dtype == np.float64 else np.float32))
        return PredictionPair(mean=mean.data, variance=np.exp(log_var.data))


def receptive_field_radius(config: ModelConfig) -> int:
    """Radius of the analytic receptive field: one 3x3 stem conv plus two 3x3
    depthwise convs per block (all other convs are 1x1)."""
    return 1 + 2 * config.num_blocks


def encode_geo(lon: float, lat: float, height: int, width: int, dtype=np.float32) -> np.ndarray:
    """Three geo channels for one coordinate, broadcast over a patch.

    Channels: [sin(lon), cos(lon), lat / 90] with lon in degrees, so the
    encoding is cyclic in longitude and monotone in latitude.
    """
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} outside [-180, 180]")
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude {lat} outside [-90, 90]")
    rad = math.radians(lon)
    chans = np.array([math.sin(rad), math.cos(rad), lat / 90.0], dtype=dtype)
    return np.broadcast_to(chans[:, None, None], (GEO_CHANNELS, height, width)).copy()


def encode_geo_grid(lons: np.ndarray, lats: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Per-pixel geo channels from per-column longitudes and per-row latitudes.

    Used for whole-window inference where coordinates vary across pixels;
    returns [3, len(lats), len(lons)].
    """
    lons = np.asarray(lons, dtype=np.float64)
    lats = np.asarray(lats, dtype=np.float64)
    if np.any((lons < -180.0) | (lons > 180.0)):
        raise ValueError("longitude outside [-180, 180]")
    if np.any((lats < -90.0) | (lats > 90.0)):
        raise ValueError("latitude outside [-90, 90]")
    rad = np.radians(lons)
    out = np.empty((GEO_CHANNELS, lats.size, lons.size), dtype=dtype)
    out[0] = np.sin(rad)[None, :]
    out[1] = np.cos(rad)[None, :]
    out[2] = (lats / 90.0)[:, None]
    return out


def save_model(path, params: NetworkParams, step: int = 0) -> None:
    """Checkpoint plus a JSON config document alongside (``<path>.json``)."""
    checkpoint.save_checkpoint(path, params.arrays(), seed=params.seed, step=step)
    with open(f"{path}.json", "w") as f:
        json.dump({"model_config": asdict(params.config)}, f, sort_keys=True)
        f.write("\n")


def load_model(path) -> tuple[NetworkParams, int]:
    """Returns (params, step)."""
    arrays, seed, step = checkpoint.load_checkpoint(path)
    with open(f"{path}.json") as f:
        config = ModelConfig(**json.load(f)["model_config"])
    tensors = {k: parameter(v, name=k) for k, v in arrays.items()}
    return NetworkParams(tensors, config, seed), step
