"""Synthetic world generation and sparse footprint sampling.

Stands in for the real satellite/LIDAR dataset construction: a seeded world
with a known height field and land-cover classes, a fixed forward model from
height to 12 spectral channels with height-dependent (heteroscedastic) noise,
multi-date observations with orbit coverage and per-date clouds, and sparse
labeled 15x15 patches around footprint centers.

The spectral forward model is a repo fixture, defined entirely by
``spectral_forward_model`` below: channels 0 and 1 are monotone saturating
functions of canopy height (so height is recoverable), channels 2-11 mix weak
height trends with two nuisance texture fields, and additive Gaussian noise
has a standard deviation that grows linearly with height (so the aleatoric
variance head has real signal to learn).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from enum import IntEnum

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter
from scipy.special import ndtr

from .model import GEO_CHANNELS, IN_CHANNELS, SPECTRAL_CHANNELS, encode_geo

DEG_PER_METER = 1.0 / 111320.0
PATCH_SIZE = 15


class SceneClass(IntEnum):
    VEGETATED = 0
    NOT_VEGETATED = 1
    WATER = 2
    CLOUD = 3
    SNOW = 4
    BUILT_UP = 5
    ICE = 6


#: Land-cover classes removed from map products (set to the no-data value).
MASKED_CLASSES = (SceneClass.WATER, SceneClass.SNOW, SceneClass.BUILT_UP, SceneClass.ICE)

#: Classes whose footprints are assigned a zero-height reference label.
ZERO_HEIGHT_CLASSES = (SceneClass.NOT_VEGETATED, SceneClass.WATER)


@dataclass(frozen=True)
class WorldParams:
    max_height: float = 45.0
    height_smoothness: float = 8.0
    height_detail: float = 2.0
    tall_exponent: float = 3.0
    water_fraction: float = 0.06
    bare_fraction: float = 0.12
    snow_fraction: float = 0.02
    built_fraction: float = 0.02
    ice_fraction: float = 0.01
    cloud_fraction: float = 0.04
    noise_base: float = 0.02
    noise_height_gain: float = 0.06
    n_dates: int = 12
    n_orbits: int = 3


@dataclass
class WorldState:
    """Ground truth plus the reference (training) image.

    ``scene_class`` is the reference image's per-pixel class including its
    cloud overlay; ``base_class`` is the underlying static land cover used to
    render other acquisition dates and to mask map products.
    """

    true_height: np.ndarray  # (H, W) float32, meters
    scene_class: np.ndarray  # (H, W) uint8
    base_class: np.ndarray  # (H, W) uint8
    spectral: np.ndarray  # (12, H, W) float32
    textures: np.ndarray  # (2, H, W) float32, nuisance fields
    lon0: float
    lat0: float
    gsd: float
    seed: int
    params: WorldParams

    @property
    def shape(self):
        return self.true_height.shape

    def pixel_lons(self, cols: np.ndarray) -> np.ndarray:
        scale = DEG_PER_METER / math.cos(math.radians(self.lat0))
        return self.lon0 + np.asarray(cols, dtype=np.float64) * self.gsd * scale

    def pixel_lats(self, rows: np.ndarray) -> np.ndarray:
        return self.lat0 - np.asarray(rows, dtype=np.float64) * self.gsd * DEG_PER_METER


def _smooth_unit_field(rng, shape, sigma):
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return (f - f.mean()) / max(f.std(), 1e-12)


_CLASS_SPECTRA = {
    SceneClass.WATER: 0.02 + 0.03 * np.linspace(1.0, 0.2, SPECTRAL_CHANNELS),
    SceneClass.CLOUD: 0.82 + 0.05 * np.linspace(0.0, 1.0, SPECTRAL_CHANNELS),
    SceneClass.SNOW: 0.90 + 0.04 * np.linspace(1.0, 0.0, SPECTRAL_CHANNELS),
    SceneClass.BUILT_UP: 0.30 + 0.08 * np.linspace(0.2, 1.0, SPECTRAL_CHANNELS),
    SceneClass.ICE: 0.78 + 0.03 * np.linspace(0.5, 1.0, SPECTRAL_CHANNELS),
}


def spectral_forward_model(height, scene_class, textures):
    """Noiseless 12-channel reflectance from height, class, and textures.

    Channels 0/1 saturate in height (half-saturation at 12 m and 30 m);
    the rest carry weak height trends and the two texture fields.
    """
    h = np.asarray(height, dtype=np.float64)
    ta, tb = textures[0].astype(np.float64), textures[1].astype(np.float64)
    chans = np.empty((SPECTRAL_CHANNELS,) + h.shape, dtype=np.float64)
    chans[0] = 0.05 + 0.90 * h / (h + 12.0)
    chans[1] = 0.02 + 0.80 * h / (h + 30.0)
    chans[2] = np.clip(0.32 - 0.0045 * h, 0.05, None)
    chans[3] = 0.25 + 0.10 * ta
    chans[4] = 0.22 + 0.08 * tb
    chans[5] = 0.18 + 0.0020 * h + 0.05 * ta
    chans[6] = 0.30 - 0.0010 * h + 0.06 * tb
    chans[7] = 0.12 + 0.04 * ta + 0.03 * tb
    chans[8] = 0.26 + 0.0015 * h
    chans[9] = 0.21 + 0.05 * tb
    chans[10] = 0.16 + 0.03 * ta
    chans[11] = 0.28 - 0.0008 * h + 0.02 * ta
    cls = np.asarray(scene_class)
    for c, spectrum in _CLASS_SPECTRA.items():
        sel = cls == c
        if sel.any():
            chans[:, sel] = spectrum[:, None]
    return chans.astype(np.float32)


def _noise_sigma(height, scene_class, params):
    sigma = params.noise_base + params.noise_height_gain * np.asarray(height, dtype=np.float64) / 40.0
    overridden = np.isin(scene_class, [int(c) for c in _CLASS_SPECTRA])
    sigma = np.where(overridden, params.noise_base, sigma)
    return sigma.astype(np.float32)


def _render_spectral(height, scene_class, textures, params, rng):
    clean = spectral_forward_model(height, scene_class, textures)
    sigma = _noise_sigma(height, scene_class, params)
    noise = rng.standard_normal(clean.shape).astype(np.float32) * sigma[None]
    return clean + noise


def generate_world(seed: int, extent=(256, 256), params: WorldParams | None = None,
                   lon0: float = 8.0, lat0: float = 47.0, gsd: float = 10.0) -> WorldState:
    """Seed-deterministic synthetic world with a long-tailed height field."""
    H, W = extent
    if H < 64 or W < 64:
        raise ValueError(f"extent must be at least 64x64 pixels, got {extent}")
    if params is None:
        params = WorldParams()
    streams = np.random.SeedSequence(seed).spawn(6)
    rng_height, rng_cover, rng_texture, rng_cloud, rng_ref, _ = (np.random.default_rng(s) for s in streams)

    coarse = _smooth_unit_field(rng_height, (H, W), params.height_smoothness)
    detail = _smooth_unit_field(rng_height, (H, W), params.height_detail)
    s = 0.85 * coarse + 0.35 * detail
    s /= max(s.std(), 1e-12)
    height = (params.max_height * ndtr(s) ** params.tall_exponent).astype(np.float32)

    base = np.full((H, W), int(SceneClass.VEGETATED), dtype=np.uint8)
    cover_fields = {
        SceneClass.WATER: (params.water_fraction, 7.0),
        SceneClass.ICE: (params.ice_fraction, 5.0),
        SceneClass.BUILT_UP: (params.built_fraction, 3.0),
        SceneClass.SNOW: (params.snow_fraction, 5.0),
        SceneClass.NOT_VEGETATED: (params.bare_fraction, 6.0),
    }
    for cls, (fraction, sigma) in cover_fields.items():
        if fraction <= 0:
            continue
        f = _smooth_unit_field(rng_cover, (H, W), sigma)
        mask = f > np.quantile(f, 1.0 - fraction)
        base[mask & (base == SceneClass.VEGETATED)] = int(cls)

    zero = np.isin(base, [int(SceneClass.NOT_VEGETATED), int(SceneClass.WATER),
                          int(SceneClass.BUILT_UP), int(SceneClass.ICE)])
    height[zero] = 0.0

    textures = np.stack([
        _smooth_unit_field(rng_texture, (H, W), 3.0),
        _smooth_unit_field(rng_texture, (H, W), 3.0),
    ]).astype(np.float32)

    scene = base.copy()
    if params.cloud_fraction > 0:
        f = _smooth_unit_field(rng_cloud, (H, W), 5.0)
        scene[f > np.quantile(f, 1.0 - params.cloud_fraction)] = int(SceneClass.CLOUD)

    spectral = _render_spectral(height, scene, textures, params, rng_ref)
    return WorldState(true_height=height, scene_class=scene, base_class=base, spectral=spectral,
                      textures=textures, lon0=lon0, lat0=lat0, gsd=gsd, seed=seed, params=params)


def geo_channels_for_window(world: WorldState, row0: int, col0: int, height: int, width: int) -> np.ndarray:
    """Per-pixel geo encoding for a window of the world grid."""
    from .model import encode_geo_grid

    lons = world.pixel_lons(np.arange(col0, col0 + width))
    lats = world.pixel_lats(np.arange(row0, row0 + height))
    return encode_geo_grid(lons, lats)


# ---------------------------------------------------------------------------
# Multi-date observations
# ---------------------------------------------------------------------------

_ORBIT_BANDS = {
    1: [(0.0, 1.0)],
    2: [(0.0, 0.65), (0.35, 1.0)],
    3: [(0.0, 0.45), (0.275, 0.725), (0.55, 1.0)],
}


def orbit_coverage(shape, orbit_id: int, n_orbits: int) -> np.ndarray:
    """Column-band coverage mask of one synthetic orbit."""
    if n_orbits not in _ORBIT_BANDS:
        raise ValueError(f"unsupported orbit count {n_orbits}")
    H, W = shape
    lo, hi = _ORBIT_BANDS[n_orbits][orbit_id]
    mask = np.zeros((H, W), dtype=bool)
    mask[:, int(lo * W) : int(hi * W)] = True
    return mask


@dataclass
class SceneImage:
    """One synthetic acquisition: spectral data plus validity masks."""

    date: int
    orbit_id: int
    spectral: np.ndarray  # (12, H, W) float32
    coverage: np.ndarray  # (H, W) bool
    valid: np.ndarray  # (H, W) bool: covered and cloud-free
    cloud_fraction: float  # cloudy share of covered pixels


def render_observations(world: WorldState) -> list[SceneImage]:
    """Per-date acquisitions derived deterministically from the world seed."""
    params = world.params
    H, W = world.shape
    streams = np.random.SeedSequence((world.seed, 1)).spawn(2 * params.n_dates + 1)
    rng_frac = np.random.default_rng(streams[0])
    fractions = 0.03 + 0.45 * rng_frac.random(params.n_dates)
    images = []
    for d in range(params.n_dates):
        orbit_id = d % params.n_orbits
        coverage = orbit_coverage((H, W), orbit_id, params.n_orbits)
        rng_cloud = np.random.default_rng(streams[1 + 2 * d])
        rng_noise = np.random.default_rng(streams[2 + 2 * d])
        f = _smooth_unit_field(rng_cloud, (H, W), 5.0)
        cloud = f > np.quantile(f, 1.0 - fractions[d])
        cls = world.base_class.copy()
        cls[cloud] = int(SceneClass.CLOUD)
        spectral = _render_spectral(world.true_height, cls, world.textures, params, rng_noise)
        covered = int(coverage.sum())
        cloudy_covered = int((cloud & coverage).sum())
        images.append(SceneImage(
            date=d,
            orbit_id=orbit_id,
            spectral=spectral,
            coverage=coverage,
            valid=coverage & ~cloud,
            cloud_fraction=cloudy_covered / covered if covered else 1.0,
        ))
    return images


# ---------------------------------------------------------------------------
# Footprint sampling
# ---------------------------------------------------------------------------


@dataclass
class FootprintSample:
    """One sparse reference observation: a 15-channel patch labeled at its center."""

    patch: np.ndarray  # (15, 15, 15) float32: 12 spectral + 3 geo channels
    label_height: float
    lon: float
    lat: float
    scene_class: int
    cloudy: bool
    snowy: bool
    row: int
    col: int


def sample_footprints(world: WorldState, n: int, seed: int, geolocation_sigma: float = 5.0,
                      footprint_diameter: float = 25.0, drop_flagged: bool = True) -> list[FootprintSample]:
    """Draw ``n`` footprints; labels are disc maxima around jittered centers.

    The label equals the maximum true height within a ``footprint_diameter``
    disc around the center jittered by N(0, geolocation_sigma) meters, forced
    to 0 m for centers on water or bare ground. With ``drop_flagged`` the pool
    excludes any center whose patch touches cloud or snow; raises if fewer
    than ``n`` valid locations exist.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    H, W = world.shape
    margin = PATCH_SIZE // 2
    cloud_near = maximum_filter(world.scene_class == SceneClass.CLOUD, size=PATCH_SIZE, mode="constant")
    snow_near = maximum_filter(world.scene_class == SceneClass.SNOW, size=PATCH_SIZE, mode="constant")
    pool = np.zeros((H, W), dtype=bool)
    pool[margin : H - margin, margin : W - margin] = True
    if drop_flagged:
        pool &= ~(cloud_near | snow_near)
    flat = np.flatnonzero(pool)
    if n > flat.size:
        raise ValueError(f"requested {n} footprints but only {flat.size} valid locations exist")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(flat, size=n, replace=False)
    rows, cols = np.unravel_index(chosen, (H, W))

    sigma_px = geolocation_sigma / world.gsd
    jitter = rng.normal(0.0, sigma_px, size=(n, 2)) if sigma_px > 0 else np.zeros((n, 2))
    jitter = np.clip(jitter, -5.0, 5.0)
    radius_px = 0.5 * footprint_diameter / world.gsd

    win = 7
    off = np.arange(-win, win + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")

    lons = world.pixel_lons(cols)
    lats = world.pixel_lats(rows)
    samples = []
    for i in range(n):
        r, c = int(rows[i]), int(cols[i])
        dy, dx = jitter[i]
        in_disc = (oy - dy) ** 2 + (ox - dx) ** 2 <= radius_px**2
        in_disc[win + int(round(dy)), win + int(round(dx))] = True  # containing pixel
        rr = np.clip(r + oy[in_disc], 0, H - 1)
        cc = np.clip(c + ox[in_disc], 0, W - 1)
        label = float(world.true_height[rr, cc].max())
        center_class = int(world.scene_class[r, c])
        if center_class in (int(SceneClass.NOT_VEGETATED), int(SceneClass.WATER)):
            label = 0.0
        patch = np.empty((IN_CHANNELS, PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
        patch[:SPECTRAL_CHANNELS] = world.spectral[:, r - margin : r + margin + 1, c - margin : c + margin + 1]
        patch[SPECTRAL_CHANNELS:] = encode_geo(float(lons[i]), float(lats[i]), PATCH_SIZE, PATCH_SIZE)
        samples.append(FootprintSample(
            patch=patch,
            label_height=label,
            lon=float(lons[i]),
            lat=float(lats[i]),
            scene_class=center_class,
            cloudy=bool(cloud_near[r, c]),
            snowy=bool(snow_near[r, c]),
            row=r,
            col=c,
        ))
    return samples


def drop_flagged_samples(samples: list[FootprintSample]) -> list[FootprintSample]:
    """Remove every cloud- or snow-flagged sample and no others."""
    return [s for s in samples if not (s.cloudy or s.snowy)]


# ---------------------------------------------------------------------------
# Normalization and splits
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    """Per-channel and label statistics of the training split (population std)."""

    channel_mean: np.ndarray  # (15,)
    channel_std: np.ndarray  # (15,)
    label_mean: float
    label_std: float

    def to_dict(self):
        return {
            "channel_mean": self.channel_mean.tolist(),
            "channel_std": self.channel_std.tolist(),
            "label_mean": self.label_mean,
            "label_std": self.label_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            channel_mean=np.asarray(d["channel_mean"], dtype=np.float64),
            channel_std=np.asarray(d["channel_std"], dtype=np.float64),
            label_mean=float(d["label_mean"]),
            label_std=float(d["label_std"]),
        )


def compute_norm_stats(patches: np.ndarray, labels: np.ndarray) -> NormStats:
    if patches.shape[0] < 2:
        raise ValueError("need at least 2 training samples for normalization statistics")
    mean = patches.astype(np.float64).mean(axis=(0, 2, 3))
    std = patches.astype(np.float64).std(axis=(0, 2, 3))
    if np.any(std <= 1e-12):
        bad = int(np.argmin(std))
        raise ValueError(f"zero-variance channel {bad}: cannot normalize")
    label_std = float(np.asarray(labels, dtype=np.float64).std())
    if label_std <= 1e-12:
        raise ValueError("zero-variance labels: cannot normalize")
    return NormStats(channel_mean=mean, channel_std=std,
                     label_mean=float(np.asarray(labels, dtype=np.float64).mean()), label_std=label_std)


def normalize_patches(patches: np.ndarray, stats: NormStats) -> np.ndarray:
    # Channel-wise float64 arithmetic: the geo channels are nearly constant,
    # so float32 subtraction would leave a visible systematic offset.
    out = np.empty(patches.shape, dtype=np.float32)
    for c in range(patches.shape[1]):
        out[:, c] = (patches[:, c].astype(np.float64) - stats.channel_mean[c]) / stats.channel_std[c]
    return out


def normalize_labels(labels: np.ndarray, stats: NormStats) -> np.ndarray:
    return ((labels - stats.label_mean) / stats.label_std).astype(np.float32)


def denormalize_prediction(mean, variance, stats: NormStats):
    """Map normalized-unit predictions back to meters and meters^2."""
    return (
        np.asarray(mean) * stats.label_std + stats.label_mean,
        np.asarray(variance) * stats.label_std**2,
    )


@dataclass(frozen=True)
class SplitSpec:
    tile_px: int = 64
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")
        if self.tile_px < 1:
            raise ValueError("tile_px must be >= 1")


def validation_tiles(spec: SplitSpec, world_shape) -> set[tuple[int, int]]:
    """Held-out tile coordinates for a world of ``world_shape`` pixels."""
    H, W = world_shape
    n_rows = math.ceil(H / spec.tile_px)
    n_cols = math.ceil(W / spec.tile_px)
    n_tiles = n_rows * n_cols
    n_val = round(spec.holdout_fraction * n_tiles)
    order = np.random.default_rng(spec.seed).permutation(n_tiles)[:n_val]
    return {(int(t) // n_cols, int(t) % n_cols) for t in order}


def split_by_tile(samples: list[FootprintSample], spec: SplitSpec, world_shape):
    """Tile-level split; no tile contributes to both sets.

    Returns (train_samples, validation_samples, validation_tile_set).
    """
    val_tiles = validation_tiles(spec, world_shape)
    train, val = [], []
    for s in samples:
        tile = (s.row // spec.tile_px, s.col // spec.tile_px)
        (val if tile in val_tiles else train).append(s)
    return train, val, val_tiles


# ---------------------------------------------------------------------------
# Dataset container and serialization
# ---------------------------------------------------------------------------

_RECORD_META_FLOATS = 11  # lon lat label class cloudy snowy row col tile_row tile_col is_val
_RECORD_FLOATS = _RECORD_META_FLOATS + IN_CHANNELS * PATCH_SIZE * PATCH_SIZE

DATASET_MAGIC = "CANOPYH-DATASET"
DATASET_VERSION = 1


@dataclass
class FootprintDataset:
    patches: np.ndarray  # (N, 15, 15, 15) float32
    labels: np.ndarray  # (N,) float32
    lons: np.ndarray
    lats: np.ndarray
    classes: np.ndarray
    cloudy: np.ndarray
    snowy: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    tile_rows: np.ndarray
    tile_cols: np.ndarray
    is_val: np.ndarray
    stats: NormStats
    split: SplitSpec
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.labels.size)

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_val)

    @property
    def val_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_val)

    def sample(self, i: int) -> FootprintSample:
        return FootprintSample(
            patch=self.patches[i],
            label_height=float(self.labels[i]),
            lon=float(self.lons[i]),
            lat=float(self.lats[i]),
            scene_class=int(self.classes[i]),
            cloudy=bool(self.cloudy[i]),
            snowy=bool(self.snowy[i]),
            row=int(self.rows[i]),
            col=int(self.cols[i]),
        )


def build_dataset(world: WorldState, n: int, seed: int, geolocation_sigma: float = 5.0,
                  split: SplitSpec | None = None) -> FootprintDataset:
    """Sample, split at tile level, and compute train-split statistics."""
    if split is None:
        split = SplitSpec()
    samples = sample_footprints(world, n, seed, geolocation_sigma=geolocation_sigma)
    order = sorted(range(len(samples)), key=lambda i: (samples[i].row, samples[i].col, i))
    samples = [samples[i] for i in order]
    val_tiles = validation_tiles(split, world.shape)

    patches = np.stack([s.patch for s in samples])
    labels = np.array([s.label_height for s in samples], dtype=np.float32)
    rows = np.array([s.row for s in samples], dtype=np.int32)
    cols = np.array([s.col for s in samples], dtype=np.int32)
    tile_rows = rows // split.tile_px
    tile_cols = cols // split.tile_px
    is_val = np.array([(tr, tc) in val_tiles for tr, tc in zip(tile_rows, tile_cols)])
    if not np.any(~is_val):
        raise ValueError("tile split left no training samples")
    stats = compute_norm_stats(patches[~is_val], labels[~is_val])
    return FootprintDataset(
        patches=patches,
        labels=labels,
        lons=np.array([s.lon for s in samples], dtype=np.float64),
        lats=np.array([s.lat for s in samples], dtype=np.float64),
        classes=np.array([s.scene_class for s in samples], dtype=np.uint8),
        cloudy=np.array([s.cloudy for s in samples], dtype=bool),
        snowy=np.array([s.snowy for s in samples], dtype=bool),
        rows=rows,
        cols=cols,
        tile_rows=tile_rows.astype(np.int32),
        tile_cols=tile_cols.astype(np.int32),
        is_val=is_val,
        stats=stats,
        split=split,
        meta={
            "world_seed": world.seed,
            "world_extent": list(world.shape),
            "lon0": world.lon0,
            "lat0": world.lat0,
            "gsd": world.gsd,
            "sampling_seed": seed,
            "geolocation_sigma": geolocation_sigma,
            "validation_tiles": sorted([list(t) for t in val_tiles]),
        },
    )


def save_dataset(path, ds: FootprintDataset) -> None:
    header = {
        "n": ds.n,
        "patch_size": PATCH_SIZE,
        "channels": [f"spectral_{i}" for i in range(SPECTRAL_CHANNELS)]
        + ["geo_sin_lon", "geo_cos_lon", "geo_lat"],
        "record_floats": _RECORD_FLOATS,
        "norm_stats": ds.stats.to_dict(),
        "split": asdict(ds.split),
        "meta": ds.meta,
    }
    records = np.empty((ds.n, _RECORD_FLOATS), dtype="<f4")
    records[:, 0] = ds.lons
    records[:, 1] = ds.lats
    records[:, 2] = ds.labels
    records[:, 3] = ds.classes
    records[:, 4] = ds.cloudy
    records[:, 5] = ds.snowy
    records[:, 6] = ds.rows
    records[:, 7] = ds.cols
    records[:, 8] = ds.tile_rows
    records[:, 9] = ds.tile_cols
    records[:, 10] = ds.is_val
    records[:, _RECORD_META_FLOATS:] = ds.patches.reshape(ds.n, -1)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(f"{DATASET_MAGIC} {DATASET_VERSION}\n".encode("ascii"))
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
        f.write(records.tobytes())
    os.replace(tmp, path)


def load_dataset(path) -> FootprintDataset:
    with open(path, "rb") as f:
        first = f.readline().decode("ascii").split()
        if len(first) != 2 or first[0] != DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        if int(first[1]) != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {first[1]}")
        header = json.loads(f.readline().decode("ascii"))
        n = header["n"]
        stride = header["record_floats"]
        data = np.frombuffer(f.read(n * stride * 4), dtype="<f4").reshape(n, stride)
    return FootprintDataset(
        patches=data[:, _RECORD_META_FLOATS:].reshape(n, IN_CHANNELS, PATCH_SIZE, PATCH_SIZE).copy(),
        labels=data[:, 2].copy(),
        lons=data[:, 0].astype(np.float64),
        lats=data[:, 1].astype(np.float64),
        classes=data[:, 3].astype(np.uint8),
        cloudy=data[:, 4].astype(bool),
        snowy=data[:, 5].astype(bool),
        rows=data[:, 6].astype(np.int32),
        cols=data[:, 7].astype(np.int32),
        tile_rows=data[:, 8].astype(np.int32),
        tile_cols=data[:, 9].astype(np.int32),
        is_val=data[:, 10].astype(bool),
        stats=NormStats.from_dict(header["norm_stats"]),
        split=SplitSpec(**header["split"]),
        meta=header["meta"],
    )


# ---------------------------------------------------------------------------
# World serialization
# ---------------------------------------------------------------------------

WORLD_MAGIC = "CANOPYH-WORLD"
WORLD_VERSION = 1


def save_world(path, world: WorldState) -> None:
    H, W = world.shape
    header = {
        "seed": world.seed,
        "height": H,
        "width": W,
        "lon0": world.lon0,
        "lat0": world.lat0,
        "gsd": world.gsd,
        "params": asdict(world.params),
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(f"{WORLD_MAGIC} {WORLD_VERSION}\n".encode("ascii"))
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(world.true_height, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(world.scene_class, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(world.base_class, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(world.spectral, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(world.textures, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_world(path) -> WorldState:
    with open(path, "rb") as f:
        first = f.readline().decode("ascii").split()
        if len(first) != 2 or first[0] != WORLD_MAGIC:
            raise ValueError(f"{path}: not a world file")
        if int(first[1]) != WORLD_VERSION:
            raise ValueError(f"{path}: unsupported world version {first[1]}")
        header = json.loads(f.readline().decode("ascii"))
        H, W = header["height"], header["width"]
        hw = H * W

        def take(count, dtype):
            nbytes = count * np.dtype(dtype).itemsize
            buf = f.read(nbytes)
            if len(buf) != nbytes:
                raise ValueError(f"{path}: truncated payload")
            return np.frombuffer(buf, dtype=dtype)

        true_height = take(hw, "<f4").reshape(H, W).copy()
        scene_class = take(hw, np.uint8).reshape(H, W).copy()
        base_class = take(hw, np.uint8).reshape(H, W).copy()
        spectral = take(SPECTRAL_CHANNELS * hw, "<f4").reshape(SPECTRAL_CHANNELS, H, W).copy()
        textures = take(2 * hw, "<f4").reshape(2, H, W).copy()
    return WorldState(
        true_height=true_height,
        scene_class=scene_class,
        base_class=base_class,
        spectral=spectral,
        textures=textures,
        lon0=header["lon0"],
        lat0=header["lat0"],
        gsd=header["gsd"],
        seed=header["seed"],
        params=WorldParams(**header["params"]),
    )
