"""Tiled map production: orbit and image selection, halo-aware batched
inference plus fusion, land-cover masking, quantized output rasters, and a
deterministic bounded worker pool.

Every tile is computed from a window padded by the network's receptive-field
radius, so interior pixels match what a whole-world pass would produce and
adjacent tiles agree along seams. Masked land-cover classes and pixels without
a single valid observation carry the no-data value 255 in the height raster.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fusion import Ensemble, FusedPrediction, assign_members, fuse_stack, predict_tile
from .model import receptive_field_radius
from .rasters import RasterMeta, window_bounds, write_raster
from .synthdata import MASKED_CLASSES, SceneImage, WorldState, geo_channels_for_window, render_observations

NODATA = 255


@dataclass
class OrbitCandidate:
    orbit_id: int
    empty_pixels: int
    coverage: np.ndarray  # (tile_h, tile_w) bool


@dataclass
class TileImage:
    index: int  # position in the observation list
    date: int
    orbit_id: int
    cloud_fraction: float  # cloudy share of covered pixels within the tile


@dataclass
class TileIndex:
    tile_id: str
    tile_row: int
    tile_col: int
    row0: int
    col0: int
    height: int
    width: int
    orbit_candidates: list[OrbitCandidate]
    images_by_orbit: dict[int, list[TileImage]]


def build_tile_index(world: WorldState, observations: list[SceneImage], tile_px: int) -> list[TileIndex]:
    """Partition the world into tiles and attach per-orbit/image metadata."""
    if tile_px < 1:
        raise ValueError("tile_px must be >= 1")
    H, W = world.shape
    tiles = []
    orbit_ids = sorted({img.orbit_id for img in observations})
    for tr in range((H + tile_px - 1) // tile_px):
        for tc in range((W + tile_px - 1) // tile_px):
            row0, col0 = tr * tile_px, tc * tile_px
            h = min(tile_px, H - row0)
            w = min(tile_px, W - col0)
            win = np.s_[row0 : row0 + h, col0 : col0 + w]
            candidates = []
            images_by_orbit: dict[int, list[TileImage]] = {}
            for oid in orbit_ids:
                members = [img for img in observations if img.orbit_id == oid]
                coverage = members[0].coverage[win]
                candidates.append(OrbitCandidate(
                    orbit_id=oid,
                    empty_pixels=int((~coverage).sum()),
                    coverage=coverage,
                ))
                covered = int(coverage.sum())
                infos = []
                for img in members:
                    cloudy = int((coverage & ~img.valid[win]).sum())
                    infos.append(TileImage(
                        index=observations.index(img),
                        date=img.date,
                        orbit_id=oid,
                        cloud_fraction=cloudy / covered if covered else 1.0,
                    ))
                images_by_orbit[oid] = infos
            tiles.append(TileIndex(
                tile_id=f"r{tr:02d}_c{tc:02d}",
                tile_row=tr,
                tile_col=tc,
                row0=row0,
                col0=col0,
                height=h,
                width=w,
                orbit_candidates=candidates,
                images_by_orbit=images_by_orbit,
            ))
    return tiles


def select_orbits(tile: TileIndex, cap: int = 2) -> tuple[list[int], bool]:
    """Ascending empty-pixel order; minimal prefix reaching full coverage,
    capped at ``cap`` orbits. Returns (orbit ids, partial-coverage flag)."""
    if not tile.orbit_candidates:
        raise ValueError(f"tile {tile.tile_id} has no candidate orbits")
    ranked = sorted(tile.orbit_candidates, key=lambda o: (o.empty_pixels, o.orbit_id))
    union = np.zeros((tile.height, tile.width), dtype=bool)
    chosen: list[int] = []
    for cand in ranked:
        chosen.append(cand.orbit_id)
        union |= cand.coverage
        if union.all() or len(chosen) == cap:
            break
    return chosen, not bool(union.all())


def select_images(tile: TileIndex, orbit_id: int, k: int = 10,
                  window: tuple[int, int] | None = None) -> tuple[list[TileImage], bool]:
    """The ``k`` least-cloudy images of one orbit (ties broken by earlier
    date), optionally restricted to a [first, last] date window. Returns
    (images, short-supply flag)."""
    avail = tile.images_by_orbit.get(orbit_id, [])
    if window is not None:
        avail = [img for img in avail if window[0] <= img.date <= window[1]]
    if not avail:
        raise ValueError(f"tile {tile.tile_id}: no images available for orbit {orbit_id}")
    ranked = sorted(avail, key=lambda i: (i.cloud_fraction, i.date))
    return ranked[:k], len(ranked) < k


def quantize_height(mean_m: np.ndarray) -> np.ndarray:
    """Round to whole meters and clamp to the valid [0, 254] range."""
    return np.clip(np.rint(mean_m), 0, NODATA - 1).astype(np.uint8)


def predict_window(world: WorldState, images: list[SceneImage], ensemble: Ensemble, stats,
                   row0: int, col0: int, height: int, width: int,
                   member_ids: np.ndarray | None = None) -> FusedPrediction:
    """Fused prediction for a pixel window, computed with a receptive-field
    halo of shared input so results are independent of the tiling.

    ``member_ids`` assigns one member per image; by default the global
    per-date assignment drawn from the ensemble's seed is used, keyed by each
    image's date so adjacent windows agree.
    """
    radius = receptive_field_radius(ensemble.config)
    H, W = world.shape
    r0, c0 = max(0, row0 - radius), max(0, col0 - radius)
    r1, c1 = min(H, row0 + height + radius), min(W, col0 + width + radius)
    geo = geo_channels_for_window(world, r0, c0, r1 - r0, c1 - c0)
    T = len(images)
    if T < 1:
        raise ValueError("need at least one image")
    arr = np.empty((T, 12 + 3, r1 - r0, c1 - c0), dtype=np.float32)
    valid = np.empty((T, r1 - r0, c1 - c0), dtype=bool)
    for t, img in enumerate(images):
        arr[t, :12] = img.spectral[:, r0:r1, c0:c1]
        arr[t, 12:] = geo
        valid[t] = img.valid[r0:r1, c0:c1]
    if member_ids is None and ensemble.mode == "random":
        assignment = assign_members(world.params.n_dates, len(ensemble.members), ensemble.assignment_seed)
        member_ids = assignment[[img.date for img in images]]
    stack = predict_tile(ensemble, arr, stats, valid=valid,
                         dates=np.array([img.date for img in images]), member_ids=member_ids)
    fused = fuse_stack(stack)
    ro, co = row0 - r0, col0 - c0
    return FusedPrediction(
        mean=fused.mean[ro : ro + height, co : co + width],
        variance=fused.variance[ro : ro + height, co : co + width],
        n_valid=fused.n_valid[ro : ro + height, co : co + width],
    )


@dataclass
class TileResult:
    tile: TileIndex
    height_u8: np.ndarray
    std_f32: np.ndarray
    orbit_ids: list[int]
    n_images: int
    partial: bool
    short_supply: bool
    all_nodata: bool
    timings: dict = field(default_factory=dict)


def process_tile(world: WorldState, observations: list[SceneImage], tile: TileIndex,
                 ensemble: Ensemble, stats, k_images: int = 10,
                 date_window: tuple[int, int] | None = None) -> TileResult:
    """Select orbits and images, infer with halo, fuse, mask, and quantize."""
    t0 = time.perf_counter()
    orbit_ids, partial = select_orbits(tile)
    selected: list[TileImage] = []
    short = False
    for oid in orbit_ids:
        imgs, not_enough = select_images(tile, oid, k=k_images, window=date_window)
        short |= not_enough
        selected.extend(imgs)
    t_select = time.perf_counter() - t0

    t1 = time.perf_counter()
    images = [observations[i.index] for i in selected]
    fused = predict_window(world, images, ensemble, stats,
                           tile.row0, tile.col0, tile.height, tile.width)
    t_predict = time.perf_counter() - t1

    t2 = time.perf_counter()
    win = np.s_[tile.row0 : tile.row0 + tile.height, tile.col0 : tile.col0 + tile.width]
    masked = np.isin(world.base_class[win], [int(c) for c in MASKED_CLASSES])
    nodata = masked | (fused.n_valid == 0)
    height_u8 = quantize_height(np.where(nodata, 0.0, fused.mean))
    height_u8[nodata] = NODATA
    std = np.sqrt(fused.variance).astype(np.float32)
    std[nodata] = np.nan
    t_post = time.perf_counter() - t2

    return TileResult(
        tile=tile,
        height_u8=height_u8,
        std_f32=std,
        orbit_ids=orbit_ids,
        n_images=len(selected),
        partial=partial,
        short_supply=short,
        all_nodata=bool(nodata.all()),
        timings={"select_s": t_select, "predict_s": t_predict, "post_s": t_post,
                 "total_s": t_select + t_predict + t_post},
    )


def write_tile_rasters(out_dir, world: WorldState, result: TileResult) -> list[str]:
    tile = result.tile
    bounds = window_bounds(world, tile.row0, tile.col0, tile.height, tile.width)
    common = dict(height=tile.height, width=tile.width, lon_min=bounds[0], lon_max=bounds[1],
                  lat_min=bounds[2], lat_max=bounds[3], gsd=world.gsd)
    height_path = os.path.join(out_dir, f"tile_{tile.tile_id}_height.raster")
    std_path = os.path.join(out_dir, f"tile_{tile.tile_id}_std.raster")
    write_raster(height_path, result.height_u8,
                 RasterMeta(channel="canopy_height_m", nodata=float(NODATA), dtype="u1", **common))
    write_raster(std_path, result.std_f32,
                 RasterMeta(channel="predictive_std_m", nodata=float("nan"), dtype="f4", **common))
    return [height_path, std_path]


def run_map(world: WorldState, ensemble: Ensemble, stats, out_dir,
            observations: list[SceneImage] | None = None, tile_px: int = 64,
            workers: int = 1, k_images: int = 10,
            date_window: tuple[int, int] | None = None) -> dict:
    """Produce every tile with a bounded worker pool.

    Tiles are independent work units; a failed tile is retried once and then
    recorded as failed without aborting the run. Raster content is independent
    of the worker count; wall-clock timings land in the run report only.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    if observations is None:
        observations = render_observations(world)
    tiles = build_tile_index(world, observations, tile_px)
    started = time.perf_counter()

    def work(tile: TileIndex):
        try:
            result = process_tile(world, observations, tile, ensemble, stats,
                                  k_images=k_images, date_window=date_window)
            retried = False
        except Exception:
            try:
                result = process_tile(world, observations, tile, ensemble, stats,
                                      k_images=k_images, date_window=date_window)
                retried = True
            except Exception as exc:
                return tile, None, False, repr(exc)
        return tile, result, retried, None

    entries = []
    n_failed = 0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for tile, result, retried, error in pool.map(work, tiles):
            entry = {"tile": tile.tile_id, "row0": tile.row0, "col0": tile.col0,
                     "height": tile.height, "width": tile.width, "retried": retried}
            if result is None:
                entry.update({"status": "failed", "error": error})
                n_failed += 1
            else:
                write_tile_rasters(out_dir, world, result)
                entry.update({
                    "status": "ok",
                    "orbits": result.orbit_ids,
                    "n_images": result.n_images,
                    "partial_coverage": result.partial,
                    "short_image_supply": result.short_supply,
                    "all_nodata": result.all_nodata,
                    "timings": result.timings,
                })
            entries.append(entry)
    wall = time.perf_counter() - started
    total_px = sum(t.height * t.width for t in tiles)
    return {
        "n_tiles": len(tiles),
        "n_failed": n_failed,
        "tile_px": tile_px,
        "workers": workers,
        "wall_time_s": wall,
        "pixels_per_second": total_px / wall if wall > 0 else float("inf"),
        "tiles": entries,
    }
