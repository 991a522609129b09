"""Raster exchange format: text header plus row-major little-endian payload.

One file per channel. Header lines are ``key value`` pairs terminated by
``END``; supported payload dtypes are ``u1`` and ``f4``. Writes are atomic
(temp file then rename).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

MAGIC = "CANOPYH-RASTER"
VERSION = 1

_DTYPES = {"u1": np.dtype(np.uint8), "f4": np.dtype("<f4")}


@dataclass
class RasterMeta:
    channel: str
    height: int
    width: int
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    gsd: float
    nodata: float
    dtype: str  # "u1" or "f4"


def write_raster(path, array: np.ndarray, meta: RasterMeta) -> None:
    if meta.dtype not in _DTYPES:
        raise ValueError(f"unsupported raster dtype {meta.dtype!r}")
    if array.shape != (meta.height, meta.width):
        raise ValueError(f"array shape {array.shape} does not match header "
                         f"({meta.height}, {meta.width})")
    payload = np.ascontiguousarray(array, dtype=_DTYPES[meta.dtype])
    lines = [
        f"{MAGIC} {VERSION}",
        f"channel {meta.channel}",
        f"dtype {meta.dtype}",
        f"height {meta.height}",
        f"width {meta.width}",
        f"lon_min {meta.lon_min!r}",
        f"lon_max {meta.lon_max!r}",
        f"lat_min {meta.lat_min!r}",
        f"lat_max {meta.lat_max!r}",
        f"gsd {meta.gsd!r}",
        f"nodata {meta.nodata!r}",
        "END",
    ]
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(payload.tobytes())
    os.replace(tmp, path)


def read_raster(path) -> tuple[np.ndarray, RasterMeta]:
    with open(path, "rb") as f:
        first = f.readline().decode("ascii").split()
        if len(first) != 2 or first[0] != MAGIC:
            raise ValueError(f"{path}: not a raster file")
        if int(first[1]) != VERSION:
            raise ValueError(f"{path}: unsupported raster version {first[1]}")
        fields: dict[str, str] = {}
        while True:
            line = f.readline().decode("ascii").strip()
            if line == "END":
                break
            if not line:
                raise ValueError(f"{path}: truncated header")
            key, value = line.split(None, 1)
            fields[key] = value
        meta = RasterMeta(
            channel=fields["channel"],
            height=int(fields["height"]),
            width=int(fields["width"]),
            lon_min=float(fields["lon_min"]),
            lon_max=float(fields["lon_max"]),
            lat_min=float(fields["lat_min"]),
            lat_max=float(fields["lat_max"]),
            gsd=float(fields["gsd"]),
            nodata=float(fields["nodata"]),
            dtype=fields["dtype"],
        )
        dt = _DTYPES[meta.dtype]
        count = meta.height * meta.width
        buf = f.read(count * dt.itemsize)
        if len(buf) != count * dt.itemsize:
            raise ValueError(f"{path}: truncated payload")
        array = np.frombuffer(buf, dtype=dt).reshape(meta.height, meta.width).copy()
    return array, meta


def window_bounds(world, row0: int, col0: int, height: int, width: int):
    """Geo bounds (lon_min, lon_max, lat_min, lat_max) of a pixel window."""
    lons = world.pixel_lons(np.array([col0, col0 + width - 1]))
    lats = world.pixel_lats(np.array([row0, row0 + height - 1]))
    return float(lons.min()), float(lons.max()), float(lats.min()), float(lats.max())


def nodata_value(dtype: str) -> float:
    return 255.0 if dtype == "u1" else math.nan
