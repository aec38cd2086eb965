"""
Radar grid files (RGR1), station tables, reflectivity clamping and
resolution pooling.
"""

import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from nowcast.errors import (
    BadMagic,
    DuplicateStation,
    PayloadMismatch,
    PoolingError,
    TruncatedFile,
    UnsupportedVersion,
)

logger = logging.getLogger(__name__)

MAGIC = b"RGR1"
FORMAT_VERSION = 1
# magic, version, height, width, resolution_km, timestamp, origin_lat, origin_lon
HEADER = struct.Struct("<4sBIIfqdd")
HEADER_SIZE = HEADER.size

EARTH_RADIUS_KM = 6371.0088
KM_PER_DEGREE = math.pi * EARTH_RADIUS_KM / 180.0

DEFAULT_R_MAX = 100
STATION_COLUMNS = ["station_id", "lat", "lon"]


@dataclass(frozen=True)
class GridGeometry:
    height: int
    width: int
    resolution_km: float
    origin_lat: float
    origin_lon: float

    def to_pixel(self, lat, lon):
        """Fractional (row, col) of a lat/lon on the local equirectangular grid."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        km_per_deg_lon = KM_PER_DEGREE * math.cos(math.radians(self.origin_lat))
        row = (self.origin_lat - lat) * KM_PER_DEGREE / self.resolution_km
        col = (lon - self.origin_lon) * km_per_deg_lon / self.resolution_km
        return row, col

    def to_latlon(self, row, col):
        km_per_deg_lon = KM_PER_DEGREE * math.cos(math.radians(self.origin_lat))
        lat = self.origin_lat - np.asarray(row, dtype=np.float64) * self.resolution_km / KM_PER_DEGREE
        lon = self.origin_lon + np.asarray(col, dtype=np.float64) * self.resolution_km / km_per_deg_lon
        return lat, lon

    def pooled(self, factor):
        # the NW cell center moves to the center of the first factor x factor block
        shift = (factor - 1) / 2.0
        lat, lon = self.to_latlon(shift, shift)
        return GridGeometry(
            height=self.height // factor,
            width=self.width // factor,
            resolution_km=self.resolution_km * factor,
            origin_lat=float(lat),
            origin_lon=float(lon),
        )


@dataclass(frozen=True, eq=False)
class RadarGrid:
    """One timestamped reflectivity field in dBZ; missing cells are NaN."""

    timestamp: int
    resolution_km: float
    origin_lat: float
    origin_lon: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32, copy=True)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"Radar values must be a non-empty 2-D array, got shape {values.shape}")
        if not self.resolution_km > 0:
            raise ValueError(f"resolution_km must be positive, got {self.resolution_km}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def geometry(self):
        return GridGeometry(self.height, self.width, float(self.resolution_km),
                            float(self.origin_lat), float(self.origin_lon))

    def with_values(self, values, resolution_km=None, origin=None):
        lat, lon = origin if origin is not None else (self.origin_lat, self.origin_lon)
        return RadarGrid(
            timestamp=self.timestamp,
            resolution_km=self.resolution_km if resolution_km is None else resolution_km,
            origin_lat=lat,
            origin_lon=lon,
            values=values,
        )

    def __eq__(self, other):
        if not isinstance(other, RadarGrid):
            return NotImplemented
        # bitwise comparison so NaN payloads compare equal
        return (
            self.timestamp == other.timestamp
            and np.float32(self.resolution_km) == np.float32(other.resolution_km)
            and self.origin_lat == other.origin_lat
            and self.origin_lon == other.origin_lon
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


# -------------------------------------------------------------------
# RGR1 READ / WRITE
# -------------------------------------------------------------------
def read_radar_grid(path):
    data = Path(path).read_bytes()

    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, found {data[:len(MAGIC)]!r}")
    if len(data) < HEADER_SIZE:
        raise TruncatedFile(f"{path}: header needs {HEADER_SIZE} bytes, file has {len(data)}")

    _, version, height, width, resolution_km, timestamp, origin_lat, origin_lon = HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: format version {version} is not supported")

    payload = data[HEADER_SIZE:]
    if len(payload) % 4:
        raise TruncatedFile(f"{path}: payload of {len(payload)} bytes ends inside a value")
    count = len(payload) // 4
    if count != height * width:
        raise PayloadMismatch(
            f"{path}: header says {height}x{width} ({height * width} values) but payload has {count}"
        )

    values = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    logger.debug("Read %s: %dx%d grid at t=%d", path, height, width, timestamp)
    return RadarGrid(
        timestamp=timestamp,
        resolution_km=float(resolution_km),
        origin_lat=origin_lat,
        origin_lon=origin_lon,
        values=values,
    )


def write_radar_grid(grid, path):
    header = HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        grid.height,
        grid.width,
        grid.resolution_km,
        grid.timestamp,
        grid.origin_lat,
        grid.origin_lon,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + grid.values.astype("<f4", copy=False).tobytes())
    logger.debug("Wrote %s (%dx%d)", path, grid.height, grid.width)


def grid_filename(timestamp):
    return f"{int(timestamp)}.rgr"


def read_grid_directory(directory):
    """Load every *.rgr file under a directory, keyed by timestamp."""
    grids = {}
    for path in sorted(Path(directory).glob("*.rgr")):
        grid = read_radar_grid(path)
        grids[grid.timestamp] = grid
    logger.info("Loaded %d radar grids from %s", len(grids), directory)
    return grids


# -------------------------------------------------------------------
# CLAMPING AND POOLING
# -------------------------------------------------------------------
def clamp_reflectivity(r, r_max=DEFAULT_R_MAX):
    """
    Clamp reflectivity to [-0.5, r_max - 0.5]. NaN (missing) passes through.

    Works on scalars and arrays; scalars come back as float.
    """
    if r_max < 1:
        raise ValueError(f"r_max must be at least 1, got {r_max}")
    clamped = np.clip(r, -0.5, r_max - 0.5)
    if np.ndim(clamped) == 0:
        return float(clamped)
    return clamped


def clamp_grid(grid, r_max=DEFAULT_R_MAX):
    return grid.with_values(clamp_reflectivity(grid.values, r_max))


def mean_pool(grid, factor):
    if factor not in (2, 4):
        raise PoolingError(f"Pooling factor must be 2 or 4, got {factor}")
    if grid.height % factor or grid.width % factor:
        raise PoolingError(f"Grid {grid.height}x{grid.width} is not divisible by {factor}")

    blocks = grid.values.astype(np.float64).reshape(
        grid.height // factor, factor, grid.width // factor, factor
    )
    with warnings.catch_warnings():
        # all-NaN blocks are expected and stay NaN
        warnings.simplefilter("ignore", category=RuntimeWarning)
        pooled = np.nanmean(blocks, axis=(1, 3))

    geometry = grid.geometry.pooled(factor)
    return grid.with_values(
        pooled.astype(np.float32),
        resolution_km=geometry.resolution_km,
        origin=(geometry.origin_lat, geometry.origin_lon),
    )


# -------------------------------------------------------------------
# STATION TABLES
# -------------------------------------------------------------------
def read_station_table(path):
    df = pd.read_csv(path, dtype={"station_id": str})
    missing = [c for c in STATION_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: station table is missing columns {missing}")
    df = df[STATION_COLUMNS].copy()
    df["station_id"] = df["station_id"].str.strip()
    duplicated = df.loc[df["station_id"].duplicated(), "station_id"].tolist()
    if duplicated:
        raise DuplicateStation(f"{path}: duplicated station ids {duplicated}")
    logger.info("Loaded %d stations from %s", len(df), path)
    return df.reset_index(drop=True)


def write_station_table(table, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table[STATION_COLUMNS].to_csv(path, index=False)
