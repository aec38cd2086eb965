"""
Samples for nowcasting and estimation: frame windows, target-time
channels, station labels and the temporal train/validation/test splits.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np
import pandas as pd

from nowcast.errors import (
    DimensionMismatch,
    EmptyDataset,
    InvalidRate,
    InvalidTargetIndex,
    StationOutsideGrid,
)
from nowcast.grid_io import (
    DEFAULT_R_MAX,
    clamp_grid,
    mean_pool,
    read_grid_directory,
    read_station_table,
)

logger = logging.getLogger(__name__)

N_FRAMES = 7
FRAME_STEP_MINUTES = 10
WINDOW_MINUTES = (N_FRAMES - 1) * FRAME_STEP_MINUTES
N_LEADS = 6
LEAD_TIMES = tuple(60 * k for k in range(1, N_LEADS + 1))

LIGHT_THRESHOLD = 1.0
HEAVY_THRESHOLD = 10.0

OBSERVATION_COLUMNS = ["station_id", "timestamp_minutes", "accum_mm_60min"]


class PrecipClass(IntEnum):
    OTHERS = 0
    LIGHT = 1
    HEAVY = 2


class TrackedClass(Enum):
    """Binary events scored by CSI/F1; RAIN is LIGHT or HEAVY."""

    RAIN = "RAIN"
    HEAVY = "HEAVY"

    @property
    def members(self):
        if self is TrackedClass.RAIN:
            return (PrecipClass.LIGHT, PrecipClass.HEAVY)
        return (PrecipClass.HEAVY,)


def precip_class(rate):
    """Class of an hourly rate: <1 OTHERS, [1, 10) LIGHT, >=10 HEAVY."""
    if rate is None or not np.isfinite(rate) or rate < 0:
        raise InvalidRate(f"Precipitation rate must be finite and non-negative, got {rate}")
    if rate >= HEAVY_THRESHOLD:
        return PrecipClass.HEAVY
    if rate >= LIGHT_THRESHOLD:
        return PrecipClass.LIGHT
    return PrecipClass.OTHERS


def precip_classes(rates):
    """Vectorized precip_class returning an int array of class codes."""
    rates = np.asarray(rates, dtype=np.float64)
    if not np.all(np.isfinite(rates)) or np.any(rates < 0):
        raise InvalidRate("Precipitation rates must be finite and non-negative")
    return np.digitize(rates, [LIGHT_THRESHOLD, HEAVY_THRESHOLD]).astype(np.int64)


# -------------------------------------------------------------------
# SAMPLES
# -------------------------------------------------------------------
@dataclass(frozen=True)
class NowcastSample:
    frames: tuple
    target_index: int
    # (row, col, PrecipClass) in output-patch coordinates
    labels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "labels", tuple(self.labels))
        _check_frames(self.frames)
        if not 1 <= self.target_index <= N_LEADS:
            raise InvalidTargetIndex(f"target_index must be in 1..{N_LEADS}, got {self.target_index}")

    @property
    def time(self):
        return self.frames[-1].timestamp

    @property
    def lead_minutes(self):
        return 60 * self.target_index


@dataclass(frozen=True)
class EstimationSample:
    frames: tuple
    # (row, col, accum_mm) in output-patch coordinates
    targets: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "targets", tuple(self.targets))
        _check_frames(self.frames)
        for _, _, accum in self.targets:
            if not np.isfinite(accum) or accum < 0:
                raise InvalidRate(f"Accumulation must be finite and non-negative, got {accum}")

    @property
    def time(self):
        return self.frames[-1].timestamp


def _check_frames(frames):
    if len(frames) != N_FRAMES:
        raise DimensionMismatch(f"Expected {N_FRAMES} frames, got {len(frames)}")
    steps = np.diff([f.timestamp for f in frames])
    if np.any(steps != FRAME_STEP_MINUTES):
        raise DimensionMismatch(f"Frame timestamps must advance by {FRAME_STEP_MINUTES} minutes, got steps {steps.tolist()}")


def encode_target_time(target_index, height, width):
    if not 1 <= target_index <= N_LEADS:
        raise InvalidTargetIndex(f"target_index must be in 1..{N_LEADS}, got {target_index}")
    encoding = np.zeros((N_LEADS, height, width), dtype=np.float32)
    encoding[target_index - 1] = 1.0
    return encoding


def _stack_frames(frames):
    shapes = {f.values.shape for f in frames}
    if len(shapes) != 1:
        raise DimensionMismatch(f"Frames have different dimensions: {sorted(shapes)}")
    return np.stack([f.values for f in frames]).astype(np.float32)


def assemble_nowcast_input(sample):
    """13 channels: frames oldest to newest, then the one-hot target time."""
    stacked = _stack_frames(sample.frames)
    _, height, width = stacked.shape
    return np.concatenate([stacked, encode_target_time(sample.target_index, height, width)])


def assemble_estimation_input(sample):
    return _stack_frames(sample.frames)


# -------------------------------------------------------------------
# STATIONS
# -------------------------------------------------------------------
def bind_station(table, geometry):
    """Attach pixel_row/pixel_col of the nearest cell center to every station."""
    row, col = geometry.to_pixel(table["lat"].to_numpy(), table["lon"].to_numpy())
    # ties go to the smaller index
    pixel_row = np.ceil(row - 0.5).astype(np.int64)
    pixel_col = np.ceil(col - 0.5).astype(np.int64)

    outside = (pixel_row < 0) | (pixel_row >= geometry.height) | (pixel_col < 0) | (pixel_col >= geometry.width)
    if outside.any():
        raise StationOutsideGrid(table.loc[outside, "station_id"].astype(str).tolist())

    bound = table.copy()
    bound["pixel_row"] = pixel_row
    bound["pixel_col"] = pixel_col
    return bound


def restrict_to_patch(bound, offset, out_hw):
    """Keep stations inside the output patch and add patch_row/patch_col."""
    patch_row = bound["pixel_row"] - offset
    patch_col = bound["pixel_col"] - offset
    inside = (patch_row >= 0) & (patch_row < out_hw) & (patch_col >= 0) & (patch_col < out_hw)
    if not inside.all():
        logger.warning(
            "Dropping %d stations outside the %dx%d output patch: %s",
            int((~inside).sum()), out_hw, out_hw, bound.loc[~inside, "station_id"].tolist(),
        )
    kept = bound.loc[inside].copy()
    kept["patch_row"] = patch_row[inside]
    kept["patch_col"] = patch_col[inside]
    return kept.reset_index(drop=True)


# -------------------------------------------------------------------
# SPLITS
# -------------------------------------------------------------------
TRAIN_YEARS = range(2014, 2019)
VAL_YEAR = 2019
TEST_YEAR = 2020
SUMMER_MONTHS = (6, 7, 8, 9)
SPLIT_NAMES = ("pretrain_train", "pretrain_val", "finetune_train", "finetune_val", "test")


@dataclass
class SplitCatalog:
    pretrain_train: list = field(default_factory=list)
    pretrain_val: list = field(default_factory=list)
    finetune_train: list = field(default_factory=list)
    finetune_val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name):
        return getattr(self, name)


def make_splits(timestamps, phase):
    if phase not in ("pretrain", "finetune"):
        raise ValueError(f"phase must be 'pretrain' or 'finetune', got {phase!r}")

    timestamps = np.asarray(sorted(set(int(t) for t in timestamps)), dtype=np.int64)
    dates = pd.to_datetime(timestamps, unit="m", utc=True)
    years = np.asarray(dates.year)
    summer = np.isin(np.asarray(dates.month), SUMMER_MONTHS)
    in_train_years = np.isin(years, list(TRAIN_YEARS))

    catalog = SplitCatalog()
    if phase == "pretrain":
        catalog.pretrain_train = timestamps[in_train_years].tolist()
        catalog.pretrain_val = timestamps[years == VAL_YEAR].tolist()
    else:
        catalog.finetune_train = timestamps[in_train_years & summer].tolist()
        catalog.finetune_val = timestamps[(years == VAL_YEAR) & summer].tolist()
    catalog.test = timestamps[(years == TEST_YEAR) & summer].tolist()

    for name in SPLIT_NAMES:
        if name.startswith(("pretrain", "finetune")) and not name.startswith(phase):
            continue
        size = len(catalog.split(name))
        if size == 0:
            logger.warning("Split %s is empty", name)
        else:
            logger.info("Split %s: %d timestamps", name, size)
    return catalog


def write_split_catalog(catalog, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLIT_NAMES:
        lines = [str(t) for t in catalog.split(name)]
        (directory / f"{name}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def read_split_catalog(directory):
    directory = Path(directory)
    catalog = SplitCatalog()
    for name in SPLIT_NAMES:
        path = directory / f"{name}.txt"
        if path.exists():
            values = [int(line) for line in path.read_text().split() if line.strip()]
            setattr(catalog, name, values)
    return catalog


# -------------------------------------------------------------------
# OBSERVATIONS
# -------------------------------------------------------------------
def read_observations(path):
    df = pd.read_csv(path, dtype={"station_id": str})
    missing = [c for c in OBSERVATION_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: observations are missing columns {missing}")
    df = df[OBSERVATION_COLUMNS].copy()
    df["timestamp_minutes"] = df["timestamp_minutes"].astype(np.int64)
    df["accum_mm_60min"] = pd.to_numeric(df["accum_mm_60min"], errors="coerce")
    logger.info("Loaded %d observations from %s", len(df), path)
    return df


def write_observations(observations, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    observations[OBSERVATION_COLUMNS].to_csv(path, index=False)


# -------------------------------------------------------------------
# DATASET
# -------------------------------------------------------------------
class RadarDataset:
    """
    Radar grids + bound stations + hourly observations on one geometry.

    Grids are clamped (and pooled when pool_factor > 1) on load. Station
    coordinates are bound to the (pooled) grid and restricted to the
    model's output patch once set_patch is called.
    """

    def __init__(self, grids, stations, observations, r_max=DEFAULT_R_MAX, pool_factor=1):
        if not grids:
            raise EmptyDataset("No radar grids")
        if pool_factor not in (1, 2, 4):
            raise ValueError(f"pool_factor must be 1, 2 or 4, got {pool_factor}")

        prepared = {}
        for timestamp, grid in grids.items():
            if pool_factor > 1:
                grid = mean_pool(grid, pool_factor)
            prepared[int(timestamp)] = clamp_grid(grid, r_max)
        self.grids = prepared
        self.r_max = r_max
        self.pool_factor = pool_factor

        first = next(iter(self.grids.values()))
        self.geometry = first.geometry
        self.stations = bind_station(stations, self.geometry)
        self.offset = 0
        self.out_hw = self.geometry.height
        self.patch_stations = restrict_to_patch(self.stations, 0, self.out_hw)

        obs = observations.dropna(subset=["accum_mm_60min"])
        obs = obs[pd.to_numeric(obs["accum_mm_60min"]) >= 0]
        if obs.empty:
            self.observations = pd.DataFrame(index=pd.Index([], dtype=np.int64, name="timestamp_minutes"))
        else:
            self.observations = obs.pivot_table(
                index="timestamp_minutes", columns="station_id", values="accum_mm_60min", aggfunc="last"
            )
        self._window_cache = {}

    @classmethod
    def load(cls, directory, r_max=DEFAULT_R_MAX, pool_factor=1):
        directory = Path(directory)
        grids = read_grid_directory(directory / "radar")
        stations = read_station_table(directory / "stations.csv")
        observations = read_observations(directory / "observations.csv")
        return cls(grids, stations, observations, r_max=r_max, pool_factor=pool_factor)

    def set_patch(self, offset, out_hw):
        if self.geometry.height != self.geometry.width:
            raise DimensionMismatch(f"Model input must be square, grids are {self.geometry.height}x{self.geometry.width}")
        self.offset = offset
        self.out_hw = out_hw
        self.patch_stations = restrict_to_patch(self.stations, offset, out_hw)

    @property
    def timestamps(self):
        return sorted(self.grids)

    def window(self, t):
        """The seven frames ending at t, or None if any is missing or has NaN cells."""
        if t in self._window_cache:
            return self._window_cache[t]
        frames = []
        for step in range(N_FRAMES):
            grid = self.grids.get(t - WINDOW_MINUTES + step * FRAME_STEP_MINUTES)
            if grid is None or np.isnan(grid.values).any():
                frames = None
                break
            frames.append(grid)
        result = tuple(frames) if frames else None
        self._window_cache[t] = result
        return result

    def sample_times(self, candidates=None):
        """Timestamps with a complete, NaN-free input window."""
        candidates = self.timestamps if candidates is None else candidates
        usable = [int(t) for t in candidates if self.window(int(t)) is not None]
        skipped = len(candidates) - len(usable)
        if skipped:
            logger.info("Skipped %d of %d timestamps without a complete NaN-free window", skipped, len(candidates))
        return usable

    def station_accumulations(self, t):
        """Observed accumulation (mm over t-60..t) per patch station, NaN when unobserved."""
        ids = self.patch_stations["station_id"]
        if t not in self.observations.index:
            return np.full(len(ids), np.nan)
        row = self.observations.loc[t]
        return row.reindex(ids).to_numpy(dtype=np.float64)

    def _patch_points(self, values):
        present = ~np.isnan(values)
        rows = self.patch_stations["patch_row"].to_numpy()[present]
        cols = self.patch_stations["patch_col"].to_numpy()[present]
        return rows, cols, values[present], present

    def nowcast_sample(self, t, target_index):
        frames = self.window(t)
        if frames is None:
            return None
        accum = self.station_accumulations(t + 60 * target_index)
        rows, cols, values, _ = self._patch_points(accum)
        labels = [(int(r), int(c), precip_class(v)) for r, c, v in zip(rows, cols, values)]
        return NowcastSample(frames=frames, target_index=target_index, labels=labels)

    def estimation_sample(self, t):
        frames = self.window(t)
        if frames is None:
            return None
        accum = self.station_accumulations(t)
        rows, cols, values, _ = self._patch_points(accum)
        targets = [(int(r), int(c), float(v)) for r, c, v in zip(rows, cols, values)]
        return EstimationSample(frames=frames, targets=targets)

    def reflectivity_target(self, t, lead_minutes):
        """Clamped reflectivity in the output patch at t + lead (NaN where missing), or None."""
        grid = self.grids.get(t + lead_minutes)
        if grid is None:
            return None
        o, n = self.offset, self.out_hw
        return grid.values[o:o + n, o:o + n]

    def current_classes(self, t):
        """Class observed over t-60..t per patch station (-1 where unobserved)."""
        accum = self.station_accumulations(t)
        classes = np.full(len(accum), -1, dtype=np.int64)
        present = ~np.isnan(accum)
        classes[present] = precip_classes(accum[present])
        return classes

    def station_rows(self, present, t, **columns):
        """Table of the patch stations selected by present at time t, with extra columns."""
        stations = self.patch_stations.loc[present]
        table = pd.DataFrame({
            "station_id": stations["station_id"].to_numpy(),
            "lat": stations["lat"].to_numpy(),
            "lon": stations["lon"].to_numpy(),
            "timestamp": t,
        })
        for name, values in columns.items():
            table[name] = values
        return table
