"""
Seeded synthetic radar and rain-gauge data: advecting Gaussian rain
cells over a background, rain rates from a known Z-R law, and hourly
station accumulations derived from those rates.

Output is written in the same formats the loaders read (RGR1 files,
stations.csv, observations.csv), so the whole pipeline can run on it.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from nowcast.baselines import ZRParams, zr_rate
from nowcast.dataset import (
    FRAME_STEP_MINUTES,
    N_FRAMES,
    N_LEADS,
    TEST_YEAR,
    TRAIN_YEARS,
    VAL_YEAR,
    PrecipClass,
    bind_station,
    precip_classes,
    write_observations,
)
from nowcast.errors import InfeasibleScenario, UnreachablePrevalence
from nowcast.grid_io import (
    DEFAULT_R_MAX,
    GridGeometry,
    RadarGrid,
    grid_filename,
    write_radar_grid,
    write_station_table,
)

logger = logging.getLogger(__name__)

EPISODE_FRAMES = N_FRAMES + N_LEADS * 60 // FRAME_STEP_MINUTES
EPISODE_YEARS = tuple(range(2014, 2021))
PREVALENCE_TOLERANCE = 0.2
MAX_RETRIES = 60
MIN_EPISODES_PER_YEAR = 2


@dataclass(frozen=True)
class RainCell:
    row: float
    col: float
    amplitude: float
    width: float
    # cells per frame
    v_row: float = 0.0
    v_col: float = 0.0


@dataclass(frozen=True)
class SynthScenario:
    seed: int = 0
    size: int = 64
    n_cells: int = 4
    amplitude_range: tuple = (25.0, 50.0)
    width_range: tuple = (3.0, 8.0)
    speed_max: float = 0.5
    background_dbz: float = 0.0
    heavy_prevalence: float = 0.02
    zr: ZRParams = ZRParams()
    r_max: int = DEFAULT_R_MAX
    n_stations: int = 40
    # stations stay this many cells away from every edge
    station_margin: int = 21
    resolution_km: float = 1.0
    origin_lat: float = 37.5
    origin_lon: float = 127.0
    gain: float = 1.0
    # explicit cells replace the random draw
    cells: tuple = field(default=())

    def __post_init__(self):
        top = self.r_max - 0.5
        lo, hi = self.amplitude_range
        if self.size < 1:
            raise InfeasibleScenario(f"Grid size must be positive, got {self.size}")
        if not 0 <= lo <= hi <= top:
            raise InfeasibleScenario(f"Amplitudes {self.amplitude_range} must lie within [0, {top}]")
        if not 0 < self.width_range[0] <= self.width_range[1]:
            raise InfeasibleScenario(f"Cell widths {self.width_range} must be positive")
        if not 0 < self.heavy_prevalence < 1:
            raise InfeasibleScenario(f"HEAVY prevalence must be in (0, 1), got {self.heavy_prevalence}")
        if not -0.5 <= self.background_dbz <= top:
            raise InfeasibleScenario(f"Background {self.background_dbz} dBZ is outside [-0.5, {top}]")
        if self.n_cells < 0 or self.n_stations < 0 or self.speed_max < 0 or self.gain < 0:
            raise InfeasibleScenario("Cell count, station count, speed and gain must be non-negative")
        if 2 * self.station_margin >= self.size and self.n_stations:
            raise InfeasibleScenario(f"Station margin {self.station_margin} leaves no room on a {self.size} grid")
        for cell in self.cells:
            if not 0 <= cell.amplitude <= top or cell.width <= 0:
                raise InfeasibleScenario(f"Cell {cell} has amplitude outside [0, {top}] or non-positive width")

    @property
    def geometry(self):
        return GridGeometry(self.size, self.size, self.resolution_km, self.origin_lat, self.origin_lon)


@dataclass
class SynthData:
    grids: dict
    stations: pd.DataFrame
    observations: pd.DataFrame
    rates: dict
    scenario: SynthScenario
    # cell gain per split group, set by gen_imbalanced_set
    gains: dict = field(default_factory=dict)

    @property
    def heavy_fraction(self):
        return heavy_fraction_of(self.observations)

    @property
    def heavy_fractions(self):
        """HEAVY fraction of the labels in each split group (train, val, test)."""
        if self.observations.empty:
            return {}
        years = pd.to_datetime(self.observations["timestamp_minutes"].astype(np.int64) * 60, unit="s").dt.year
        groups = years.map(split_group)
        return {group: heavy_fraction_of(part) for group, part in self.observations.groupby(groups)}


def heavy_fraction_of(observations):
    if observations.empty:
        return 0.0
    classes = precip_classes(observations["accum_mm_60min"].to_numpy())
    return float(np.mean(classes == PrecipClass.HEAVY))


# -------------------------------------------------------------------
# FIELDS
# -------------------------------------------------------------------
def draw_cells(scenario, start):
    """
    Rain cells of the sequence starting at start, seeded by (seed, start).

    Each cell is halfway along its track at the middle frame of an episode,
    and that midpoint lies inside the station box.
    """
    if scenario.cells:
        return scenario.cells
    rng = np.random.default_rng([scenario.seed & (2 ** 63 - 1), int(start)])
    if scenario.n_stations:
        lo, hi = scenario.station_margin, scenario.size - scenario.station_margin
    else:
        lo, hi = 0, scenario.size
    middle = EPISODE_FRAMES // 2
    cells = []
    for _ in range(scenario.n_cells):
        mid_row, mid_col = rng.uniform(lo, hi, size=2)
        amplitude = float(rng.uniform(*scenario.amplitude_range))
        width = float(rng.uniform(*scenario.width_range))
        v_row, v_col = rng.uniform(-scenario.speed_max, scenario.speed_max, size=2)
        cells.append(RainCell(
            row=float(mid_row - v_row * middle),
            col=float(mid_col - v_col * middle),
            amplitude=amplitude,
            width=width,
            v_row=float(v_row),
            v_col=float(v_col),
        ))
    return tuple(cells)


def cell_field(cells, size, frame, gain=1.0):
    """Sum of the Gaussian cells at a frame index, before background and clamping."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    total = np.zeros((size, size))
    for cell in cells:
        dr = rows - (cell.row + cell.v_row * frame)
        dc = cols - (cell.col + cell.v_col * frame)
        total += gain * cell.amplitude * np.exp(-(dr ** 2 + dc ** 2) / (2 * cell.width ** 2))
    return total


def gen_sequence(scenario, start, length):
    """
    Frames start, start+10, ... and the true rain rate of each frame.

    Returns:
        (list of RadarGrid, list of rate arrays in mm/hr)
    """
    if length < 1:
        raise InfeasibleScenario(f"Sequence length must be positive, got {length}")
    cells = draw_cells(scenario, start)
    frames, rates = [], []
    for j in range(length):
        dbz = scenario.background_dbz + cell_field(cells, scenario.size, j, scenario.gain)
        values = np.clip(dbz, -0.5, scenario.r_max - 0.5).astype(np.float32)
        grid = RadarGrid(
            timestamp=start + j * FRAME_STEP_MINUTES,
            resolution_km=scenario.resolution_km,
            origin_lat=scenario.origin_lat,
            origin_lon=scenario.origin_lon,
            values=values,
        )
        frames.append(grid)
        rates.append(zr_rate(grid.values, scenario.zr))
    return frames, rates


# -------------------------------------------------------------------
# STATIONS
# -------------------------------------------------------------------
def gen_stations(scenario):
    """Stations at distinct cell centers inside the margin, seeded by scenario.seed."""
    rng = np.random.default_rng([scenario.seed & (2 ** 63 - 1), 0x57A7])
    lo, hi = scenario.station_margin, scenario.size - scenario.station_margin
    span = hi - lo
    count = min(scenario.n_stations, span * span)
    flat = np.sort(rng.choice(span * span, size=count, replace=False))
    rows, cols = lo + flat // span, lo + flat % span
    lat, lon = scenario.geometry.to_latlon(rows, cols)
    table = pd.DataFrame({
        "station_id": [f"S{i + 1:03d}" for i in range(count)],
        "lat": np.asarray(lat, dtype=np.float64),
        "lon": np.asarray(lon, dtype=np.float64),
    })
    return bind_station(table, scenario.geometry)


def gen_station_truth(rates, stations):
    """
    Hourly accumulation per station from the window's true rates: the mean
    of the in-window rates times one hour.
    """
    rows = stations["pixel_row"].to_numpy()
    cols = stations["pixel_col"].to_numpy()
    samples = np.stack([rate[rows, cols] for rate in rates])
    accum = samples.mean(axis=0)
    return pd.DataFrame({
        "station_id": stations["station_id"].to_numpy(),
        "accum_mm_60min": accum,
        "class": precip_classes(accum),
    })


# -------------------------------------------------------------------
# DATASETS
# -------------------------------------------------------------------
def episode_start(index):
    """Start minute of an episode; episodes rotate through the summers of 2014-2020."""
    year = EPISODE_YEARS[index % len(EPISODE_YEARS)]
    day = index // len(EPISODE_YEARS)
    start = pd.Timestamp(year=year, month=6, day=1, tz="UTC") + timedelta(days=2 * day)
    return int(start.timestamp()) // 60


def split_group(year):
    """train, val or test for a calendar year; None outside the split years."""
    if year in TRAIN_YEARS:
        return "train"
    if year == VAL_YEAR:
        return "val"
    if year == TEST_YEAR:
        return "test"
    return None


def _episodes(scenario, indices, length, stations):
    grids, rates, observations = {}, {}, []
    for index in indices:
        start = episode_start(index)
        frames, frame_rates = gen_sequence(scenario, start, length)
        for grid, rate in zip(frames, frame_rates):
            grids[grid.timestamp] = grid
            rates[grid.timestamp] = rate
        for end in range(N_FRAMES - 1, length):
            truth = gen_station_truth(frame_rates[end - N_FRAMES + 1:end + 1], stations)
            truth["timestamp_minutes"] = frames[end].timestamp
            observations.append(truth)
    return grids, rates, observations


def _observation_table(observations):
    if not observations:
        return pd.DataFrame(columns=["station_id", "accum_mm_60min", "class", "timestamp_minutes"])
    return pd.concat(observations, ignore_index=True)


def gen_episodes(scenario, n_episodes, length=EPISODE_FRAMES):
    stations = gen_stations(scenario)
    grids, rates, observations = _episodes(scenario, range(n_episodes), length, stations)
    return SynthData(grids=grids, stations=stations, observations=_observation_table(observations),
                     rates=rates, scenario=scenario)


def _bisect_gain(scenario, indices, length, stations, low_target, high_target, group):
    top = scenario.r_max - 0.5
    peak = max([c.amplitude for c in scenario.cells] or [scenario.amplitude_range[1]])
    low, high = 0.0, max(top / peak if peak > 0 else 1.0, scenario.gain)
    for attempt in range(1, MAX_RETRIES + 1):
        gain = scenario.gain if attempt == 1 else (low + high) / 2
        grids, rates, observations = _episodes(replace(scenario, gain=gain), indices, length, stations)
        fraction = heavy_fraction_of(_observation_table(observations))
        logger.debug("%s attempt %d: gain %.5f gives HEAVY fraction %.4f", group, attempt, gain, fraction)
        if low_target <= fraction <= high_target:
            return gain, grids, rates, observations
        if fraction < low_target:
            low = max(low, gain)
        else:
            high = min(high, gain)
    raise UnreachablePrevalence(
        f"{group} HEAVY fraction stayed outside [{low_target:.4f}, {high_target:.4f}] after {MAX_RETRIES} attempts"
    )


def gen_imbalanced_set(scenario, n_labels, prevalence=None, length=EPISODE_FRAMES):
    """
    Episodes with at least n_labels station labels. Every split year gets at
    least MIN_EPISODES_PER_YEAR episodes, and the cell gain is bisected
    separately for the train, val and test years so that each group's HEAVY
    fraction is within 20% (relative) of prevalence.
    """
    prevalence = scenario.heavy_prevalence if prevalence is None else prevalence
    if not 0 < prevalence < 1:
        raise InfeasibleScenario(f"HEAVY prevalence must be in (0, 1), got {prevalence}")
    if scenario.n_stations == 0:
        raise InfeasibleScenario("A labeled set needs at least one station")
    n_years = len(EPISODE_YEARS)
    per_episode = (length - N_FRAMES + 1) * scenario.n_stations
    needed = max(MIN_EPISODES_PER_YEAR * n_years, math.ceil(n_labels / per_episode))
    n_episodes = n_years * math.ceil(needed / n_years)
    low_target, high_target = prevalence * (1 - PREVALENCE_TOLERANCE), prevalence * (1 + PREVALENCE_TOLERANCE)

    stations = gen_stations(scenario)
    groups = {}
    for index in range(n_episodes):
        year = EPISODE_YEARS[index % n_years]
        groups.setdefault(split_group(year), []).append(index)

    grids, rates, observations, gains = {}, {}, [], {}
    for group, indices in groups.items():
        gain, group_grids, group_rates, group_observations = _bisect_gain(
            scenario, indices, length, stations, low_target, high_target, group)
        gains[group] = gain
        grids.update(group_grids)
        rates.update(group_rates)
        observations.extend(group_observations)

    table = _observation_table(observations).sort_values(["timestamp_minutes", "station_id"], ignore_index=True)
    data = SynthData(grids=grids, stations=stations, observations=table, rates=rates, scenario=scenario,
                     gains=gains)
    logger.info("Synthetic set: %d episodes, %d labels, HEAVY fractions %s (target %.4f, gains %s)",
                n_episodes, len(table), {k: round(v, 4) for k, v in data.heavy_fractions.items()},
                prevalence, {k: round(v, 4) for k, v in gains.items()})
    return data


def write_synth_data(data, directory):
    """radar/<timestamp>.rgr, stations.csv, observations.csv and scenario.txt."""
    directory = Path(directory)
    for timestamp, grid in sorted(data.grids.items()):
        write_radar_grid(grid, directory / "radar" / grid_filename(timestamp))
    write_station_table(data.stations, directory / "stations.csv")
    write_observations(data.observations, directory / "observations.csv")
    scenario = data.scenario
    lines = [f"{name}={getattr(scenario, name)}" for name in
             ("seed", "size", "n_cells", "speed_max", "background_dbz", "heavy_prevalence",
              "n_stations", "gain")]
    lines.append(f"zr_a={scenario.zr.a}")
    lines.append(f"zr_b={scenario.zr.b}")
    for group, gain in sorted(data.gains.items()):
        lines.append(f"gain_{group}={gain}")
    (directory / "scenario.txt").write_text("\n".join(lines) + "\n")
    logger.info("Wrote %d grids, %d stations and %d observations to %s",
                len(data.grids), len(data.stations), len(data.observations), directory)
