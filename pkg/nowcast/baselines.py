"""
Reference methods: the persistence nowcast and the Z-R relationship
Z = a * R**b (Z linear reflectivity, R rain rate in mm/hr).
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from nowcast.dataset import LEAD_TIMES, precip_classes
from nowcast.errors import DegenerateFit, InsufficientData, InvalidValue
from nowcast.metrics import ESTIMATE_COLUMNS, PREDICTION_COLUMNS

logger = logging.getLogger(__name__)

FIT_RATE_FLOOR = 0.1


@dataclass(frozen=True)
class ZRParams:
    a: float = 200.0
    b: float = 1.49

    def __post_init__(self):
        if not self.a > 0:
            raise InvalidValue("a", f"must be positive, got {self.a}")
        if not self.b > 0:
            raise InvalidValue("b", f"must be positive, got {self.b}")


# -------------------------------------------------------------------
# PERSISTENCE
# -------------------------------------------------------------------
def persistence_nowcast(current_classes):
    """Every lead time predicts the class observed now."""
    current = np.asarray(current_classes, dtype=np.int64)
    return {lead: current.copy() for lead in LEAD_TIMES}


# -------------------------------------------------------------------
# Z-R
# -------------------------------------------------------------------
def zr_rate(dbz, params=ZRParams()):
    """Rain rate in mm/hr for reflectivity in dBZ; NaN maps to 0."""
    dbz = np.asarray(dbz, dtype=np.float64)
    z = 10.0 ** (dbz / 10.0)
    rate = (z / params.a) ** (1.0 / params.b)
    rate = np.where(np.isnan(dbz), 0.0, rate)
    return float(rate) if rate.ndim == 0 else rate


def zr_dbz(rate, params=ZRParams()):
    """Inverse of zr_rate for positive rates."""
    rate = np.asarray(rate, dtype=np.float64)
    dbz = 10.0 * np.log10(params.a * rate ** params.b)
    return float(dbz) if dbz.ndim == 0 else dbz


def fit_zr(pairs):
    """
    Least squares of dbz/10 = log10(a) + b * log10(R) over (dbz, rate)
    pairs with rate >= 0.1 mm/hr.
    """
    pairs = np.asarray(list(pairs), dtype=np.float64).reshape(-1, 2)
    usable = pairs[np.isfinite(pairs).all(axis=1) & (pairs[:, 1] >= FIT_RATE_FLOOR)]
    if len(usable) < 2:
        raise InsufficientData(f"Need at least 2 pairs with rate >= {FIT_RATE_FLOOR} mm/hr, got {len(usable)}")

    log_rate = np.log10(usable[:, 1])
    if np.ptp(log_rate) == 0:
        raise DegenerateFit("All rates are equal; the exponent is undetermined")

    design = np.column_stack([np.ones_like(log_rate), log_rate])
    (log_a, b), *_ = np.linalg.lstsq(design, usable[:, 0] / 10.0, rcond=None)
    if not b > 0:
        raise DegenerateFit(f"Fitted exponent b={b:.4g} is not positive")

    params = ZRParams(a=float(10.0 ** log_a), b=float(b))
    logger.info("Fitted Z-R law a=%.4f b=%.4f from %d of %d pairs", params.a, params.b, len(usable), len(pairs))
    return params


def zr_hourly_estimate(frames, params, pixel):
    """
    Mean Z-R rate over the window's frames at pixel, read as mm over one hour.

    Returns:
        (estimate_mm, flagged); flagged is True when every frame is missing
        at the pixel, in which case the estimate is 0.
    """
    row, col = pixel
    values = np.array([frame.values[row, col] for frame in frames], dtype=np.float64)
    if np.isnan(values).all():
        return 0.0, True
    return float(np.mean(zr_rate(values, params))), False


def zr_hourly_field(frames, params):
    """zr_hourly_estimate over every pixel at once."""
    stack = np.stack([frame.values for frame in frames]).astype(np.float64)
    return zr_rate(stack, params).mean(axis=0)


def write_zr_params(params, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"a={float(params.a)!r}\nb={float(params.b)!r}\n")


def read_zr_params(path):
    values = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = float(value)
    missing = {"a", "b"} - set(values)
    if missing:
        raise InvalidValue(sorted(missing)[0], f"missing from {path}")
    return ZRParams(a=values["a"], b=values["b"])


# -------------------------------------------------------------------
# DATASET RUNS
# -------------------------------------------------------------------
def persistence_predictions(dataset, times):
    """Persistence over every usable timestamp, as a predictions table."""
    frames = []
    for t in dataset.sample_times(times):
        current = dataset.current_classes(t)
        forecast = persistence_nowcast(current)
        for lead in LEAD_TIMES:
            accum = dataset.station_accumulations(t + lead)
            present = np.isfinite(accum) & (current >= 0)
            if present.any():
                frames.append(dataset.station_rows(present, t, lead_minutes=lead,
                                                   predicted=forecast[lead][present],
                                                   actual=precip_classes(accum[present])))
    if not frames:
        return pd.DataFrame(columns=PREDICTION_COLUMNS)
    return pd.concat(frames, ignore_index=True)[PREDICTION_COLUMNS]


def zr_estimates(dataset, times, params):
    """Z-R hourly estimate at every observed patch station, as an estimates table."""
    rows = dataset.patch_stations["pixel_row"].to_numpy()
    cols = dataset.patch_stations["pixel_col"].to_numpy()
    frames = []
    flagged = 0
    for t in dataset.sample_times(times):
        accum = dataset.station_accumulations(t)
        present = np.isfinite(accum)
        if not present.any():
            continue
        window = dataset.window(t)
        estimates = []
        for row, col in zip(rows[present], cols[present]):
            value, missing = zr_hourly_estimate(window, params, (row, col))
            flagged += missing
            estimates.append(value)
        frames.append(dataset.station_rows(present, t, estimate_mm=estimates, truth_mm=accum[present]))
    if flagged:
        logger.warning("%d station estimates had no radar data and were set to 0", flagged)
    if not frames:
        return pd.DataFrame(columns=ESTIMATE_COLUMNS)
    return pd.concat(frames, ignore_index=True)[ESTIMATE_COLUMNS]


def zr_fit_pairs(dataset, times):
    """(dBZ, rate) pairs: newest-frame reflectivity against the hourly accumulation at each station."""
    rows = dataset.stations["pixel_row"].to_numpy()
    cols = dataset.stations["pixel_col"].to_numpy()
    ids = dataset.stations["station_id"]
    pairs = []
    for t in dataset.sample_times(times):
        if t not in dataset.observations.index:
            continue
        accum = dataset.observations.loc[t].reindex(ids).to_numpy(dtype=np.float64)
        dbz = dataset.grids[t].values[rows, cols].astype(np.float64)
        present = np.isfinite(accum) & np.isfinite(dbz)
        pairs.extend(zip(dbz[present], accum[present]))
    return pairs
