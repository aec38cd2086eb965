import numpy as np
import pandas as pd

from nowcast.grid_io import GridGeometry, RadarGrid

ORIGIN = (37.5, 127.0)


def minutes(text):
    """Epoch minutes of a UTC date string."""
    return int(pd.Timestamp(text, tz="UTC").timestamp()) // 60


def make_grid(timestamp, values):
    return RadarGrid(timestamp=timestamp, resolution_km=1.0, origin_lat=ORIGIN[0], origin_lon=ORIGIN[1],
                     values=np.asarray(values, dtype=np.float32))


def make_grids(start, count, size=16, value=20.0):
    return {start + 10 * j: make_grid(start + 10 * j, np.full((size, size), value)) for j in range(count)}


def make_stations(pixels, size=16):
    geometry = GridGeometry(size, size, 1.0, *ORIGIN)
    rows, cols = zip(*pixels)
    lat, lon = geometry.to_latlon(np.array(rows, dtype=float), np.array(cols, dtype=float))
    return pd.DataFrame({
        "station_id": [f"S{i + 1}" for i in range(len(pixels))],
        "lat": lat,
        "lon": lon,
    })


def make_observations(records):
    """records: (station_id, timestamp_minutes, accum_mm_60min) tuples."""
    return pd.DataFrame(records, columns=["station_id", "timestamp_minutes", "accum_mm_60min"])


SUMMER_START = minutes("2020-07-01 00:00")
