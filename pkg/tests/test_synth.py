import numpy as np
import pandas as pd
import pytest

from nowcast.baselines import ZRParams, zr_dbz, zr_estimates
from nowcast.dataset import PrecipClass, RadarDataset, make_splits
from nowcast.errors import InfeasibleScenario, UnreachablePrevalence
from nowcast.synth import (
    EPISODE_FRAMES,
    RainCell,
    SynthScenario,
    draw_cells,
    episode_start,
    gen_episodes,
    gen_imbalanced_set,
    gen_sequence,
    gen_station_truth,
    gen_stations,
    write_synth_data,
)
from nowcast.trainer import estimation_mse


def _small(**values):
    base = {"seed": 1, "size": 16, "n_cells": 3, "n_stations": 6, "station_margin": 3}
    base.update(values)
    return SynthScenario(**base)


def test_constant_light_rain():
    scenario = _small(n_cells=0, background_dbz=zr_dbz(2.0))
    frames, rates = gen_sequence(scenario, 0, 7)
    truth = gen_station_truth(rates, gen_stations(scenario))
    assert truth["accum_mm_60min"].to_numpy() == pytest.approx(np.full(6, 2.0), rel=1e-5)
    assert set(truth["class"]) == {int(PrecipClass.LIGHT)}


def test_constant_heavy_rain():
    scenario = _small(n_cells=0, background_dbz=zr_dbz(12.0))
    _, rates = gen_sequence(scenario, 0, 7)
    truth = gen_station_truth(rates, gen_stations(scenario))
    assert set(truth["class"]) == {int(PrecipClass.HEAVY)}


def test_ramp_averages_over_the_hour():
    stations = gen_stations(_small())
    rates = [np.full((16, 16), 14.0 * j / 6) for j in range(7)]
    truth = gen_station_truth(rates, stations)
    assert truth["accum_mm_60min"].to_numpy() == pytest.approx(np.full(6, 7.0))
    assert set(truth["class"]) == {int(PrecipClass.LIGHT)}


def test_frames_are_clamped_float32():
    scenario = _small(cells=(RainCell(8, 8, 99.0, 4.0),), background_dbz=5.0)
    frames, _ = gen_sequence(scenario, 0, 3)
    assert frames[0].values.dtype == np.float32
    assert frames[0].values.max() <= 99.5
    assert [f.timestamp for f in frames] == [0, 10, 20]


def test_cells_advect():
    scenario = _small(cells=(RainCell(8.0, 4.0, 40.0, 2.0, v_row=0.0, v_col=1.0),))
    frames, _ = gen_sequence(scenario, 0, 4)
    peaks = [int(np.argmax(f.values[8])) for f in frames]
    assert peaks == [4, 5, 6, 7]


def test_moving_cell_keeps_its_mass():
    scenario = _small(size=64, n_stations=0, cells=(RainCell(28.0, 30.0, 40.0, 3.0, v_row=0.45, v_col=-0.3),))
    frames, _ = gen_sequence(scenario, 0, EPISODE_FRAMES)
    masses = np.array([frame.values.astype(np.float64).sum() for frame in frames])
    assert masses == pytest.approx(np.full(len(masses), masses[0]), rel=0.01)


def test_zero_velocity_frames_are_identical():
    cells = (RainCell(8.0, 8.0, 45.0, 3.0), RainCell(4.0, 11.0, 30.0, 2.0))
    frames, rates = gen_sequence(_small(cells=cells), 0, 10)
    assert all(np.array_equal(frame.values, frames[0].values) for frame in frames)
    assert all(np.array_equal(rate, rates[0]) for rate in rates)


def test_sequences_are_seeded():
    scenario = _small()
    a, _ = gen_sequence(scenario, 600, 3)
    b, _ = gen_sequence(scenario, 600, 3)
    c, _ = gen_sequence(scenario, 1200, 3)
    assert a == b
    assert a != c


def test_stations_respect_margin():
    stations = gen_stations(_small(n_stations=20))
    assert len(stations) == 20
    assert stations["pixel_row"].between(3, 12).all()
    assert stations["pixel_col"].between(3, 12).all()
    assert not stations[["pixel_row", "pixel_col"]].duplicated().any()


@pytest.mark.parametrize("values", [
    {"heavy_prevalence": 0.0},
    {"heavy_prevalence": 1.0},
    {"amplitude_range": (10.0, 120.0)},
    {"station_margin": 8},
    {"cells": (RainCell(1, 1, 150.0, 2.0),)},
])
def test_infeasible_scenarios(values):
    with pytest.raises(InfeasibleScenario):
        _small(**values)


def test_episode_starts_rotate_through_summers():
    years = [pd.Timestamp(episode_start(i) * 60, unit="s", tz="UTC").year for i in range(7)]
    assert years == list(range(2014, 2021))
    assert pd.Timestamp(episode_start(0) * 60, unit="s", tz="UTC").month == 6


def test_episodes_cover_every_split():
    data = gen_episodes(_small(), 7)
    assert len(data.grids) == 7 * EPISODE_FRAMES
    catalog = make_splits(sorted(data.grids), "finetune")
    assert catalog.finetune_train and catalog.finetune_val and catalog.test


def test_zr_estimates_reproduce_synthetic_truth():
    scenario = _small(zr=ZRParams(a=250.0, b=1.5))
    data = gen_episodes(scenario, 7)
    dataset = RadarDataset(data.grids, data.stations, data.observations)
    test_times = make_splits(dataset.timestamps, "finetune").test
    estimates = zr_estimates(dataset, test_times, scenario.zr)
    assert len(estimates) > 0
    assert estimation_mse(estimates) < 1e-15


def test_imbalanced_set_hits_prevalence():
    scenario = SynthScenario(seed=0, heavy_prevalence=0.02)
    data = gen_imbalanced_set(scenario, 10000)
    assert len(data.observations) >= 10000
    assert 0.016 <= data.heavy_fraction <= 0.024
    fractions = data.heavy_fractions
    assert set(fractions) == {"train", "val", "test"}
    for group, fraction in fractions.items():
        assert 0.016 <= fraction <= 0.024, group


def test_small_imbalanced_set_covers_every_split():
    data = gen_imbalanced_set(_small(), 50)
    assert len(data.grids) == 14 * EPISODE_FRAMES
    years = sorted({pd.Timestamp(t * 60, unit="s").year for t in data.grids})
    assert years == list(range(2014, 2021))
    catalog = make_splits(sorted(data.grids), "finetune")
    assert catalog.finetune_train and catalog.finetune_val and catalog.test
    assert set(data.gains) == {"train", "val", "test"}
    for fraction in data.heavy_fractions.values():
        assert 0.016 <= fraction <= 0.024


def test_imbalanced_set_is_deterministic():
    a = gen_imbalanced_set(_small(), 50)
    b = gen_imbalanced_set(_small(), 50)
    pd.testing.assert_frame_equal(a.observations, b.observations)
    assert a.gains == b.gains


def test_cell_tracks_cross_the_station_box():
    scenario = _small(n_cells=20)
    middle = EPISODE_FRAMES // 2
    for cell in draw_cells(scenario, 600):
        assert 3 <= cell.row + cell.v_row * middle <= 13
        assert 3 <= cell.col + cell.v_col * middle <= 13


def test_unreachable_prevalence():
    scenario = _small(n_cells=0, n_stations=2)
    with pytest.raises(UnreachablePrevalence):
        gen_imbalanced_set(scenario, 50, prevalence=0.5)


def test_imbalanced_set_rejects_zero_prevalence():
    with pytest.raises(InfeasibleScenario):
        gen_imbalanced_set(_small(), 100, prevalence=0.0)


def test_written_data_loads_back(tmp_path):
    data = gen_episodes(_small(), 1)
    write_synth_data(data, tmp_path)
    dataset = RadarDataset.load(tmp_path)
    assert len(dataset.grids) == EPISODE_FRAMES
    assert dataset.stations["station_id"].tolist() == data.stations["station_id"].tolist()
    t = dataset.timestamps[6]
    expected = data.observations[data.observations["timestamp_minutes"] == t]["accum_mm_60min"].to_numpy()
    assert dataset.station_accumulations(t) == pytest.approx(expected)
    assert "zr_a=200.0" in (tmp_path / "scenario.txt").read_text()
