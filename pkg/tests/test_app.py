import argparse

import pandas as pd
import pytest
import torch

from app import manifest_path, parse_and_dispatch, parse_event, report_tables
from helpers import minutes
from nowcast.errors import MissingReport
from nowcast.metrics import ESTIMATE_COLUMNS, PREDICTION_COLUMNS, EvalReport
from nowcast.synth import EPISODE_FRAMES, SynthScenario, gen_episodes, write_synth_data
from nowcast.trainer import load_checkpoint

TINY_CONFIG = """\
# desk-sized model for a 16x16 grid
depth=0
input_hw=16
base_channels=2
steps=2
batch_size=2
validation_interval=1
learning_rate=0.001
"""


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("data")
    scenario = SynthScenario(seed=2, size=16, n_cells=3, n_stations=6, station_margin=3)
    write_synth_data(gen_episodes(scenario, 7), directory)
    return directory


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


def _manifest(out):
    lines = manifest_path(out).read_text().splitlines()
    return dict(line.split("=", 1) for line in lines)


# -------------------------------------------------------------------
# ARGUMENTS
# -------------------------------------------------------------------
def test_missing_subcommand_is_usage_error():
    assert parse_and_dispatch([]) == 2


def test_unknown_subcommand_is_usage_error():
    assert parse_and_dispatch(["convert"]) == 2


def test_help_exits_cleanly():
    assert parse_and_dispatch(["--help"]) == 0


def test_bad_option_value_is_usage_error(tmp_path):
    assert parse_and_dispatch(["baseline", "--method", "radar", "--data", "x", "--out", str(tmp_path)]) == 2


def test_parse_event_minutes():
    assert parse_event("37.5, 127.0, 26000000") == ((37.5, 127.0), 26000000)


def test_parse_event_date_is_utc():
    assert parse_event("37.5,127.0,2020-07-01 00:00") == ((37.5, 127.0), minutes("2020-07-01 00:00"))
    assert parse_event("37.5,127.0,2020-07-01T09:00+09:00")[1] == minutes("2020-07-01 00:00")


@pytest.mark.parametrize("text", ["37.5,127.0", "north,127.0,0", "37.5,127.0,someday"])
def test_parse_event_rejects_garbage(text):
    with pytest.raises(argparse.ArgumentTypeError):
        parse_event(text)


# -------------------------------------------------------------------
# SUBCOMMANDS
# -------------------------------------------------------------------
def test_synth_writes_a_dataset(tmp_path):
    out = tmp_path / "synth"
    assert parse_and_dispatch(["synth", "--out", str(out), "--labels", "1000"]) == 0
    assert (out / "stations.csv").exists()
    assert (out / "observations.csv").exists()
    # two episodes for each of the seven split years
    assert len(list((out / "radar").glob("*.rgr"))) == 14 * EPISODE_FRAMES
    assert "gain_test=" in (out / "scenario.txt").read_text()
    assert _manifest(out)["subcommand"] == "synth"


def test_infeasible_synth_fails(tmp_path):
    assert parse_and_dispatch(["synth", "--out", str(tmp_path / "s"), "--size", "16", "--margin", "8"]) == 1


def test_persistence_baseline_directory(data_dir, tmp_path):
    out = tmp_path / "persistence"
    assert parse_and_dispatch(["baseline", "--method", "persistence", "--data", str(data_dir), "--out", str(out)]) == 0
    report = EvalReport.read_csv(out / "report.csv")
    assert list(report.table.index) == ["60", "120", "180", "240", "300", "360", "Average"]
    assert list(pd.read_csv(out / "predictions.csv").columns) == PREDICTION_COLUMNS
    assert (out / "report.txt").exists()
    manifest = _manifest(out)
    assert manifest["option.method"] == "persistence"
    assert manifest["option.split"] == "test"


def test_zr_baseline_file_target(data_dir, tmp_path):
    out = tmp_path / "zr.csv"
    assert parse_and_dispatch(["baseline", "--method", "zr", "--data", str(data_dir), "--out", str(out)]) == 0
    table = pd.read_csv(out)
    assert table["filter"].tolist() == ["all", "LIGHT", "HEAVY"]
    # synthetic truth follows the default Z-R law
    assert table.loc[0, "mse"] < 1e-6
    assert (tmp_path / "zr.csv.manifest").exists()
    assert not (tmp_path / "estimates.csv").exists()


def test_zr_baseline_fit(data_dir, tmp_path):
    out = tmp_path / "fit"
    assert parse_and_dispatch(["baseline", "--method", "zr", "--fit", "--data", str(data_dir), "--out", str(out)]) == 0
    assert "b=" in (out / "zr_params.txt").read_text()
    assert list(pd.read_csv(out / "estimates.csv").columns) == ESTIMATE_COLUMNS


def test_missing_data_fails(tmp_path):
    code = parse_and_dispatch(["baseline", "--method", "persistence", "--data", str(tmp_path / "none"),
                               "--out", str(tmp_path / "out")])
    assert code == 1


def test_finetune_then_evaluate(data_dir, config_file, tmp_path):
    run = tmp_path / "run"
    assert parse_and_dispatch(["finetune", "--data", str(data_dir), "--out", str(run),
                               "--config", str(config_file), "--loss", "focal"]) == 0
    assert (run / "best.ckpt").exists()
    assert (run / "splits" / "test.txt").read_text().strip()
    assert "loss=focal" in (run / "config.echo").read_text()

    out = tmp_path / "eval"
    assert parse_and_dispatch(["evaluate", "--ckpt", str(run), "--data", str(data_dir), "--out", str(out),
                               "--event", "37.49,127.01,2020-06-01 03:00"]) == 0
    cases = pd.read_csv(out / "cases.csv")
    assert len(cases) == 4 * 6 * 2
    assert set(cases["radius_km"].astype(str)) == {"10", "25", "50", "all"}
    assert (out / "predictions.csv").exists()


def test_estimation_finetune_then_estimate(data_dir, config_file, tmp_path):
    run = tmp_path / "run"
    assert parse_and_dispatch(["finetune", "--task", "estimation", "--data", str(data_dir), "--out", str(run),
                               "--config", str(config_file)]) == 0
    assert "phase=finetune_estimation" in (run / "best.meta").read_text()
    out = tmp_path / "mse.csv"
    assert parse_and_dispatch(["estimate", "--ckpt", str(run / "best.ckpt"), "--data", str(data_dir),
                               "--out", str(out), "--split", "finetune_val"]) == 0
    assert pd.read_csv(out)["filter"].tolist() == ["all", "LIGHT", "HEAVY"]


def test_pretrain_then_finetune(data_dir, config_file, tmp_path):
    pre = tmp_path / "pre"
    assert parse_and_dispatch(["pretrain", "--data", str(data_dir), "--out", str(pre),
                               "--config", str(config_file)]) == 0
    assert (pre / "splits" / "pretrain_train.txt").exists()
    run = tmp_path / "run"
    assert parse_and_dispatch(["finetune", "--data", str(data_dir), "--out", str(run), "--config",
                               str(config_file), "--pretrained", str(pre / "best.ckpt")]) == 0


def test_evaluate_missing_checkpoint_fails(data_dir, tmp_path):
    code = parse_and_dispatch(["evaluate", "--ckpt", str(tmp_path / "nothing"), "--data", str(data_dir),
                               "--out", str(tmp_path / "eval")])
    assert code == 1



def test_evaluate_rejects_a_conflicting_pool_factor(data_dir, config_file, tmp_path):
    run = tmp_path / "run"
    assert parse_and_dispatch(["finetune", "--data", str(data_dir), "--out", str(run),
                               "--config", str(config_file)]) == 0
    base = ["evaluate", "--ckpt", str(run), "--data", str(data_dir)]
    assert parse_and_dispatch(base + ["--out", str(tmp_path / "a"), "--pool-factor", "2"]) == 1
    assert parse_and_dispatch(base + ["--out", str(tmp_path / "b"), "--r-max", "50"]) == 1
    # matching flags are accepted
    assert parse_and_dispatch(base + ["--out", str(tmp_path / "c"), "--pool-factor", "1", "--r-max", "100"]) == 0


def test_evaluate_corrupt_checkpoint_fails(data_dir, tmp_path):
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "best.ckpt").write_bytes(b"\x80\x04garbage")
    code = parse_and_dispatch(["evaluate", "--ckpt", str(tmp_path / "run"), "--data", str(data_dir),
                               "--out", str(tmp_path / "eval")])
    assert code == 1


def test_repeated_runs_are_bit_identical(data_dir, config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("NOWCAST_THREADS", "1")
    for name in ("first", "second"):
        assert parse_and_dispatch(["finetune", "--data", str(data_dir), "--out", str(tmp_path / name),
                                   "--config", str(config_file), "--seed", "4"]) == 0
        assert parse_and_dispatch(["evaluate", "--ckpt", str(tmp_path / name), "--data", str(data_dir),
                                   "--out", str(tmp_path / f"{name}-eval")]) == 0
    for table in ("report.csv", "predictions.csv"):
        assert (tmp_path / "first-eval" / table).read_bytes() == (tmp_path / "second-eval" / table).read_bytes()
    assert (tmp_path / "first" / "metrics.log").read_bytes() == (tmp_path / "second" / "metrics.log").read_bytes()
    first, second = load_checkpoint(tmp_path / "first"), load_checkpoint(tmp_path / "second")
    assert first.step == second.step
    assert all(torch.equal(first.params[k], second.params[k]) for k in first.params)

# -------------------------------------------------------------------
# REPORTS
# -------------------------------------------------------------------
def _run_dir(root, name, csi):
    run = root / name
    run.mkdir()
    table = pd.DataFrame({"CSI_RAIN": [csi, csi], "F1_RAIN": [0.5, 0.5], "CSI_HEAVY": [0.1, 0.1],
                          "F1_HEAVY": [0.2, 0.2]}, index=pd.Index(["60", "Average"], name="lead_minutes"))
    EvalReport(table).write_csv(run / "report.csv")
    (run / "metrics.log").write_text("step=0 train_loss=nan val_score=0.100000\n"
                                     "step=10 train_loss=0.500000 val_score=0.200000\n")
    return run


def test_report_compares_runs(tmp_path):
    runs = [_run_dir(tmp_path, "pretrained", 0.4), _run_dir(tmp_path, "fresh", 0.3)]
    comparison = report_tables(runs, tmp_path / "out")
    assert "pretrained.CSI_RAIN" in comparison.columns
    assert comparison.loc["60", "fresh.CSI_RAIN"] == pytest.approx(0.3)
    curve = pd.read_csv(tmp_path / "out" / "curves" / "fresh.csv")
    assert curve["step"].tolist() == [0, 10]


def test_report_of_single_run_passes_through(tmp_path):
    comparison = report_tables([_run_dir(tmp_path, "only", 0.4)], tmp_path / "out")
    assert list(comparison.columns) == ["CSI_RAIN", "F1_RAIN", "CSI_HEAVY", "F1_HEAVY"]


def test_report_needs_report_files(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(MissingReport):
        report_tables([tmp_path / "empty"], tmp_path / "out")
    assert parse_and_dispatch(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "out")]) == 1
