import argparse
import logging
import os
import sys
from pathlib import Path

import pandas as pd
import torch
from dateutil import parser as date_parser
from dateutil import tz

from nowcast.baselines import (
    ZRParams,
    fit_zr,
    persistence_predictions,
    read_zr_params,
    write_zr_params,
    zr_estimates,
    zr_fit_pairs,
)
from nowcast.config import TrainConfig, effective_threads, load_config
from nowcast.dataset import RadarDataset, make_splits, write_split_catalog
from nowcast.errors import CheckpointConflict, MissingReport, NowcastError
from nowcast.grid_io import DEFAULT_R_MAX
from nowcast.losses import LOSS_CHOICES
from nowcast.metrics import EvalReport, case_table, mean_over_under_ratios
from nowcast.model import dim_plan
from nowcast.synth import SynthScenario, gen_imbalanced_set, write_synth_data
from nowcast.trainer import (
    CLASS_FILTERS,
    METRICS_LOG,
    REPORT_FILE,
    SampleSet,
    evaluate_estimation,
    evaluate_nowcast,
    estimation_mse,
    finetune_estimation,
    finetune_nowcast,
    load_checkpoint,
    pretrain,
    read_metrics_log,
    report_from_predictions,
    transfer_params,
)

logger = logging.getLogger("nowcast.cli")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_LEVEL_ENV = "NOWCAST_LOG_LEVEL"
MANIFEST_FILE = "manifest.echo"
# minutes either side of an --event time whose target times enter the case table
EVENT_HALF_WINDOW = 180


def configure_logging(verbose=False):
    level = os.environ.get(LOG_LEVEL_ENV) or ("DEBUG" if verbose else "INFO")
    logging.basicConfig(format=LOG_FORMAT, stream=sys.stderr, level=level.upper(), force=True)


# -------------------------------------------------------------------
# OUTPUT TARGETS
# -------------------------------------------------------------------
def is_file_target(out):
    return Path(out).suffix != ""


def manifest_path(out):
    out = Path(out)
    if is_file_target(out):
        return out.with_name(out.name + ".manifest")
    return out / MANIFEST_FILE


def write_manifest(args):
    """Subcommand, config path, resolved options and output target, one key=value per line."""
    path = manifest_path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    options = {k: v for k, v in sorted(vars(args).items()) if k not in ("handler", "command", "config", "out")}
    lines = [f"subcommand={args.command}", f"config={getattr(args, 'config', None)}", f"out={args.out}"]
    lines += [f"option.{k}={v}" for k, v in options.items()]
    path.write_text("\n".join(lines) + "\n")


def _table_path(out, name):
    """Where a named result table goes: inside a directory target, or the file target itself."""
    out = Path(out)
    return out if is_file_target(out) else out / name


# -------------------------------------------------------------------
# DATA
# -------------------------------------------------------------------
def load_data(args, config):
    dataset = RadarDataset.load(args.data, r_max=config.r_max, pool_factor=config.pool_factor)
    return dataset


def split_sets(dataset, phase):
    catalog = make_splits(dataset.timestamps, phase)
    return catalog, {name: SampleSet(dataset, catalog.split(name)) for name in
                     ("pretrain_train", "pretrain_val", "finetune_train", "finetune_val", "test")}


def resolve_config(args, phase):
    task = getattr(args, "task", None)
    if phase == "finetune":
        phase = "finetune_estimation" if task == "estimation" else "finetune_nowcast"
    return load_config(
        getattr(args, "config", None),
        phase=phase,
        task=task if phase == "pretrain" else None,
        loss=getattr(args, "loss", None),
        steps=getattr(args, "steps", None),
        seed=getattr(args, "seed", None),
    )


def set_patch_for(dataset, config):
    """Restrict stations to the output patch of the configured model when the grid fits it."""
    plan = dim_plan(config.model)
    if dataset.geometry.height == config.input_hw and dataset.geometry.width == config.input_hw:
        dataset.set_patch(plan.offset, plan.output_hw)


def parse_event(text):
    """LAT,LON,TIME where TIME is epoch minutes or a date string (UTC when no zone is given)."""
    try:
        lat, lon, when = (part.strip() for part in text.split(",", 2))
        if when.lstrip("-").isdigit():
            minutes = int(when)
        else:
            moment = date_parser.parse(when)
            if moment.tzinfo is None:
                moment = moment.replace(tzinfo=tz.UTC)
            minutes = int(moment.timestamp()) // 60
        return (float(lat), float(lon)), minutes
    except (ValueError, OverflowError) as e:
        raise argparse.ArgumentTypeError(f"expected LAT,LON,TIME, got {text!r} ({e})") from None


# -------------------------------------------------------------------
# SUBCOMMANDS
# -------------------------------------------------------------------
def cmd_synth(args):
    scenario = SynthScenario(
        seed=args.seed,
        size=args.size,
        n_cells=args.cells,
        speed_max=args.speed,
        heavy_prevalence=args.prevalence,
        n_stations=args.stations,
        station_margin=args.margin,
    )
    data = gen_imbalanced_set(scenario, args.labels)
    write_synth_data(data, args.out)


def cmd_pretrain(args):
    config = resolve_config(args, "pretrain")
    dataset = load_data(args, config)
    catalog, sets = split_sets(dataset, "pretrain")
    write_split_catalog(catalog, Path(args.out) / "splits")
    pretrain(config, sets["pretrain_train"], sets["pretrain_val"], run_dir=args.out)


def cmd_finetune(args):
    config = resolve_config(args, "finetune")
    init = None
    if args.pretrained and args.pretrained.lower() != "none":
        init = transfer_params(load_checkpoint(args.pretrained), config.model, config.seed)
    else:
        logger.info("No pre-trained parameters: fine-tuning from a fresh initialization")

    dataset = load_data(args, config)
    catalog, sets = split_sets(dataset, "finetune")
    write_split_catalog(catalog, Path(args.out) / "splits")
    if config.phase == "finetune_estimation":
        finetune_estimation(init, config, sets["finetune_train"], sets["finetune_val"], run_dir=args.out)
    else:
        finetune_nowcast(init, config, sets["finetune_train"], sets["finetune_val"], run_dir=args.out)


def _eval_threads():
    torch.set_num_threads(effective_threads(TrainConfig()))


def write_nowcast_results(report, matrices, predictions, out, event=None, stations=None):
    report.write_csv(_table_path(out, REPORT_FILE))
    logger.info("Report:\n%s", report.to_text())
    scored = [m for m in matrices if m.total]
    if scored:
        over, under = mean_over_under_ratios(scored)
        logger.info("Mean over/under-estimation ratios: %.2f%% / %.2f%%", 100 * over, 100 * under)
    if is_file_target(out):
        return
    (Path(out) / "report.txt").write_text(report.to_text() + "\n")
    predictions.to_csv(Path(out) / "predictions.csv", index=False)
    if event is not None:
        center, minutes = event
        target = predictions["timestamp"] + predictions["lead_minutes"]
        nearby = predictions[(target - minutes).abs() <= EVENT_HALF_WINDOW]
        case_table(nearby, stations, center).to_csv(Path(out) / "cases.csv", index=False, float_format="%.3f")


def load_checkpoint_data(args, checkpoint):
    """
    Load --data with the checkpoint's r_max and pool_factor. A flag that
    disagrees with the checkpoint is an error; without a config echo the
    flags (or their defaults) are used.
    """
    settings = {"r_max": DEFAULT_R_MAX, "pool_factor": 1}
    trained = checkpoint.data_settings()
    settings.update(trained)
    for key in settings:
        given = getattr(args, key)
        if given is None:
            continue
        if key in trained and trained[key] != given:
            raise CheckpointConflict(key, trained[key], given)
        settings[key] = given
    return RadarDataset.load(args.data, **settings)


def cmd_evaluate(args):
    _eval_threads()
    checkpoint = load_checkpoint(args.ckpt)
    dataset = load_checkpoint_data(args, checkpoint)
    _, sets = split_sets(dataset, "finetune")
    report, matrices, predictions = evaluate_nowcast(checkpoint, sets[args.split])
    write_nowcast_results(report, matrices, predictions, args.out, args.event, dataset.patch_stations)


def write_estimation_results(estimates, out):
    rows = []
    for class_filter in CLASS_FILTERS:
        value = estimation_mse(estimates, class_filter)
        rows.append({"filter": class_filter, "mse": 0.0 if value is None else value, "defined": value is not None})
        logger.info("MSE (%s): %s", class_filter, "undefined" if value is None else f"{value:.6f}")
    pd.DataFrame(rows).to_csv(_table_path(out, REPORT_FILE), index=False, float_format="%.6f")
    if not is_file_target(out):
        estimates.to_csv(Path(out) / "estimates.csv", index=False)


def cmd_estimate(args):
    _eval_threads()
    checkpoint = load_checkpoint(args.ckpt)
    dataset = load_checkpoint_data(args, checkpoint)
    _, sets = split_sets(dataset, "finetune")
    _, estimates = evaluate_estimation(checkpoint, sets[args.split])
    write_estimation_results(estimates, args.out)


def cmd_baseline(args):
    config = load_config(getattr(args, "config", None))
    dataset = load_data(args, config)
    set_patch_for(dataset, config)
    catalog, sets = split_sets(dataset, "finetune")
    test = sets[args.split]

    if args.method == "persistence":
        predictions = persistence_predictions(dataset, test.times)
        report, matrices = report_from_predictions(predictions)
        write_nowcast_results(report, matrices, predictions, args.out)
        return

    if args.fit:
        params = fit_zr(zr_fit_pairs(dataset, catalog.finetune_train))
    elif args.zr_params:
        params = read_zr_params(args.zr_params)
    else:
        params = ZRParams()
    if not is_file_target(args.out):
        write_zr_params(params, Path(args.out) / "zr_params.txt")
    write_estimation_results(zr_estimates(dataset, test.times, params), args.out)


def report_tables(run_dirs, out):
    """
    Side-by-side per-lead comparison of the runs' report.csv files, plus one
    training-curve file per run from its metrics.log.
    """
    tables = {}
    for run_dir in map(Path, run_dirs):
        path = run_dir / REPORT_FILE
        if not path.exists():
            raise MissingReport(f"{run_dir} has no {REPORT_FILE}")
        tables[run_dir.name] = EvalReport.read_csv(path).table

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if len(tables) == 1:
        comparison = next(iter(tables.values()))
    else:
        comparison = pd.concat(tables, axis=1)
        comparison.columns = [f"{run}.{column}" for run, column in comparison.columns]
    comparison.to_csv(out / "comparison.csv", float_format="%.6f")

    for run_dir in map(Path, run_dirs):
        log = run_dir / METRICS_LOG
        if not log.exists():
            logger.warning("%s has no %s; no training curve written", run_dir, METRICS_LOG)
            continue
        curves = out / "curves"
        curves.mkdir(exist_ok=True)
        read_metrics_log(log).to_csv(curves / f"{run_dir.name}.csv", index=False)
    logger.info("Compared %d runs into %s", len(tables), out)
    return comparison


def cmd_report(args):
    report_tables(args.runs, args.out)


# -------------------------------------------------------------------
# ARGUMENTS
# -------------------------------------------------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="nowcast-kit", description="Radar precipitation nowcasting toolkit")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--cells", type=int, default=4)
    p.add_argument("--speed", type=float, default=0.5)
    p.add_argument("--stations", type=int, default=40)
    p.add_argument("--margin", type=int, default=21)
    p.add_argument("--labels", type=int, default=10000)
    p.add_argument("--prevalence", type=float, default=0.02)
    p.set_defaults(handler=cmd_synth)

    for name, handler in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a model into a run directory")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config")
        p.add_argument("--task", choices=("nowcast", "estimation"))
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        if name == "finetune":
            p.add_argument("--loss", choices=LOSS_CHOICES)
            p.add_argument("--pretrained", default="none", help="pre-trained checkpoint, or 'none'")
        p.set_defaults(handler=handler)

    for name, handler in (("evaluate", cmd_evaluate), ("estimate", cmd_estimate)):
        p = sub.add_parser(name, help=f"{name} a checkpoint on a data split")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="report file, or directory for all result tables")
        p.add_argument("--split", default="test", choices=("finetune_train", "finetune_val", "test"))
        p.add_argument("--r-max", dest="r_max", type=int, help="defaults to the checkpoint's value")
        p.add_argument("--pool-factor", dest="pool_factor", type=int, choices=(1, 2, 4),
                       help="defaults to the checkpoint's value")
        if name == "evaluate":
            p.add_argument("--event", type=parse_event, help="LAT,LON,TIME for the radius case table")
        p.set_defaults(handler=handler)

    p = sub.add_parser("baseline", help="score persistence or the Z-R relationship")
    p.add_argument("--method", required=True, choices=("persistence", "zr"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--split", default="test", choices=("finetune_train", "finetune_val", "test"))
    p.add_argument("--zr-params", dest="zr_params")
    p.add_argument("--fit", action="store_true", help="fit a and b on the training split")
    p.set_defaults(handler=cmd_baseline)

    p = sub.add_parser("report", help="compare run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_report)
    return parser


# -------------------------------------------------------------------
# GENERIC RUN HANDLER
# -------------------------------------------------------------------
def run_command(args):
    try:
        write_manifest(args)
        args.handler(args)
        return 0
    except (NowcastError, OSError, ValueError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


def parse_and_dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    configure_logging(args.verbose)
    return run_command(args)


if __name__ == "__main__":
    sys.exit(parse_and_dispatch())
