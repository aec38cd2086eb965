"""
Two-phase training: reflectivity pre-training, parameter transfer,
fine-tuning for nowcasting or estimation, best-checkpoint selection and
evaluation.

A run directory holds config.echo, metrics.log (one line per validation
point), best.ckpt with its best.meta text sidecar, and report.csv.
"""

import logging
import math
import pickle
import sys
from collections import OrderedDict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from nowcast.config import effective_threads, parse_config_text
from nowcast.dataset import (
    LEAD_TIMES,
    N_LEADS,
    EstimationSample,
    NowcastSample,
    PrecipClass,
    TrackedClass,
    assemble_estimation_input,
    assemble_nowcast_input,
    precip_classes,
)
from nowcast.errors import (
    CorruptCheckpoint,
    DimensionMismatch,
    EmptyDataset,
    OptimizerShapeMismatch,
    TransferMismatch,
)
from nowcast.losses import emd_pretrain_loss, nowcast_loss, sse_loss
from nowcast.metrics import (
    ESTIMATE_COLUMNS,
    PREDICTION_COLUMNS,
    EvalReport,
    confusion_from_arrays,
    hard_classify_batch,
    mse,
    overall_csi,
)
from nowcast.model import (
    HEAD_PARAMETER,
    ModelConfig,
    UNet,
    count_parameters,
    grad,
    init_params,
    param_set,
    softmax_channels,
)

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

CONFIG_ECHO = "config.echo"
METRICS_LOG = "metrics.log"
CHECKPOINT_FILE = "best.ckpt"
META_FILE = "best.meta"
REPORT_FILE = "report.csv"

CLASS_FILTERS = ("all", "LIGHT", "HEAVY")
EVAL_BATCH = 8


@dataclass(frozen=True)
class SampleSet:
    """A dataset and the timestamps of one split."""

    dataset: object
    times: tuple

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(int(t) for t in self.times))


# -------------------------------------------------------------------
# OPTIMIZER
# -------------------------------------------------------------------
@dataclass
class OptimizerState:
    m: OrderedDict
    v: OrderedDict
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params):
        return cls(
            m=OrderedDict((k, torch.zeros_like(p)) for k, p in params.items()),
            v=OrderedDict((k, torch.zeros_like(p)) for k, p in params.items()),
        )


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; returns new (params, state)."""
    if list(params) != list(grads) or list(params) != list(state.m):
        raise OptimizerShapeMismatch("Parameters, gradients and moments name different tensors")

    step = state.step + 1
    new_params, m, v = OrderedDict(), OrderedDict(), OrderedDict()
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape or state.m[name].shape != p.shape or state.v[name].shape != p.shape:
                raise OptimizerShapeMismatch(f"{name}: parameter {tuple(p.shape)}, gradient {tuple(g.shape)}")
            m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
            v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
            m_hat = m[name] / (1 - state.beta1 ** step)
            v_hat = v[name] / (1 - state.beta2 ** step)
            new_params[name] = p - lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return new_params, OptimizerState(m, v, step, state.beta1, state.beta2, state.eps)


# -------------------------------------------------------------------
# CHECKPOINTS
# -------------------------------------------------------------------
@dataclass
class Checkpoint:
    params: OrderedDict
    model_config: ModelConfig
    phase: str
    step: int
    validation_score: float
    seed: int
    config_echo: str = ""

    def build_model(self):
        model = UNet(self.model_config, seed=self.seed)
        model.load_state_dict(self.params)
        model.eval()
        return model

    def data_settings(self):
        """r_max and pool_factor the checkpoint was trained with; empty for checkpoints without a config echo."""
        values = parse_config_text(self.config_echo) if self.config_echo else {}
        return {key: values[key] for key in ("r_max", "pool_factor") if key in values}


def save_checkpoint(checkpoint, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CHECKPOINT_FILE
    torch.save(
        {
            "params": checkpoint.params,
            "model_config": asdict(checkpoint.model_config),
            "phase": checkpoint.phase,
            "step": checkpoint.step,
            "validation_score": checkpoint.validation_score,
            "seed": checkpoint.seed,
            "config_echo": checkpoint.config_echo,
        },
        path,
    )
    meta = (
        f"phase={checkpoint.phase}\n"
        f"step={checkpoint.step}\n"
        f"validation_score={checkpoint.validation_score!r}\n"
        f"seed={checkpoint.seed}\n"
    )
    (directory / META_FILE).write_text(meta)
    logger.info("Saved checkpoint %s (step %d, validation %.6f)", path, checkpoint.step, checkpoint.validation_score)
    return path


def load_checkpoint(path):
    """Load best.ckpt, given the file or the run directory holding it."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        return Checkpoint(
            params=OrderedDict(payload["params"]),
            model_config=ModelConfig(**payload["model_config"]),
            phase=payload["phase"],
            step=int(payload["step"]),
            validation_score=float(payload["validation_score"]),
            seed=int(payload["seed"]),
            config_echo=payload.get("config_echo", ""),
        )
    except (pickle.UnpicklingError, RuntimeError, EOFError, KeyError, TypeError, AttributeError) as err:
        raise CorruptCheckpoint(f"{path}: not a readable checkpoint ({err})") from err


def transfer_params(pretrained, target, seed):
    """
    Copy every pre-trained layer into a model built for target; the head is
    re-initialized when its output channel count differs.
    """
    source = pretrained.params
    fresh = UNet(target, seed=seed)
    state = fresh.state_dict()
    if set(state) != set(source):
        raise TransferMismatch(
            f"Architectures differ: depth {pretrained.model_config.depth} -> {target.depth}, "
            f"{len(source)} -> {len(state)} tensors"
        )

    reinitialized = []
    for name, tensor in state.items():
        if source[name].shape == tensor.shape:
            state[name] = source[name].clone()
        elif name == HEAD_PARAMETER and source[name].shape[1:] == tensor.shape[1:]:
            reinitialized.append(name)
        else:
            raise TransferMismatch(f"{name}: pre-trained {tuple(source[name].shape)} vs target {tuple(tensor.shape)}")

    if reinitialized:
        init_params(fresh, seed, only=reinitialized)
        state[HEAD_PARAMETER] = fresh.state_dict()[HEAD_PARAMETER].clone()
        logger.info("Transferred %d tensors, re-initialized the output layer (%d -> %d channels)",
                    len(state) - 1, pretrained.model_config.out_channels, target.out_channels)
    else:
        logger.info("Transferred all %d tensors", len(state))
    return state


# -------------------------------------------------------------------
# BATCHES
# -------------------------------------------------------------------
def prefetch(build, items, workers):
    """Map build over items on worker threads, yielding results in order."""
    if workers <= 1:
        for item in items:
            yield build(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        for item in items:
            pending.append(pool.submit(build, item))
            if len(pending) > 2 * workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _model_input(dataset, t, target_index, task):
    frames = dataset.window(t)
    if task == "nowcast":
        return assemble_nowcast_input(NowcastSample(frames=frames, target_index=target_index))
    return assemble_estimation_input(EstimationSample(frames=frames))


def _prepare(model, sample_set):
    dataset = sample_set.dataset
    config = model.config
    if dataset.geometry.height != config.input_hw or dataset.geometry.width != config.input_hw:
        raise DimensionMismatch(
            f"Grids are {dataset.geometry.height}x{dataset.geometry.width}, model input is {config.input_hw}"
        )
    dataset.set_patch(model.plan.offset, model.plan.output_hw)


def _pretrain_pairs(sample_set, task):
    dataset = sample_set.dataset
    leads = LEAD_TIMES if task == "nowcast" else (0,)
    pairs = []
    for t in dataset.sample_times(sample_set.times):
        for lead in leads:
            target = dataset.reflectivity_target(t, lead)
            if target is not None and np.isfinite(target).any():
                pairs.append((t, lead))
    return pairs


def _nowcast_pairs(sample_set):
    dataset = sample_set.dataset
    pairs = []
    for t in dataset.sample_times(sample_set.times):
        for k in range(1, N_LEADS + 1):
            if np.isfinite(dataset.station_accumulations(t + 60 * k)).any():
                pairs.append((t, k))
    return pairs


def _estimation_pairs(sample_set):
    dataset = sample_set.dataset
    return [(t, 0) for t in dataset.sample_times(sample_set.times)
            if np.isfinite(dataset.station_accumulations(t)).any()]


def _pretrain_batch(dataset, pairs, task):
    x = np.stack([_model_input(dataset, t, max(lead // 60, 1), task) for t, lead in pairs])
    target = np.stack([dataset.reflectivity_target(t, lead) for t, lead in pairs])
    return {"x": torch.from_numpy(x), "target": torch.from_numpy(np.ascontiguousarray(target, dtype=np.float32))}


def _label_batch(dataset, pairs, task):
    """Inputs plus (sample, row, col, value) of every labeled station pixel."""
    stations = dataset.patch_stations
    rows = stations["patch_row"].to_numpy()
    cols = stations["patch_col"].to_numpy()
    xs, index, r, c, values, times = [], [], [], [], [], []
    for i, (t, k) in enumerate(pairs):
        xs.append(_model_input(dataset, t, k, task))
        accum = dataset.station_accumulations(t + 60 * k)
        present = np.isfinite(accum)
        index.append(np.full(int(present.sum()), i))
        r.append(rows[present])
        c.append(cols[present])
        values.append(accum[present])
        times.append(np.full(int(present.sum()), t))
    return {
        "x": torch.from_numpy(np.stack(xs)),
        "index": torch.from_numpy(np.concatenate(index).astype(np.int64)),
        "row": torch.from_numpy(np.concatenate(r).astype(np.int64)),
        "col": torch.from_numpy(np.concatenate(c).astype(np.int64)),
        "value": np.concatenate(values),
        "time": np.concatenate(times),
    }


def _station_probs(model, batch):
    probs = softmax_channels(model(batch["x"])).permute(0, 2, 3, 1)
    return probs[batch["index"], batch["row"], batch["col"]]


def _station_estimates(model, batch):
    out = model(batch["x"])[:, 0]
    return out[batch["index"], batch["row"], batch["col"]]


# -------------------------------------------------------------------
# SELECTION AND LOGGING
# -------------------------------------------------------------------
def select_best(scores, mode):
    """Index of the first extreme score ('min' or 'max')."""
    if not scores:
        raise ValueError("No validation scores to select from")
    values = np.asarray(scores, dtype=np.float64)
    return int(np.nanargmin(values) if mode == "min" else np.nanargmax(values))


class RunLog:
    """config.echo and metrics.log of one run directory (or nothing when None)."""

    def __init__(self, run_dir, config):
        self.path = None
        if run_dir is None:
            return
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / CONFIG_ECHO).write_text(config.to_text())
        self.path = run_dir / METRICS_LOG
        self.path.write_text("")

    def record(self, step, train_loss, score, **extra):
        fields = {"step": step, "train_loss": f"{train_loss:.6f}", "val_score": f"{score:.6f}"}
        fields.update({k: f"{v:.6f}" for k, v in extra.items()})
        line = " ".join(f"{k}={v}" for k, v in fields.items())
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(line + "\n")
        logger.info("Validation at step %d: %s", step, line)


def read_metrics_log(path):
    """metrics.log as a DataFrame, one row per validation point."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append({k: float(v) for k, v in (token.split("=", 1) for token in line.split())})
    table = pd.DataFrame(rows)
    if not table.empty:
        table["step"] = table["step"].astype(int)
    return table


class _TrainCsi:
    """Hard confusion counts of the training batches since the last validation."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.matrices = []

    def update(self, probs, classes):
        predicted = hard_classify_batch(probs.detach().cpu().numpy())
        self.matrices.append(confusion_from_arrays(predicted, classes))

    def summary(self):
        value = overall_csi(self.matrices, TrackedClass.HEAVY) if self.matrices else 0.0
        self.reset()
        return {"train_csi": value}


def _train(model, config, pairs, build_batch, batch_loss, validate, mode, run_dir, tracker=None):
    """
    Adam on batch_loss over batches drawn uniformly with replacement from
    pairs; validate every validation_interval steps and keep the best
    parameters.
    """
    threads = effective_threads(config)
    torch.set_num_threads(threads)
    rng = np.random.default_rng(config.seed)
    run_log = RunLog(run_dir, config)
    logger.info("Training %s: %d trainable parameters, %d pairs, %d steps",
                config.phase, count_parameters(model), len(pairs), config.steps)

    def draws():
        for _ in range(config.steps):
            yield [pairs[i] for i in rng.integers(0, len(pairs), size=config.batch_size)]

    def trainable():
        return OrderedDict((n, p) for n, p in model.named_parameters() if p.requires_grad)

    state = OptimizerState.zeros_like(OrderedDict((n, p.detach()) for n, p in trainable().items()))

    scores = [validate(model)]
    run_log.record(0, math.nan, scores[0])
    best = (0, scores[0], param_set(model))
    running = []

    steps = tqdm(prefetch(build_batch, draws(), threads), total=config.steps, desc=config.phase,
                 disable=not sys.stderr.isatty())
    for step, batch in enumerate(steps, start=1):
        model.train()
        loss = batch_loss(model, batch)
        grads = grad(loss, model)
        params = trainable()
        new_params, state = adam_step(
            OrderedDict((n, p.detach()) for n, p in params.items()), grads, state, config.learning_rate
        )
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(new_params[name])
        running.append(loss.item())

        if step % config.validation_interval == 0 or step == config.steps:
            score = validate(model)
            scores.append(score)
            extra = tracker.summary() if tracker is not None else {}
            run_log.record(step, float(np.mean(running)), score, **extra)
            running = []
            if select_best(scores, mode) == len(scores) - 1:
                best = (step, score, param_set(model))

    step, score, params = best
    checkpoint = Checkpoint(
        params=params,
        model_config=model.config,
        phase=config.phase,
        step=step,
        validation_score=float(score),
        seed=config.seed,
        config_echo=config.to_text(),
    )
    if run_dir is not None:
        save_checkpoint(checkpoint, run_dir)
    logger.info("Best %s checkpoint at step %d (validation %.6f)", config.phase, step, score)
    return checkpoint


def _build_model(config, init):
    model = UNet(config.model, seed=config.seed)
    if init is not None:
        model.load_state_dict(init)
    return model


def _require(pairs, name):
    if not pairs:
        raise EmptyDataset(f"No usable samples in the {name} set")
    return pairs


# -------------------------------------------------------------------
# PHASES
# -------------------------------------------------------------------
def pretrain(config, train_set, val_set, run_dir=None):
    """Reflectivity pre-training on the earth-mover loss; keeps the lowest validation loss."""
    model = _build_model(config, None)
    task = config.task
    for sample_set in (train_set, val_set):
        _prepare(model, sample_set)
    train_pairs = _require(_pretrain_pairs(train_set, task), "training")
    val_pairs = _require(_pretrain_pairs(val_set, task), "validation")

    def batch_loss(model, batch):
        probs = softmax_channels(model(batch["x"])).permute(0, 2, 3, 1)
        labeled = ~torch.isnan(batch["target"])
        return emd_pretrain_loss(probs[labeled], batch["target"][labeled], reduction="mean")

    def validate(model):
        model.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for start in range(0, len(val_pairs), EVAL_BATCH):
                batch = _pretrain_batch(val_set.dataset, val_pairs[start:start + EVAL_BATCH], task)
                probs = softmax_channels(model(batch["x"])).permute(0, 2, 3, 1)
                labeled = ~torch.isnan(batch["target"])
                total += emd_pretrain_loss(probs[labeled], batch["target"][labeled]).item()
                count += int(labeled.sum())
        return total / count

    return _train(
        model, config, train_pairs,
        build_batch=lambda pairs: _pretrain_batch(train_set.dataset, pairs, task),
        batch_loss=batch_loss, validate=validate, mode="min", run_dir=run_dir,
    )


def finetune_nowcast(init, config, train_set, val_set, run_dir=None):
    """
    Fine-tune for the three-class nowcast with the configured loss;
    keeps the highest overall HEAVY CSI on the validation set.
    """
    model = _build_model(config, init)
    for sample_set in (train_set, val_set):
        _prepare(model, sample_set)
    train_pairs = _require(_nowcast_pairs(train_set), "training")
    _require(_nowcast_pairs(val_set), "validation")
    tracker = _TrainCsi()

    def batch_loss(model, batch):
        probs = _station_probs(model, batch)
        classes = precip_classes(batch["value"])
        tracker.update(probs, classes)
        return nowcast_loss(config.loss, probs, torch.from_numpy(classes), gamma=config.gamma)

    def validate(model):
        predictions = predict_nowcast(model, val_set)
        _, matrices = report_from_predictions(predictions)
        return overall_csi(matrices, TrackedClass.HEAVY)

    return _train(
        model, config, train_pairs,
        build_batch=lambda pairs: _label_batch(train_set.dataset, pairs, "nowcast"),
        batch_loss=batch_loss, validate=validate, mode="max", run_dir=run_dir, tracker=tracker,
    )


def finetune_estimation(init, config, train_set, val_set, run_dir=None):
    """Fine-tune the one-channel estimator on SSE; keeps the lowest validation MSE."""
    if init is not None and init[HEAD_PARAMETER].shape[0] != 1:
        raise TransferMismatch(f"Estimation needs a 1-channel output layer, got {init[HEAD_PARAMETER].shape[0]}")
    model = _build_model(config, init)
    if model.config.out_channels != 1:
        raise TransferMismatch(f"Estimation needs a 1-channel output layer, got {model.config.out_channels}")
    for sample_set in (train_set, val_set):
        _prepare(model, sample_set)
    train_pairs = _require(_estimation_pairs(train_set), "training")
    _require(_estimation_pairs(val_set), "validation")

    def batch_loss(model, batch):
        return sse_loss(_station_estimates(model, batch), torch.from_numpy(batch["value"]).float())

    def validate(model):
        return estimation_mse(predict_estimation(model, val_set))

    return _train(
        model, config, train_pairs,
        build_batch=lambda pairs: _label_batch(train_set.dataset, pairs, "estimation"),
        batch_loss=batch_loss, validate=validate, mode="min", run_dir=run_dir,
    )


# -------------------------------------------------------------------
# EVALUATION
# -------------------------------------------------------------------
def predict_nowcast(model, sample_set):
    """Hard-classified prediction per (station, time, lead) with its actual class."""
    dataset = sample_set.dataset
    model.eval()
    rows = dataset.patch_stations["patch_row"].to_numpy()
    cols = dataset.patch_stations["patch_col"].to_numpy()
    frames = []
    times = dataset.sample_times(sample_set.times)
    for t in tqdm(times, desc="nowcast", disable=not sys.stderr.isatty()):
        wanted = []
        for k in range(1, N_LEADS + 1):
            accum = dataset.station_accumulations(t + 60 * k)
            present = np.isfinite(accum)
            if present.any():
                wanted.append((k, present, accum[present]))
        if not wanted:
            continue
        x = torch.from_numpy(np.stack([_model_input(dataset, t, k, "nowcast") for k, _, _ in wanted]))
        with torch.no_grad():
            probs = softmax_channels(model(x)).permute(0, 2, 3, 1).numpy()
        for i, (k, present, accum) in enumerate(wanted):
            predicted = hard_classify_batch(probs[i, rows[present], cols[present]])
            frames.append(dataset.station_rows(present, t, lead_minutes=60 * k,
                                               predicted=predicted, actual=precip_classes(accum)))
    if not frames:
        return pd.DataFrame(columns=PREDICTION_COLUMNS)
    return pd.concat(frames, ignore_index=True)[PREDICTION_COLUMNS]


def report_from_predictions(predictions):
    """Per-lead confusion matrices and the CSI/F1 report of a predictions table."""
    matrices = []
    for lead in LEAD_TIMES:
        rows = predictions[predictions["lead_minutes"] == lead]
        matrices.append(confusion_from_arrays(rows["predicted"].to_numpy(), rows["actual"].to_numpy(), lead))
    return EvalReport.from_matrices(matrices), matrices


def evaluate_nowcast(checkpoint, test_set):
    """Returns (EvalReport, per-lead ConfusionMatrices, predictions)."""
    model = checkpoint.build_model()
    _prepare(model, test_set)
    predictions = predict_nowcast(model, test_set)
    report, matrices = report_from_predictions(predictions)
    logger.info("Evaluated %d station predictions over %d leads", len(predictions), len(LEAD_TIMES))
    return report, matrices, predictions


def predict_estimation(model, sample_set):
    """Estimated and observed 60-minute accumulation per (station, time)."""
    dataset = sample_set.dataset
    model.eval()
    rows = dataset.patch_stations["patch_row"].to_numpy()
    cols = dataset.patch_stations["patch_col"].to_numpy()
    frames = []
    pairs = _estimation_pairs(sample_set)
    for start in range(0, len(pairs), EVAL_BATCH):
        chunk = pairs[start:start + EVAL_BATCH]
        x = torch.from_numpy(np.stack([_model_input(dataset, t, 0, "estimation") for t, _ in chunk]))
        with torch.no_grad():
            out = model(x)[:, 0].numpy()
        for i, (t, _) in enumerate(chunk):
            accum = dataset.station_accumulations(t)
            present = np.isfinite(accum)
            frames.append(dataset.station_rows(present, t, estimate_mm=out[i, rows[present], cols[present]],
                                               truth_mm=accum[present]))
    if not frames:
        return pd.DataFrame(columns=ESTIMATE_COLUMNS)
    return pd.concat(frames, ignore_index=True)[ESTIMATE_COLUMNS]


def estimation_mse(estimates, class_filter="all"):
    """
    Per-timestamp nested MSE over station-time pairs whose observed class
    matches class_filter; None when no pair matches.
    """
    if class_filter not in CLASS_FILTERS:
        raise ValueError(f"class_filter must be one of {CLASS_FILTERS}, got {class_filter!r}")
    if class_filter != "all" and not estimates.empty:
        classes = precip_classes(estimates["truth_mm"].to_numpy(dtype=np.float64))
        estimates = estimates[classes == int(PrecipClass[class_filter])]
    if estimates.empty:
        logger.warning("No station-time pairs for class filter %s; MSE is undefined", class_filter)
        return None
    return mse(estimates["estimate_mm"], estimates["truth_mm"], estimates["timestamp"])


def evaluate_estimation(checkpoint, test_set, class_filter="all"):
    """Returns (MSE or None, estimates)."""
    model = checkpoint.build_model()
    _prepare(model, test_set)
    estimates = predict_estimation(model, test_set)
    return estimation_mse(estimates, class_filter), estimates
