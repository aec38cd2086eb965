"""
Hard classification, confusion matrices, CSI/F1/MSE scores,
over/under-estimation ratios and radius-filtered case analysis.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from nowcast.dataset import LEAD_TIMES, PrecipClass, TrackedClass
from nowcast.errors import EmptyGroups, EmptyMatrix, LengthMismatch
from nowcast.grid_io import EARTH_RADIUS_KM

logger = logging.getLogger(__name__)

N_CLASSES = len(PrecipClass)
REPORT_COLUMNS = ["CSI_RAIN", "F1_RAIN", "CSI_HEAVY", "F1_HEAVY"]
AVERAGE_ROW = "Average"
CASE_RADII_KM = (10.0, 25.0, 50.0, math.inf)

PREDICTION_COLUMNS = ["station_id", "lat", "lon", "timestamp", "lead_minutes", "predicted", "actual"]
ESTIMATE_COLUMNS = ["station_id", "lat", "lon", "timestamp", "estimate_mm", "truth_mm"]


@dataclass
class ConfusionMatrix:
    """counts[actual][predicted] over OTHERS, LIGHT, HEAVY."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))
    lead: int = 0

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (N_CLASSES, N_CLASSES):
            raise ValueError(f"Confusion counts must be {N_CLASSES}x{N_CLASSES}, got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("Confusion counts must be non-negative")
        self.counts = counts

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts, self.lead if self.lead == other.lead else 0)


# -------------------------------------------------------------------
# CLASSIFICATION
# -------------------------------------------------------------------
def hard_classify(pred_probs):
    """Argmax class; ties go to the more severe class."""
    probs = np.asarray(pred_probs, dtype=np.float64)
    return PrecipClass(N_CLASSES - 1 - int(np.argmax(probs[::-1])))


def hard_classify_batch(pred_probs):
    """(..., 3) probabilities -> (...) class codes, same tie rule as hard_classify."""
    probs = np.asarray(pred_probs, dtype=np.float64)
    return N_CLASSES - 1 - np.argmax(probs[..., ::-1], axis=-1)


def confusion_matrix(pairs, lead=0):
    """Count (predicted, actual) pairs into counts[actual][predicted]."""
    pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (pairs[:, 1], pairs[:, 0]), 1)
    return ConfusionMatrix(counts, lead)


def confusion_from_arrays(predicted, actual, lead=0):
    predicted = np.asarray(predicted, dtype=np.int64).reshape(-1)
    actual = np.asarray(actual, dtype=np.int64).reshape(-1)
    if predicted.shape != actual.shape:
        raise LengthMismatch(f"{predicted.size} predictions but {actual.size} labels")
    return confusion_matrix(np.stack([predicted, actual], axis=1), lead)


# -------------------------------------------------------------------
# SCORES
# -------------------------------------------------------------------
def binary_counts(cm, c):
    """TP, FP, FN of the binary event c (RAIN merges LIGHT and HEAVY)."""
    members = [int(m) for m in TrackedClass(c).members]
    inside = np.zeros(N_CLASSES, dtype=bool)
    inside[members] = True
    tp = int(cm.counts[np.ix_(inside, inside)].sum())
    fp = int(cm.counts[np.ix_(~inside, inside)].sum())
    fn = int(cm.counts[np.ix_(inside, ~inside)].sum())
    return tp, fp, fn


def csi_score(cm, c):
    tp, fp, fn = binary_counts(cm, c)
    denominator = tp + fp + fn
    return tp / denominator if denominator else 0.0


def f1_score(cm, c):
    tp, fp, fn = binary_counts(cm, c)
    denominator = 2 * tp + fp + fn
    return 2 * tp / denominator if denominator else 0.0


def over_under_ratios(cm):
    """Fractions of pairs predicted above / below their actual class."""
    total = cm.total
    if total == 0:
        raise EmptyMatrix("Over/under ratios need at least one scored pair")
    over = int(np.triu(cm.counts, k=1).sum())
    under = int(np.tril(cm.counts, k=-1).sum())
    return over / total, under / total


def mean_over_under_ratios(matrices):
    ratios = [over_under_ratios(cm) for cm in matrices]
    if not ratios:
        raise EmptyMatrix("No confusion matrices to average")
    over, under = zip(*ratios)
    return float(np.mean(over)), float(np.mean(under))


def overall_csi(matrices, c=TrackedClass.HEAVY):
    """CSI of the summed matrix over all lead times."""
    total = ConfusionMatrix()
    for cm in matrices:
        total = total + cm
    return csi_score(total, c)


def mse(preds, truths, groups):
    """
    Mean over groups of the mean squared error inside each group.

    Args:
        preds, truths: flat sequences of values
        groups: group key (e.g. timestamp) per value
    """
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    truths = np.asarray(truths, dtype=np.float64).reshape(-1)
    groups = np.asarray(groups).reshape(-1)
    if not preds.size == truths.size == groups.size:
        raise LengthMismatch(f"{preds.size} predictions, {truths.size} targets, {groups.size} group keys")
    df = pd.DataFrame({"pred": preds, "truth": truths, "group": groups})
    if df.empty:
        raise EmptyGroups("MSE needs at least one group")
    df["sq"] = (df["pred"] - df["truth"]) ** 2
    return float(df.groupby("group")["sq"].mean().mean())


# -------------------------------------------------------------------
# CASE ANALYSIS
# -------------------------------------------------------------------
def haversine_km(a, b):
    lat1, lon1 = np.radians(a[0]), np.radians(a[1])
    lat2, lon2 = np.radians(b[0]), np.radians(b[1])
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    distance = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(distance) if np.ndim(distance) == 0 else distance


def case_csi(predictions, stations, event_center, radius_km):
    """
    Per-lead RAIN and HEAVY CSI restricted to stations within radius_km
    of event_center (math.inf keeps every station).

    Args:
        predictions: DataFrame with station_id, lead_minutes, predicted, actual
        stations: DataFrame with station_id, lat, lon

    Returns:
        {lead: {TrackedClass: csi or None}}; None marks an undefined cell
        (no stations in range, or no positive events and no false alarms).
    """
    distance = haversine_km((stations["lat"].to_numpy(), stations["lon"].to_numpy()), event_center)
    near = stations.loc[np.asarray(distance) <= radius_km, "station_id"]
    subset = predictions[predictions["station_id"].isin(near)]

    result = {}
    for lead in LEAD_TIMES:
        rows = subset[subset["lead_minutes"] == lead]
        cm = confusion_from_arrays(rows["predicted"], rows["actual"], lead)
        cells = {}
        for c in TrackedClass:
            tp, fp, fn = binary_counts(cm, c)
            cells[c] = tp / (tp + fp + fn) if tp + fp + fn else None
        result[lead] = cells
    if near.empty:
        logger.warning("No stations within %.0f km of %s", radius_km, event_center)
    return result


def case_table(predictions, stations, event_center, radii=CASE_RADII_KM):
    """Flat case-analysis table, one row per (radius, lead, class)."""
    rows = []
    for radius in radii:
        for lead, cells in case_csi(predictions, stations, event_center, radius).items():
            for c, value in cells.items():
                rows.append({
                    "radius_km": "all" if math.isinf(radius) else f"{radius:g}",
                    "lead_minutes": lead,
                    "class": c.value,
                    "csi": 0.0 if value is None else value,
                    "defined": value is not None,
                })
    return pd.DataFrame(rows)


# -------------------------------------------------------------------
# REPORTS
# -------------------------------------------------------------------
class EvalReport:
    """
    CSI and F1 for RAIN and HEAVY per lead time plus an Average row,
    optionally with an MSE column.
    """

    def __init__(self, table):
        self.table = table

    @classmethod
    def from_matrices(cls, matrices, mse_by_lead=None):
        rows = {}
        for cm in sorted(matrices, key=lambda m: m.lead):
            rows[str(cm.lead)] = {
                "CSI_RAIN": csi_score(cm, TrackedClass.RAIN),
                "F1_RAIN": f1_score(cm, TrackedClass.RAIN),
                "CSI_HEAVY": csi_score(cm, TrackedClass.HEAVY),
                "F1_HEAVY": f1_score(cm, TrackedClass.HEAVY),
            }
            if mse_by_lead is not None:
                rows[str(cm.lead)]["MSE"] = mse_by_lead[cm.lead]
        table = pd.DataFrame.from_dict(rows, orient="index")
        table.loc[AVERAGE_ROW] = table.mean(axis=0)
        table.index.name = "lead_minutes"
        return cls(table)

    @classmethod
    def read_csv(cls, path):
        table = pd.read_csv(path, dtype={"lead_minutes": str}).set_index("lead_minutes")
        return cls(table)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.table.to_csv(path, float_format="%.6f")

    def value(self, lead, column):
        return float(self.table.loc[str(lead), column])

    def to_text(self):
        """Aligned plain-text table with three decimals."""
        return self.table.to_string(float_format=lambda v: f"{v:.3f}")
