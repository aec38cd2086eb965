import math

import numpy as np
import pandas as pd
import pytest

from nowcast.dataset import LEAD_TIMES, PrecipClass, TrackedClass
from nowcast.errors import EmptyGroups, EmptyMatrix, LengthMismatch
from nowcast.metrics import (
    AVERAGE_ROW,
    ConfusionMatrix,
    EvalReport,
    case_csi,
    case_table,
    confusion_from_arrays,
    confusion_matrix,
    csi_score,
    f1_score,
    hard_classify,
    hard_classify_batch,
    haversine_km,
    mean_over_under_ratios,
    mse,
    over_under_ratios,
    overall_csi,
)

# Station-level confusion counts per lead time, row-major counts[actual][predicted]
# over OTHERS, LIGHT, HEAVY, for four training settings: pre-trained with the
# CSI loss, CSI loss without pre-training, focal loss and cross entropy.
MATRICES = {
    "csi_pretrained": [
        [1842535, 58886, 1229, 28095, 110118, 5970, 203, 10174, 11254],
        [1816885, 82091, 3674, 38811, 88713, 16659, 1109, 8758, 11764],
        [1800305, 94859, 7496, 43167, 78158, 22858, 2222, 8470, 10939],
        [1798917, 93022, 10711, 51344, 70094, 22745, 3688, 8567, 9376],
        [1802681, 90368, 9611, 59751, 68603, 15829, 4812, 10454, 6365],
        [1783689, 105693, 13268, 59689, 67599, 16895, 5411, 10236, 5984],
    ],
    "csi_fresh": [
        [1850542, 50632, 1486, 34430, 97668, 12085, 679, 7704, 13248],
        [1833979, 64311, 4370, 47034, 76400, 20749, 2300, 8793, 10538],
        [1823363, 75620, 3677, 54560, 76389, 13234, 3904, 10819, 6908],
        [1820495, 77787, 4378, 59577, 73718, 10888, 5203, 11386, 5042],
        [1845752, 54771, 2137, 78372, 62195, 3616, 8191, 11559, 1881],
        [1873770, 28782, 108, 102457, 41591, 135, 12544, 8985, 102],
    ],
    "focal": [
        [1865533, 36166, 961, 35648, 102882, 5653, 423, 9854, 11354],
        [1857011, 44217, 1432, 51107, 82889, 10187, 2400, 10737, 8494],
        [1852840, 47612, 2208, 63055, 71271, 9857, 4336, 10979, 6316],
        [1845446, 54432, 2782, 69601, 66377, 8205, 6134, 11260, 4237],
        [1838026, 61362, 3272, 73949, 63312, 6922, 7124, 11500, 3007],
        [1821425, 77036, 4199, 72642, 64647, 6894, 7612, 11360, 2659],
    ],
    "ce": [
        [1854984, 46015, 1661, 28483, 100883, 14817, 407, 5129, 16095],
        [1850883, 50180, 1597, 48484, 85581, 10118, 2436, 10617, 8578],
        [1850154, 51179, 1327, 63431, 74555, 6197, 4753, 12493, 4385],
        [1845129, 56172, 1359, 70671, 68935, 4577, 6340, 12684, 2607],
        [1839613, 61581, 1466, 75864, 65115, 3204, 7634, 12401, 1596],
        [1840242, 61120, 1298, 82083, 60217, 1883, 9076, 11774, 781],
    ],
}

# (HEAVY CSI, HEAVY F1, RAIN CSI, RAIN F1) per lead time
SCORES = {
    "csi_pretrained": [
        (.390, .562, .609, .757), (.280, .438, .501, .667), (.210, .348, .449, .620),
        (.170, .291, .411, .583), (.135, .238, .381, .552), (.116, .207, .354, .523),
    ],
    "csi_fresh": [
        (.376, .547, .600, .750), (.225, .368, .497, .664), (.179, .304, .438, .609),
        (.137, .240, .407, .579), (.069, .129, .356, .525), (.005, .009, .261, .414),
    ],
    "focal": [
        (.402, .574, .639, .780), (.255, .407, .531, .694), (.187, .316, .456, .627),
        (.130, .230, .404, .575), (.094, .173, .368, .538), (.081, .150, .346, .514),
    ],
    "ce": [
        (.422, .594, .641, .782), (.257, .409, .528, .691), (.150, .261, .447, .618),
        (.095, .173, .398, .569), (.061, .114, .360, .529), (.031, .061, .327, .493),
    ],
}

# over/under-estimation percentages per lead time
RATIOS = {
    "csi_pretrained": ([3.19, 4.95, 6.05, 6.11, 5.60, 6.57], [1.86, 2.35, 2.60, 3.07, 3.63, 3.64]),
    "csi_fresh": ([3.10, 4.32, 4.47, 4.50, 2.93, 1.40], [2.07, 2.81, 3.35, 3.68, 4.74, 5.99]),
    "focal": ([2.07, 2.70, 2.89, 3.16, 3.46, 4.26], [2.22, 3.11, 3.79, 4.21, 4.48, 4.43]),
    "ce": ([3.02, 2.99, 2.84, 3.00, 3.20, 3.11], [1.64, 2.97, 3.90, 4.34, 4.64, 4.98]),
}

MEAN_RATIOS = {
    "csi_pretrained": (5.41, 2.86),
    "csi_fresh": (3.45, 3.77),
    "focal": (3.09, 3.70),
    "ce": (3.03, 3.74),
}

CASES = [(setting, i) for setting in MATRICES for i in range(len(LEAD_TIMES))]


def _matrix(setting, i):
    return ConfusionMatrix(np.array(MATRICES[setting][i]).reshape(3, 3), LEAD_TIMES[i])


@pytest.mark.parametrize("setting, i", CASES)
def test_published_scores(setting, i):
    cm = _matrix(setting, i)
    heavy_csi, heavy_f1, rain_csi, rain_f1 = SCORES[setting][i]
    assert csi_score(cm, TrackedClass.HEAVY) == pytest.approx(heavy_csi, abs=0.001)
    assert f1_score(cm, TrackedClass.HEAVY) == pytest.approx(heavy_f1, abs=0.001)
    assert csi_score(cm, TrackedClass.RAIN) == pytest.approx(rain_csi, abs=0.001)
    assert f1_score(cm, TrackedClass.RAIN) == pytest.approx(rain_f1, abs=0.001)


@pytest.mark.parametrize("setting, i", CASES)
def test_published_over_under_ratios(setting, i):
    over, under = over_under_ratios(_matrix(setting, i))
    assert 100 * over == pytest.approx(RATIOS[setting][0][i], abs=0.01)
    assert 100 * under == pytest.approx(RATIOS[setting][1][i], abs=0.01)


@pytest.mark.parametrize("setting", list(MATRICES))
def test_published_mean_ratios(setting):
    over, under = mean_over_under_ratios([_matrix(setting, i) for i in range(6)])
    assert 100 * over == pytest.approx(MEAN_RATIOS[setting][0], abs=0.01)
    assert 100 * under == pytest.approx(MEAN_RATIOS[setting][1], abs=0.01)


def test_lead_60_spot_values():
    cm = _matrix("csi_pretrained", 0)
    assert csi_score(cm, TrackedClass.HEAVY) == pytest.approx(0.3904, abs=1e-4)
    assert f1_score(cm, TrackedClass.HEAVY) == pytest.approx(0.5615, abs=1e-4)
    assert csi_score(cm, TrackedClass.RAIN) == pytest.approx(0.6087, abs=1e-4)
    assert f1_score(cm, TrackedClass.RAIN) == pytest.approx(0.7567, abs=1e-4)


def test_report_from_published_matrices():
    report = EvalReport.from_matrices([_matrix("csi_pretrained", i) for i in range(6)])
    assert list(report.table.index) == ["60", "120", "180", "240", "300", "360", AVERAGE_ROW]
    assert report.value(60, "CSI_HEAVY") == pytest.approx(0.390, abs=0.001)
    expected = np.mean([s[0] for s in SCORES["csi_pretrained"]])
    assert report.value(AVERAGE_ROW, "CSI_HEAVY") == pytest.approx(expected, abs=0.001)


def test_report_csv_round_trip(tmp_path):
    report = EvalReport.from_matrices([_matrix("focal", i) for i in range(6)], mse_by_lead=dict.fromkeys(LEAD_TIMES, 1.5))
    report.write_csv(tmp_path / "report.csv")
    back = EvalReport.read_csv(tmp_path / "report.csv")
    assert back.value(360, "F1_RAIN") == pytest.approx(report.value(360, "F1_RAIN"), abs=1e-6)
    assert back.value(AVERAGE_ROW, "MSE") == 1.5
    assert "0.402" in report.to_text()


def test_overall_csi_sums_matrices():
    matrices = [_matrix("ce", i) for i in range(6)]
    total = matrices[0]
    for cm in matrices[1:]:
        total = total + cm
    assert overall_csi(matrices) == pytest.approx(csi_score(total, TrackedClass.HEAVY))


@pytest.mark.parametrize("probs, expected", [
    ((0.5, 0.1, 0.4), PrecipClass.OTHERS),
    ((0.4, 0.4, 0.2), PrecipClass.LIGHT),
    ((0.2, 0.4, 0.4), PrecipClass.HEAVY),
    ((1 / 3, 1 / 3, 1 / 3), PrecipClass.HEAVY),
    ((0.1, 0.2, 0.7), PrecipClass.HEAVY),
])
def test_hard_classify_breaks_ties_upward(probs, expected):
    assert hard_classify(probs) == expected
    assert hard_classify_batch(np.array([probs]))[0] == int(expected)


def test_confusion_matrix_counts_actual_by_predicted():
    cm = confusion_matrix([(2, 0), (2, 0), (0, 1), (1, 1)], lead=120)
    assert cm.counts[0, 2] == 2
    assert cm.counts[1, 0] == 1
    assert cm.counts[1, 1] == 1
    assert cm.total == 4 and cm.lead == 120


def test_confusion_from_arrays_length_mismatch():
    with pytest.raises(LengthMismatch):
        confusion_from_arrays([0, 1], [0])


def test_scores_with_no_events_are_zero():
    cm = confusion_matrix([(0, 0), (0, 0)])
    assert csi_score(cm, TrackedClass.HEAVY) == 0.0
    assert f1_score(cm, TrackedClass.RAIN) == 0.0


def test_empty_matrix_ratios():
    with pytest.raises(EmptyMatrix):
        over_under_ratios(ConfusionMatrix())
    with pytest.raises(EmptyMatrix):
        mean_over_under_ratios([])


def test_mse_nested_means():
    assert mse([1.0, -1.0], [0.0, 0.0], ["a", "a"]) == 1.0
    # group a has mean squared error 2, group b has 4; a flat mean would give 10/3
    assert mse([math.sqrt(2), 2.0, -2.0], [0.0, 0.0, 0.0], ["a", "b", "b"]) == pytest.approx(3.0)


def test_mse_errors():
    with pytest.raises(LengthMismatch):
        mse([1.0], [1.0, 2.0], ["a"])
    with pytest.raises(EmptyGroups):
        mse([], [], [])


def test_haversine():
    assert haversine_km((37.0, 127.0), (38.0, 127.0)) == pytest.approx(111.195, abs=0.001)
    assert haversine_km((37.0, 127.0), (37.0, 128.0)) == pytest.approx(88.80, abs=0.05)
    assert haversine_km((37.0, 127.0), (37.0, 127.0)) == 0.0


def _case_fixture():
    stations = pd.DataFrame({
        "station_id": ["near", "far"],
        "lat": [37.50, 37.80],
        "lon": [127.00, 127.00],
    })
    rows = []
    for lead in LEAD_TIMES:
        rows.append({"station_id": "near", "lead_minutes": lead, "predicted": 2, "actual": 2})
        rows.append({"station_id": "far", "lead_minutes": lead, "predicted": 2, "actual": 0})
    return pd.DataFrame(rows), stations


def test_case_csi_by_radius():
    predictions, stations = _case_fixture()
    center = (37.5, 127.0)
    near = case_csi(predictions, stations, center, 10.0)
    assert near[60][TrackedClass.HEAVY] == 1.0
    everywhere = case_csi(predictions, stations, center, math.inf)
    assert everywhere[360][TrackedClass.HEAVY] == 0.5
    nobody = case_csi(predictions, stations, (30.0, 120.0), 10.0)
    assert nobody[60][TrackedClass.RAIN] is None


def test_case_table_marks_undefined_cells():
    predictions, stations = _case_fixture()
    table = case_table(predictions, stations, (37.5, 127.0))
    assert len(table) == 4 * len(LEAD_TIMES) * 2
    assert set(table["radius_km"]) == {"10", "25", "50", "all"}
    within_25 = table[(table["radius_km"] == "25") & (table["class"] == "HEAVY")]
    assert within_25["csi"].tolist() == [1.0] * 6
    within_50 = table[(table["radius_km"] == "50") & (table["class"] == "HEAVY")]
    assert within_50["csi"].tolist() == [0.5] * 6
    assert table["defined"].all()
