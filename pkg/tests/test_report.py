import csv
import json

import numpy as np
import pytest

from standseg.errors import InputError
from standseg.metrics import ConfusionMatrix, metrics_report
from standseg.report import confusion_rows, emit_report, history_svg
from standseg.trainer import EpochRecord


def history(n=80, best=73):
    rng = np.random.default_rng(0)
    out = []
    for e in range(1, n + 1):
        v = 0.3 + 0.3 * e / n + rng.uniform(-0.01, 0.01)
        out.append(EpochRecord(e, 1 - v, 1 - v, 0.99 if e == best else min(v, 0.9), v, v, v))
    return out


def sample_metrics():
    rng = np.random.default_rng(3)
    return metrics_report(ConfusionMatrix(rng.integers(1, 40, (5, 5))))


def test_svg_structure():
    svg = history_svg(history())
    assert svg.count('class="panel"') == 3
    assert svg.count('data-series="train"') == 3 and svg.count('data-series="val"') == 3
    assert svg.count('class="best-epoch"') == 3
    assert 'data-epoch="73"' in svg and 'stroke-dasharray="2,3"' in svg
    assert svg.count('<polyline') == 6
    first = svg.split('points="')[1].split('"')[0]
    assert len(first.split()) == 80


def test_empty_history():
    with pytest.raises(InputError):
        history_svg([])
    with pytest.raises(InputError):
        emit_report(sample_metrics(), [], "unused")


def test_csv_sums_and_layout(tmp_path):
    metrics = sample_metrics()
    paths = emit_report(metrics, history(10, 4), tmp_path)
    rows = list(csv.reader(open(paths["confusion"])))
    assert rows == confusion_rows(metrics)
    assert rows[0] == ["predicted\\reference", "NF", "I-II", "III", "IV", "V", "Sum", "UA"]
    cells = np.array([[float(v) for v in r[1:6]] for r in rows[1:6]])
    np.testing.assert_allclose([float(r[6]) for r in rows[1:6]], cells.sum(axis=1), atol=6e-4)
    sum_row = rows[6]
    assert sum_row[0] == "Sum"
    np.testing.assert_allclose([float(v) for v in sum_row[1:6]], cells.sum(axis=0), atol=6e-4)
    assert float(sum_row[6]) == pytest.approx(1.0)
    assert rows[7][0] == "PA" and float(rows[7][7]) == pytest.approx(metrics["oa"], abs=5e-5)
    assert float(rows[1][7]) == pytest.approx(metrics["per_class"][0]["ua"], abs=5e-5)
    assert json.loads(paths["metrics"].read_text()) == json.loads(json.dumps(metrics))


def test_absent_class_blank_in_csv():
    counts = np.diag([3, 0, 2, 2, 1])
    rows = confusion_rows(metrics_report(ConfusionMatrix(counts)))
    assert rows[2][7] == "" and rows[7][2] == ""
