import csv
import json

import numpy as np
import pytest
import torch
from torch import nn

from enaet.evaluator import (
    MetricsReport,
    compare_runs,
    confusion_matrix,
    evaluate,
    per_class_metrics,
    predict,
    render_table,
    rows_to_csv,
    write_curve,
    write_report,
)

FIXTURE = np.array([[3, 1], [2, 4]])


class Fixed(nn.Module):
    """Returns stored logits row by row, ignoring pixel content except the index channel."""

    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float32)
        self.num_classes = self.logits.shape[1]

    def forward(self, x):
        return self.logits[x[:, 0, 0, 0].long()]


def indexed_images(n):
    x = torch.zeros(n, 3, 2, 2)
    x[:, 0, 0, 0] = torch.arange(n, dtype=torch.float32)
    return x


def test_fixture_precision_recall():
    pc = per_class_metrics(FIXTURE)
    assert [c.precision for c in pc] == pytest.approx([0.6, 0.8], abs=1e-3)
    assert [c.recall for c in pc] == pytest.approx([0.75, 0.6667], abs=1e-3)
    assert [c.support for c in pc] == [4, 6]


def test_fixture_accuracy_is_trace_over_total():
    targets = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1]
    preds = [0, 0, 0, 1, 0, 0, 1, 1, 1, 1]
    rep = MetricsReport.from_predictions(targets, preds, ["a", "b"])
    assert np.array_equal(rep.confusion, FIXTURE)
    assert abs(rep.top1_accuracy - np.trace(FIXTURE) / FIXTURE.sum()) <= 1e-12


def test_scaled_identity_is_perfect():
    for c in per_class_metrics(np.eye(4, dtype=int) * 7):
        assert c.precision == 1 and c.recall == 1


def test_empty_row_is_undefined(tmp_path):
    m = np.array([[2, 0, 1], [0, 0, 0], [1, 0, 3]])
    pc = per_class_metrics(m, ["x", "y", "z"])
    assert pc[1].recall is None and pc[1].precision is None
    rep = MetricsReport(5 / 7, m, pc, 7, ["x", "y", "z"])
    assert rep.macro_recall == pytest.approx((2 / 3 + 3 / 4) / 2)
    write_report(rep, tmp_path)
    rows = list(csv.reader(open(tmp_path / "per_class.csv")))
    assert rows[2] == ["y", "n/a", "n/a", "0"]
    assert rows[-1][0] == "macro"
    assert "NaN" not in (tmp_path / "report.json").read_text()


def test_non_square_rejected():
    with pytest.raises(ValueError):
        per_class_metrics(np.zeros((2, 3)))


def test_perfect_classifier_ten_samples():
    targets = torch.tensor([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
    model = Fixed(torch.eye(3)[targets] * 5)
    rep = evaluate(model, indexed_images(10), targets, ["a", "b", "c"])
    assert rep.top1_accuracy == 1.0 and rep.num_samples == 10
    assert np.array_equal(rep.confusion, np.diag([4, 3, 3]))


def test_constant_classifier_on_balanced_set():
    c = 5
    targets = torch.arange(c).repeat(4)
    model = Fixed(torch.zeros(len(targets), c))  # all ties -> class 0
    rep = evaluate(model, indexed_images(len(targets)), targets, list("abcde"))
    assert rep.top1_accuracy == pytest.approx(1 / c)
    assert rep.confusion[:, 0].sum() == len(targets)


def test_ties_go_to_lowest_index():
    model = Fixed([[0.0, 2.0, 2.0], [1.0, 1.0, 1.0]])
    assert predict(model, indexed_images(2)).tolist() == [1, 0]


def test_confusion_rows_sum_to_class_counts():
    rng = np.random.default_rng(0)
    t, p = rng.integers(0, 6, 300), rng.integers(0, 6, 300)
    m = confusion_matrix(t, p, 6)
    assert np.array_equal(m.sum(1), np.bincount(t, minlength=6))


def test_metrics_invariant_to_order():
    rng = np.random.default_rng(1)
    t, p = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
    perm = rng.permutation(100)
    a = MetricsReport.from_predictions(t, p, list("abcd")).to_dict()
    b = MetricsReport.from_predictions(t[perm], p[perm], list("abcd")).to_dict()
    assert a == b


def test_vocabulary_mismatch():
    with pytest.raises(ValueError, match="vocabulary"):
        evaluate(Fixed(torch.zeros(4, 3)), indexed_images(4), torch.zeros(4, dtype=torch.long), ["a", "b"])


def test_report_files(tmp_path):
    rep = MetricsReport.from_predictions([0, 1, 1], [0, 1, 0], ["cat", "dog"])
    write_report(rep, tmp_path, {"split": "test"})
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["num_samples"] == 3 and data["split"] == "test"
    conf = list(csv.reader(open(tmp_path / "confusion.csv")))
    assert conf == [["true\\predicted", "cat", "dog"], ["cat", "1", "0"], ["dog", "1", "1"]]


def test_curve_export(tmp_path):
    write_curve([{"epoch": 1, "val_acc": 0.5}, {"epoch": 2, "val_acc": None}], tmp_path / "curve.csv")
    assert (tmp_path / "curve.csv").read_text() == "epoch,val_acc\n1,0.5\n2,\n"


def test_compare_single_run():
    rows = compare_runs([("only", 0.4, 0.1)])
    assert len(rows) == 1 and rows[0].portion_pct == pytest.approx(10.0)


def test_compare_sorted_descending():
    rows = compare_runs([("a", 0.3, 0.08), {"name": "b", "top1_accuracy": 0.7, "portion": 0.5}, ("c", 0.5, 1.0)])
    assert [r.name for r in rows] == ["b", "c", "a"]
    assert [r.portion_pct for r in rows] == pytest.approx([50.0, 100.0, 8.0])
    table = render_table(rows)
    assert table.index("| b") < table.index("| c") < table.index("| a")
    assert rows_to_csv(rows).splitlines()[0] == "name,test_accuracy,labeled_portion_pct"
