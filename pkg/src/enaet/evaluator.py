"""Test metrics, report files, and cross-run comparison tables."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

UNDEFINED = "n/a"


class VocabularyMismatch(ValueError):
    pass


@torch.no_grad()
def predict(model, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Argmax class index per image (ties go to the lowest index), eval mode."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        probs = torch.softmax(model(images[i:i + batch_size]), dim=1)
        out.append(probs.argmax(1).cpu())  # torch.argmax returns the first maximal index
    model.train(was_training)
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def confusion_matrix(targets, predictions, num_classes: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


@dataclass
class ClassMetrics:
    name: str
    precision: float | None
    recall: float | None
    support: int


def per_class_metrics(confusion, classes=None) -> list[ClassMetrics]:
    """Precision from columns, recall from rows; ``None`` where the denominator is 0."""
    m = np.asarray(confusion)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {m.shape}")
    if np.any(m < 0):
        raise ValueError("confusion matrix entries must be nonnegative")
    classes = list(classes) if classes is not None else [str(i) for i in range(len(m))]
    cols, rows = m.sum(0), m.sum(1)
    out = []
    for c in range(len(m)):
        prec = float(m[c, c] / cols[c]) if cols[c] else None
        rec = float(m[c, c] / rows[c]) if rows[c] else None
        out.append(ClassMetrics(classes[c], prec, rec, int(rows[c])))
    return out


def _macro(values):
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class MetricsReport:
    top1_accuracy: float
    confusion: np.ndarray
    per_class: list
    num_samples: int
    classes: list

    @classmethod
    def from_predictions(cls, targets, predictions, classes) -> "MetricsReport":
        m = confusion_matrix(targets, predictions, len(classes))
        n = int(m.sum())
        if n == 0:
            raise ValueError("cannot evaluate an empty split")
        return cls(float(np.trace(m) / n), m, per_class_metrics(m, classes), n, list(classes))

    @property
    def macro_precision(self):
        return _macro(c.precision for c in self.per_class)

    @property
    def macro_recall(self):
        return _macro(c.recall for c in self.per_class)

    def to_dict(self) -> dict:
        return {
            "top1_accuracy": self.top1_accuracy,
            "num_samples": self.num_samples,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "classes": self.classes,
            "confusion": self.confusion.tolist(),
            "per_class": [
                {"class": c.name, "precision": c.precision, "recall": c.recall, "support": c.support}
                for c in self.per_class
            ],
        }


def evaluate(model, images: torch.Tensor, targets: torch.Tensor, classes, batch_size: int = 256) -> MetricsReport:
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    if getattr(model, "num_classes", len(classes)) != len(classes):
        raise VocabularyMismatch(f"model predicts {model.num_classes} classes but the vocabulary has {len(classes)}")
    preds = predict(model, images, batch_size)
    return MetricsReport.from_predictions(targets.numpy(), preds.numpy(), classes)


def _fmt(v) -> str:
    return UNDEFINED if v is None else f"{v:.6f}"


def write_report(report: MetricsReport, out_dir, extra: dict | None = None) -> None:
    """report.json, confusion.csv and per_class.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\predicted", *report.classes])
        for name, row in zip(report.classes, report.confusion):
            w.writerow([name, *row.tolist()])
    with open(out / "per_class.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "support"])
        for c in report.per_class:
            w.writerow([c.name, _fmt(c.precision), _fmt(c.recall), c.support])
        w.writerow(["macro", _fmt(report.macro_precision), _fmt(report.macro_recall), report.num_samples])


def write_curve(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "val_acc"])
        for row in history:
            acc = row.get("val_acc")
            w.writerow([row["epoch"], "" if acc is None else acc])


@dataclass
class ComparisonRow:
    name: str
    accuracy: float
    portion_pct: float


def compare_runs(runs) -> list[ComparisonRow]:
    """Rows sorted by accuracy, highest first.

    Each run is a ``(name, accuracy, portion)`` tuple or a mapping with
    ``name``, ``top1_accuracy`` and ``portion`` keys (as in report.json).
    """
    rows = []
    for r in runs:
        if isinstance(r, dict):
            name, acc, portion = r["name"], r["top1_accuracy"], r["portion"]
        else:
            name, acc, portion = r
        rows.append(ComparisonRow(str(name), float(acc), float(portion) * 100.0))
    rows.sort(key=lambda r: (-r.accuracy, r.name))
    return rows


def render_table(rows: list[ComparisonRow]) -> str:
    header = ("Model", "Test Accuracy", "% of training data labeled")
    body = [(r.name, f"{100 * r.accuracy:.2f}%", f"{r.portion_pct:g}%") for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    fmt = "| " + " | ".join(f"{{:<{w}}}" for w in widths) + " |"
    out = [line, fmt.format(*header), line, *(fmt.format(*b) for b in body), line]
    return "\n".join(out)


def rows_to_csv(rows: list[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "test_accuracy", "labeled_portion_pct"])
    for r in rows:
        w.writerow([r.name, repr(r.accuracy), repr(r.portion_pct)])
    return buf.getvalue()
