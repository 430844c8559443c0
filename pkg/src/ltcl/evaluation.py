"""Top-1 accuracy over seen classes, average accuracy and report files."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ParameterError
from .images import to_input

METRICS_FILE = "metrics.json"
ACCURACY_FILE = "accuracy.csv"
PER_CLASS_FILE = "per_class.csv"
SERIES_FILE = "series.tsv"


@torch.no_grad()
def predict(bundle, images, batch_size=256) -> np.ndarray:
    """Argmax class row per image; ties resolve to the lowest index."""
    was_training = bundle.training
    bundle.eval()
    try:
        logits = [bundle(to_input(images[i:i + batch_size])).numpy()
                  for i in range(0, len(images), batch_size)]
    finally:
        bundle.train(was_training)
    return np.argmax(np.concatenate(logits), axis=1)


def accuracy_from_predictions(pred, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ParameterError("cannot evaluate on an empty test set")
    hits = int(np.count_nonzero(np.asarray(pred) == labels))
    return 100.0 * hits / len(labels)


def evaluate_seen(bundle, images, labels, batch_size=256) -> float:
    """Top-1 accuracy (percent) of ``bundle`` over its seen classes."""
    if len(labels) == 0:
        raise ParameterError("cannot evaluate on an empty test set")
    return accuracy_from_predictions(predict(bundle, images, batch_size), labels)


def per_class_accuracy(pred, labels) -> dict[int, float]:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return {int(c): accuracy_from_predictions(pred[labels == c], labels[labels == c])
            for c in np.unique(labels)}


def average_accuracy(accs) -> float:
    accs = list(accs)
    if not accs:
        raise ParameterError("average accuracy of an empty list")
    return float(sum(accs) / len(accs))


def head_tail_breakdown(class_acc: dict, train_counts: dict, threshold: int) -> dict:
    """Split per-class accuracies into head (train count >= threshold) and tail."""
    head = sorted(c for c in class_acc if train_counts.get(c, 0) >= threshold)
    tail = sorted(c for c in class_acc if train_counts.get(c, 0) < threshold)

    def mean(cs):
        return float(np.mean([class_acc[c] for c in cs])) if cs else None

    return {"threshold": threshold, "head_classes": head, "tail_classes": tail,
            "head_accuracy": mean(head), "tail_accuracy": mean(tail)}


@dataclass
class MetricsLog:
    task_accuracies: list = field(default_factory=list)
    # per_class[i][str(class_id)] = accuracy after task i
    per_class: list = field(default_factory=list)
    # task_matrix[i][j] = accuracy on task j's classes after task i
    task_matrix: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    task_sizes: list = field(default_factory=list)
    cumulative_sizes: list = field(default_factory=list)
    seen_classes: list = field(default_factory=list)
    buffer_stats: list = field(default_factory=list)
    head_tail: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def average_accuracy(self) -> float:
        return average_accuracy(self.task_accuracies)

    @property
    def num_tasks(self) -> int:
        return len(self.task_accuracies)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["average_accuracy"] = self.average_accuracy if self.task_accuracies else None
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsLog":
        doc = dict(doc)
        doc.pop("average_accuracy", None)
        return cls(**doc)


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def export_report(metrics: MetricsLog, out_dir) -> list[Path]:
    """Write metrics.json, accuracy.csv, series.tsv and (if available) per_class.csv.

    metrics.json is written last so a report is only ever marked with its
    final status once the tables beside it are complete.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []

        rows = ["task,seen_classes,accuracy,accuracy_2dp,lambda,task_size"]
        for i, acc in enumerate(metrics.task_accuracies):
            lam = metrics.lambdas[i] if i < len(metrics.lambdas) else ""
            size = metrics.task_sizes[i] if i < len(metrics.task_sizes) else ""
            seen = metrics.seen_classes[i] if i < len(metrics.seen_classes) else ""
            rows.append(f"{i + 1},{seen},{acc!r},{acc:.2f},{lam!r},{size}")
        p = out / ACCURACY_FILE
        _atomic_write(p, "\n".join(rows) + "\n")
        written.append(p)

        p = out / SERIES_FILE
        _atomic_write(p, "task\taccuracy\n" + "".join(
            f"{i + 1}\t{acc!r}\n" for i, acc in enumerate(metrics.task_accuracies)))
        written.append(p)

        if any(metrics.per_class):
            names = metrics.meta.get("class_names") or []
            lines = ["task,class_id,class_name,accuracy"]
            for i, row in enumerate(metrics.per_class):
                for cid, acc in sorted(row.items(), key=lambda kv: int(kv[0])):
                    name = names[int(cid)] if int(cid) < len(names) else ""
                    lines.append(f"{i + 1},{cid},{name},{acc:.2f}")
            p = out / PER_CLASS_FILE
            _atomic_write(p, "\n".join(lines) + "\n")
            written.append(p)

        p = out / METRICS_FILE
        _atomic_write(p, json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(p)
    except OSError as e:
        raise OSError(f"failed writing report to {out}: {e}") from e
    return written


def load_report(out_dir) -> MetricsLog:
    path = Path(out_dir) / METRICS_FILE
    return MetricsLog.from_dict(json.loads(path.read_text(encoding="utf-8")))


def read_accuracy_table(out_dir) -> list[float]:
    with open(Path(out_dir) / ACCURACY_FILE, newline="", encoding="utf-8") as fh:
        return [float(row["accuracy"]) for row in csv.DictReader(fh)]
