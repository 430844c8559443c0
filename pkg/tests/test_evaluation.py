import csv
import json

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

import oracles
from ltcl.errors import ParameterError
from ltcl.evaluation import (MetricsLog, accuracy_from_predictions, average_accuracy,
                             evaluate_seen, export_report, head_tail_breakdown, load_report,
                             per_class_accuracy, read_accuracy_table)
from ltcl.model import ModelBundle


class PixelFeatures(nn.Module):
    """Uses the first pixel of each channel as a 1x1 feature map."""

    def forward(self, x):
        return x[:, :, :1, :1]


def bundle_with(weight, bias):
    b = ModelBundle(PixelFeatures(), d=3, input_size=4, num_classes=len(bias))
    with torch.no_grad():
        b.weight.copy_(torch.as_tensor(weight, dtype=torch.float32))
        b.bias.copy_(torch.as_tensor(bias, dtype=torch.float32))
    return b


def test_perfect_classifier():
    # bias alone picks the class, so pixel content is ignored
    labels = torch.full((6,), 2)
    b = bundle_with(torch.zeros(3, 3), [0.0, 0.0, 1e6])
    assert evaluate_seen(b, torch.zeros(6, 3, 4, 4, dtype=torch.uint8), labels) == 100.0


def test_constant_logits_tie_break():
    b = bundle_with(torch.zeros(4, 3), [0.0] * 4)
    labels = torch.arange(4).repeat(5)
    assert evaluate_seen(b, torch.zeros(20, 3, 4, 4, dtype=torch.uint8), labels) == 25.0


@pytest.mark.parametrize("seed", range(10))
def test_accuracy_matches_counting_oracle(seed):
    g = torch.Generator().manual_seed(seed)
    W = torch.randn(5, 3, generator=g)
    bias = torch.randn(5, generator=g)
    b = bundle_with(W, bias)
    imgs = torch.randint(0, 256, (40, 3, 4, 4), generator=g, dtype=torch.uint8)
    labels = torch.randint(0, 5, (40,), generator=g)
    got = evaluate_seen(b, imgs, labels)
    with torch.no_grad():
        logits = b(((imgs.float() / 255 - 0.5) / 0.25)).tolist()
    assert got == oracles.count_accuracy(logits, labels.tolist())


def test_evaluation_order_invariant():
    g = torch.Generator().manual_seed(0)
    b = bundle_with(torch.randn(4, 3, generator=g), torch.randn(4, generator=g))
    imgs = torch.randint(0, 256, (30, 3, 4, 4), generator=g, dtype=torch.uint8)
    labels = torch.randint(0, 4, (30,), generator=g)
    perm = torch.randperm(30, generator=g)
    assert evaluate_seen(b, imgs, labels) == evaluate_seen(b, imgs[perm], labels[perm])


def test_empty_test_set():
    with pytest.raises(ParameterError):
        accuracy_from_predictions([], [])


def test_per_class_accuracy():
    got = per_class_accuracy([0, 1, 1, 2], [0, 1, 0, 2])
    assert got == {0: 50.0, 1: 100.0, 2: 100.0}


# --- average accuracy ---------------------------------------------------------

def test_average_examples():
    assert average_accuracy([50, 40, 30]) == 40.0
    assert average_accuracy([37.5]) == 37.5
    with pytest.raises(ParameterError):
        average_accuracy([])


@settings(max_examples=100)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=20), st.randoms())
def test_average_permutation_invariant(accs, rnd):
    shuffled = accs[:]
    rnd.shuffle(shuffled)
    assert average_accuracy(shuffled) == pytest.approx(average_accuracy(accs), abs=1e-9)


# --- head / tail --------------------------------------------------------------

@settings(max_examples=100)
@given(st.dictionaries(st.integers(0, 50), st.tuples(st.floats(0, 100), st.integers(1, 500)),
                       min_size=1), st.integers(1, 50))
def test_head_tail_partition(table, M):
    acc = {c: a for c, (a, _) in table.items()}
    counts = {c: n for c, (_, n) in table.items()}
    out = head_tail_breakdown(acc, counts, M)
    head, tail = set(out["head_classes"]), set(out["tail_classes"])
    assert head.isdisjoint(tail) and head | tail == set(acc)
    assert all(counts[c] >= M for c in head) and all(counts[c] < M for c in tail)


# --- report export ------------------------------------------------------------

def sample_log(per_class=True):
    return MetricsLog(
        task_accuracies=[91.25, 60.0, 47.123456789],
        per_class=[{"0": 90.0, "1": 92.5}, {"0": 50.0, "1": 55.0, "2": 75.0},
                   {"0": 40.0, "1": 45.0, "2": 50.0, "3": 53.5}] if per_class else [],
        task_matrix=[[91.25], [52.5, 75.0], [42.5, 50.0, 53.5]],
        lambdas=[1.0, 0.5, 0.4472135954999579],
        task_sizes=[400, 100, 80],
        cumulative_sizes=[400, 500, 580],
        seen_classes=[2, 3, 4],
        meta={"method": "full", "seed": 0, "status": "complete", "class_names": list("abcd")},
    )


def test_report_roundtrip(tmp_path):
    log = sample_log()
    export_report(log, tmp_path)
    assert load_report(tmp_path) == log
    for name in ("metrics.json", "accuracy.csv", "series.tsv", "per_class.csv"):
        assert (tmp_path / name).exists()


def test_empty_per_class_skips_table(tmp_path):
    export_report(sample_log(per_class=False), tmp_path)
    assert not (tmp_path / "per_class.csv").exists()
    assert (tmp_path / "metrics.json").exists() and (tmp_path / "accuracy.csv").exists()


def test_document_average_matches_table(tmp_path):
    log = sample_log()
    export_report(log, tmp_path)
    doc = json.loads((tmp_path / "metrics.json").read_text())
    column = read_accuracy_table(tmp_path)
    assert abs(doc["average_accuracy"] - float(np.mean(column))) < 1e-9


def test_table_has_two_decimal_column(tmp_path):
    export_report(sample_log(), tmp_path)
    with open(tmp_path / "accuracy.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["accuracy_2dp"] for r in rows] == ["91.25", "60.00", "47.12"]


def test_series_file(tmp_path):
    export_report(sample_log(), tmp_path)
    lines = (tmp_path / "series.tsv").read_text().splitlines()
    assert lines[0] == "task\taccuracy" and len(lines) == 4
