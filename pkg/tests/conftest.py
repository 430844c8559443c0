import pytest

from ltcl import synthetic
from ltcl.config import from_dict
from ltcl.dataset import partition_tasks

# six classes, the last two below the buffer budget of 5 so CAM-CutMix has work to do
TINY_COUNTS = [14, 11, 9, 7, 4, 3]


def tiny_config(**overrides):
    doc = {
        "dataset": {"train_manifest": "in-memory"},
        "model": {"widths": [8, 16]},
        "method": {"memory_budget": 5},
        "trainer": {"epochs_per_task": 2, "batch_size": 8, "lr_decay_epochs": 1},
        "output": {"checkpoints": True},
    }
    for section, values in overrides.items():
        doc.setdefault(section, {}).update(values)
    return from_dict(doc, env={})


@pytest.fixture(scope="session")
def tiny_data():
    train = synthetic.source_manifest(len(TINY_COUNTS), TINY_COUNTS, seed=5, split="train")
    test = synthetic.source_manifest(len(TINY_COUNTS), 4, seed=5, split="test")
    tasks = partition_tasks(train, 3, seed=2)
    return train, test, tasks


# acceptance criteria report one verdict line each, printed after the run
CRITERIA: dict = {}


def record_criterion(number, passed, detail):
    CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
