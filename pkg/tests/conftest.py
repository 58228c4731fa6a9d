"""Shared fixtures plus the acceptance ledger printed at the end of the run."""

import pytest

from paritygraft import backdoor as bd
from paritygraft import datasets as ds
from paritygraft import model as mdl

# One line per acceptance criterion, collected by the acceptance tests and
# printed as its own terminal section so plain `pytest -v` shows the ledger.
_ACCEPTANCE_LINES = []


def record(line):
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


# Frozen experiment instance shared by the end-to-end tests: one synthetic
# data draw and one trained host network, built once per session. The seeds
# are part of the test contract; changing them re-rolls every downstream
# accuracy and AUC number.

TRAIN_DATA_SEED = 1234
TEST_DATA_SEED = 1235
MODEL_SPEC = mdl.ModelSpec((3, 32, 32), (16,), 10)
TRAIN_CFG = mdl.TrainConfig(learning_rate=2.0, epochs=5, batch_size=16, seed=12)


@pytest.fixture(scope="session")
def synth_train():
    return ds.synth_dataset(classes=10, per_class=100, seed=TRAIN_DATA_SEED)


@pytest.fixture(scope="session")
def synth_test():
    return ds.synth_dataset(classes=10, per_class=30, seed=TEST_DATA_SEED)


@pytest.fixture(scope="session")
def trained_host(synth_train):
    return mdl.train(MODEL_SPEC, synth_train, TRAIN_CFG)


@pytest.fixture(scope="session")
def detector_cfg():
    return bd.DetectorConfig()
