import pytest

from enaet.data import load_manifest, split_dataset
from enaet.synthetic import generate
from enaet.trainer import TrainConfig


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    """10 classes x 8 images of 16x16 pixels: 5 train, 1 validation, 2 test each."""
    return generate(tmp_path_factory.mktemp("toy"), per_class=8, split_counts=(5, 1, 2), size=16, seed=0)


@pytest.fixture
def toy_plan(toy_manifest):
    return split_dataset(load_manifest(toy_manifest), portion=0.4, seed=0)


@pytest.fixture
def make_config():
    def make(**kw):
        base = dict(epochs=2, batch_size=8, image_size=16, depth=10, width=1, base_channels=4,
                    ema_alpha=0.9, steps_per_epoch=2, aet_batch=4, seed=0)
        base.update(kw)
        return TrainConfig(**base)
    return make


# --- acceptance report ----------------------------------------------------------

ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed at the end of the run."""
    def record(name, passed, detail=""):
        ACCEPTANCE.append((name, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
