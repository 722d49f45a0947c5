import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pointveil.data import SynthSpec, generate
from pointveil.training import TrainConfig, train

settings.register_profile("pointveil", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pointveil")

_criteria = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the lines are repeated in the terminal summary."""

    def record(name: str, passed: bool, detail: str) -> bool:
        line = f"{name} {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        request.config.stash.setdefault(_criteria, []).append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_criteria, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_dataset():
    return generate(SynthSpec(points=64, clouds_per_class=6))


@pytest.fixture(scope="session")
def small_bundle(small_dataset):
    """A briefly trained classification model; cheap enough for unit tests."""
    return train(small_dataset.subset("train"), TrainConfig(hidden=16, epochs=4, lr=3e-3)).bundle


@pytest.fixture(scope="session")
def rocket_dataset():
    return generate(SynthSpec(classes=("rocket",), points=64, clouds_per_class=6))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_dataset():
    """4 classes x 50 clouds x 256 points."""
    return generate(SynthSpec())


@pytest.fixture(scope="session")
def desk_bundle(desk_dataset):
    """Desk-scale classification model (hidden 64, 30 epochs) trained on the train split."""
    cfg = TrainConfig(hidden=64, epochs=30, lr=1e-3)
    return train(desk_dataset.subset("train"), cfg).bundle


@pytest.fixture(scope="session")
def desk_rocket():
    """200 three-part rocket clouds, the segmentation counterpart of ``desk_dataset``."""
    return generate(SynthSpec(classes=("rocket",), clouds_per_class=200))


@pytest.fixture(scope="session")
def desk_seg_bundle(desk_rocket):
    cfg = TrainConfig(hidden=64, epochs=60, lr=1e-3, task="segmentation")
    return train(desk_rocket.subset("train"), cfg).bundle
