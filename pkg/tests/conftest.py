import numpy as np
import pytest

from mahafsl.backbone import BackboneConfig, PrecomputedBackbone
from mahafsl.episodes import generate_synthetic

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("acceptance")
    if mark is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, title = mark.args
    ok = call.excinfo is None
    prev = _acceptance.get(number, (title, True))
    _acceptance[number] = (title, prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, ok = _acceptance[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def separable():
    """10 isotropic classes, d=16, mean norm 5 (5 meta-train / 5 meta-test)."""
    manifest, store = generate_synthetic(10, 16, 5.0, samples_per_class=100, seed=1)
    return manifest, PrecomputedBackbone(BackboneConfig(embed_dim=16), store)


@pytest.fixture(scope="session")
def small_synth():
    manifest, store = generate_synthetic(6, 4, 4.0, samples_per_class=12, seed=3, train_classes=3)
    return manifest, PrecomputedBackbone(BackboneConfig(embed_dim=4), store)
