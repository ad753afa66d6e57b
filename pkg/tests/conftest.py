import numpy as np
import pytest

from fsdakit import kernels
from fsdakit.dataset import Annotation, BBox, DetectionDataset, Domain, ImageRecord
from fsdakit.synthetic import synthetic_dataset, synthetic_target

BACKENDS = [kernels.NUMPY] + ([kernels.NUMBA] if kernels.NUMBA is not None else [])


@pytest.fixture(params=BACKENDS, ids=lambda b: b.name)
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def small_source():
    return synthetic_dataset([40, 6, 3], 60, dense_images=3, dense_count=7, seed=3, prefix="s")


@pytest.fixture(scope="session")
def small_target():
    return synthetic_target(3, 3, seed=4)


def blank_image(image_id="im", width=100, height=100, boxes=(), domain=Domain.SOURCE, value=0):
    pixels = np.full((height, width, 3), value, dtype=np.uint8)
    anns = tuple(Annotation(c, BBox(*b)) for c, b in boxes)
    return ImageRecord(image_id, pixels, anns, domain)


def one_class_per_image(n_classes, per_class, seed=0):
    rng = np.random.default_rng(seed)
    images = []
    for c in range(n_classes):
        for j in range(per_class):
            px = rng.integers(0, 255, size=(32, 32, 3), dtype=np.uint8)
            images.append(ImageRecord(f"c{c}_{j}", px, (Annotation(c, BBox(4, 4, 20, 20)),)))
    return DetectionDataset(tuple(f"k{c}" for c in range(n_classes)), tuple(images))


# -- acceptance reporting ----------------------------------------------------------

CRITERIA = {
    1: "balance property",
    2: "determinism at 1, 2 and 8 threads",
    3: "gradient suite",
    4: "loss identities",
    5: "invariance suite",
    6: "metric oracle",
    7: "batch schedule",
    8: "pooling oracle",
}
_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n} ({name}): {status}")
