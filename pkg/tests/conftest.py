import numpy as np
import pytest

from caselab.adapters import CaseConfig
from caselab.backbone import Backbone, BackboneSpec, StageSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_spec(resolution: int = 8, channels=(4, 6, 8), adapters=(False, True, True)) -> BackboneSpec:
    stages = [StageSpec(c, insert_adapter=a) for c, a in zip(channels, adapters)]
    return BackboneSpec(stages, input_channels=3, input_resolution=resolution)


@pytest.fixture
def small_spec():
    return tiny_spec()


@pytest.fixture
def small_backbone(small_spec):
    bb = Backbone(small_spec, seed=3)
    bb.freeze()
    return bb


def randomize_heads(block, rng, scale=0.5):
    """Give an identity-initialized adapter MLP non-trivial output weights."""
    mlps = block.mlps if hasattr(block, "mlps") else [block.mlp]
    for mlp in mlps:
        for w, b in mlp.heads:
            w.data = rng.normal(0, scale, w.shape).astype(w.data.dtype)
            b.data = (b.data + rng.normal(0, 0.1, b.shape)).astype(b.data.dtype)


@pytest.fixture
def case_config():
    return CaseConfig(reduction=2, min_units=4)


# -- acceptance reporting ----------------------------------------------------------
# Tests marked ``criterion(n, title)`` are folded into one pass/fail line per
# criterion, printed at the end of the run.
_criteria: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = marker.args
    ok = rep.passed and rep.when == "call"
    prev = _criteria.get(number, (title, True))
    _criteria[number] = (title, prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}")
