import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "data.points_per_object": 150, "data.num_scenes": 6, "eval.test_scenes": 2,
    "model.channels": 8, "model.feat_dim": 8, "model.state_dim": 8, "model.proto_dim": 16,
    "aug.n": 2, "aug.m": 2, "aug.target_points": 32, "geo.samples": 8,
    "pretrain.steps": 3, "pretrain.batch_size": 2, "finetune.steps": 3, "finetune.batch_size": 2,
    "eval.probe_steps": 20, "eval.points_per_class": 8,
}


def tiny_overrides():
    """Flat overrides for a config that trains in well under a second per phase."""
    return dict(TINY)


@pytest.fixture
def tiny_cfg():
    from pointcsp.config import TrainingConfig

    return TrainingConfig().replace(**TINY)


# ---------------------------------------------------------------- acceptance report

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "detail": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["detail"] += [str(v) for k, v in rep.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        detail = "; ".join(e["detail"])
        line = f"criterion {number:>2} {e['title']}: {'PASS' if e['ok'] else 'FAIL'}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
