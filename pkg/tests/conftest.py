import re

import numpy as np
import pytest

from enhperc.config import SiteField
from enhperc.lattice import Kind, Window

_CRITERIA = {}


def random_field(kind, shape, p, rng, origin=(0, 0)):
    w = Window(Kind(kind), shape, origin)
    return SiteField(w, rng.random(w.array_shape) < p, p, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    num = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA.setdefault(num, [])
        _CRITERIA[num].append((m.group(2).replace("_", " "), report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        for name, outcome, detail in _CRITERIA[num]:
            mark = "PASS" if outcome == "passed" else "FAIL"
            line = f"criterion {num:>2} {mark}  {name}"
            if detail:
                line += f"  [{detail}]"
            terminalreporter.write_line(line)
