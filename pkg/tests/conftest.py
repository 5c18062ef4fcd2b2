import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rtnq.evaluate import PlanEvaluator
from rtnq.toy import ToyTransformerConfig, gen_synthetic_checkpoint, make_inputs, synthetic_model

settings.register_profile("rtnq", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rtnq")

_ACCEPTANCE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")
_results = {}


_RANK = {"PASS": 0, "SKIP": 1, "XFAIL": 2, "FAIL": 3}
_LABEL = {"XFAIL": "FAIL (known, documented in the decisions ledger)"}


def pytest_runtest_logreport(report):
    m = _ACCEPTANCE.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    if hasattr(report, "wasxfail"):
        status = "XFAIL" if report.skipped else "FAIL"
    elif report.failed:
        status = "FAIL"
    elif report.skipped:
        status = "SKIP"
    else:
        status = "PASS"
    name = report.nodeid.split("::")[-1].split("[")[0]
    statuses, names = _results.setdefault(int(m.group(1)), ({}, []))
    statuses[report.nodeid] = status
    if name not in names:
        names.append(name)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        statuses, names = _results[n]
        worst = max(statuses.values(), key=_RANK.__getitem__)
        terminalreporter.write_line(f"criterion {n:>2}: {_LABEL.get(worst, worst)}  ({', '.join(names)})")


@pytest.fixture(scope="session")
def toy_cfg():
    return ToyTransformerConfig()


@pytest.fixture(scope="session")
def toy_model(toy_cfg):
    return synthetic_model(toy_cfg, seed=0)


@pytest.fixture(scope="session")
def toy_inputs(toy_cfg):
    return make_inputs(toy_cfg)


@pytest.fixture(scope="session")
def toy_ckpt(tmp_path_factory, toy_cfg):
    return gen_synthetic_checkpoint(toy_cfg, 0, tmp_path_factory.mktemp("ckpt") / "toy.ckpt")


@pytest.fixture(scope="session")
def evaluator(toy_model, toy_inputs):
    return PlanEvaluator(toy_model, toy_inputs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
