from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from streamssm.encoder import MICRO_CONFIG, Encoder

# smaller than the micro config: two heads, rank two, few channels
TINY_CONFIG = dataclasses.replace(MICRO_CONFIG, d_model=8, d_state=4, d_head=4, rank=2,
                                  n_queries=2, embed_heads=2, patch_samples=4, pos_period=6,
                                  n_channels=3)


@pytest.fixture
def tiny_encoder():
    return Encoder.init(TINY_CONFIG, np.random.default_rng(11))


@pytest.fixture
def micro_encoder():
    return Encoder.init(MICRO_CONFIG, np.random.default_rng(5))


# -- acceptance report ----------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"
    item.config.stash[_ACCEPTANCE][mark.args[0]] = (mark.args[1], rep.passed, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        name, ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
