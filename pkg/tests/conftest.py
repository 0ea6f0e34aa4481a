"""Shared fixtures plus a terminal summary line per acceptance criterion."""

import re

import numpy as np
import pytest

from moe_lens import ModelConfig
from moe_lens.synth import SynthSpec, synth_scratch

_ACCEPTANCE_RESULTS: dict[str, str] = {}
_ACCEPTANCE_PAT = re.compile(r"test_acceptance\.py::test_(c\d+)_(\w+)")


@pytest.fixture
def small_config():
    return ModelConfig(num_layers=2, experts_per_layer=[4, 4], num_shared=[0, 0],
                       top_k=2, d_hid=8, d_mid=12, vocab=17)


@pytest.fixture
def small_checkpoint(small_config):
    return synth_scratch(SynthSpec(config=small_config, mode="scratch", seed=123))


@pytest.fixture
def rng():
    return np.random.default_rng(20240816)


def write_corpus(path, sequences):
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(" ".join(str(t) for t in seq) + "\n")


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    m = _ACCEPTANCE_PAT.search(report.nodeid)
    if m:
        _ACCEPTANCE_RESULTS[f"{m.group(1)} {m.group(2)}"] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[name]
        word = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{word}] {name.replace('_', ' ')}")
