from __future__ import annotations

import time

import numpy as np
import pytest
import torch

from histomorph.backbone import get_config

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title, budget): acceptance criterion n with a runtime budget (s)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title, budget = mark.args
    elapsed = time.perf_counter() - start
    ok = outcome.excinfo is None
    if ok and elapsed > budget:
        ok = False
        outcome.force_exception(AssertionError(f"criterion {n} took {elapsed:.1f}s, budget {budget}s"))
    _CRITERIA[n] = (title, ok, elapsed, budget)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, elapsed, budget = _CRITERIA[n]
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}  ({elapsed:.1f}s of {budget}s)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny():
    return get_config("tiny")


def to_batch(images) -> torch.Tensor:
    """List of H x W x 3 uint8 arrays -> N x 3 x H x W float tensor in [0, 1]."""
    return torch.stack([torch.from_numpy(np.ascontiguousarray(im.transpose(2, 0, 1))).float() / 255 for im in images])


def calibrate_bn(model, x, passes=3):
    """Fill BN running statistics from ``x`` so inference mode sees normalized activations."""
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.momentum = None
            m.reset_running_stats()
    model.train()
    with torch.no_grad():
        for _ in range(passes):
            model(x)
    model.eval()
    return model


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Synthetic manifests for every logical dataset plus a tiny demo config."""
    from histomorph.cli import main

    root = tmp_path_factory.mktemp("ws")
    assert main(["synth", "--out", str(root), "--n", "8"]) == 0
    return root
