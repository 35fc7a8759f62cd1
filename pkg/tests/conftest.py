"""Shared fixtures; full ResNet-18 plans and runs are built once per session."""

from __future__ import annotations

import time

import pytest
from hypothesis import HealthCheck, settings

from aimcsim.config import ArchConfig, CostCoefficients
from aimcsim.dnn import build_resnet18
from aimcsim.mapper import build_preset
from aimcsim.runtime import elaborate, run_batch

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def arch() -> ArchConfig:
    return ArchConfig.load()


@pytest.fixture(scope="session")
def coeffs() -> CostCoefficients:
    return CostCoefficients.load()


@pytest.fixture(scope="session")
def resnet():
    return build_resnet18()


@pytest.fixture(scope="session")
def plans(resnet, arch):
    return {name: build_preset(name, resnet, arch) for name in ("naive", "replicated", "final")}


class _Runs:
    """Lazy per-preset batch runs with their host wall time."""

    def __init__(self, plans, graph, arch, coeffs):
        self.plans, self.graph, self.arch, self.coeffs = plans, graph, arch, coeffs
        self.reports, self.instances, self.wall_s = {}, {}, {}

    def __getitem__(self, preset: str):
        if preset not in self.reports:
            t0 = time.perf_counter()
            inst = elaborate(self.plans[preset], self.graph, self.arch)
            self.reports[preset] = run_batch(inst, self.coeffs)
            self.wall_s[preset] = time.perf_counter() - t0
            self.instances[preset] = inst
        return self.reports[preset]


@pytest.fixture(scope="session")
def runs(plans, resnet, arch, coeffs) -> _Runs:
    return _Runs(plans, resnet, arch, coeffs)


@pytest.fixture
def criterion():
    """Record an acceptance line; the terminal summary prints them all."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append((f"{number:>2} {name}", ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
