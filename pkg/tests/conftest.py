from __future__ import annotations

import functools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from subdiffusion.elliptic import DiffusionField, SpatialMesh
from subdiffusion.fracderiv import TimeGrid
from subdiffusion.timestepper import ProblemSpec, run

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def ml_series_oracle(alpha: float, z: float) -> float:
    """High-precision partial sums of sum z^n / Gamma(alpha n + 1)."""
    x = abs(z)
    # the largest term is about exp(x^(1/alpha)); carry enough digits to absorb the cancellation
    digits = 30 + int(x ** (1.0 / alpha) / math.log(10)) if x > 0 else 30
    with mpmath.workdps(digits):
        zz, a = mpmath.mpf(z), mpmath.mpf(alpha)
        total = mpmath.mpf(0)
        n = 0
        peak = x ** (1.0 / alpha) / alpha + 10
        while True:
            term = zz**n * mpmath.rgamma(a * n + 1)
            total += term
            if n > peak and abs(term) < mpmath.mpf(10) ** (-25):
                break
            n += 1
        return float(total)


def zero_source(points, t):
    return np.zeros(len(points))


def sine_initial(points):
    return np.sin(np.pi * points[:, 0])


def eigenmode_problem(M: int, N: int, alpha: float = 0.5, T: float = 1.0) -> ProblemSpec:
    mesh = SpatialMesh.interval(0.0, 1.0, N)
    a = DiffusionField.constant([[1.0]], 0.99)
    return ProblemSpec(alpha, TimeGrid(T, M), mesh, a, zero_source, sine_initial, name="eigenmode")


def manufactured_problem(M: int, N: int, alpha: float = 0.5) -> ProblemSpec:
    coeff = 2.0 / math.gamma(3.0 - alpha)

    def source(p, t):
        s = np.sin(np.pi * p[:, 0])
        return s * coeff * t ** (2.0 - alpha) + np.pi**2 * (1.0 + t * t) * s

    mesh = SpatialMesh.interval(0.0, 1.0, N)
    return ProblemSpec(alpha, TimeGrid(1.0, M), mesh, DiffusionField.constant([[1.0]], 0.99), source, sine_initial)


@functools.lru_cache(maxsize=None)
def eigenmode_history(M: int, N: int, alpha: float = 0.5):
    return run(eigenmode_problem(M, N, alpha))


@functools.lru_cache(maxsize=None)
def manufactured_history(M: int, N: int, alpha: float = 0.5):
    return run(manufactured_problem(M, N, alpha))


_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("acceptance")
    if mark is not None and (report.when == "call" or report.failed or report.skipped):
        number, title = mark.args
        detail = dict(item.user_properties).get("detail", "")
        if report.when == "call" or number not in _ACCEPTANCE:
            status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
            _ACCEPTANCE[number] = (status, title, detail)
    return report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"[{status}] criterion {number:2d}: {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
