import math

import numpy as np
import pytest

from polegrowth.model import (
    ModelParams,
    PointMassKernel,
    RateKernel,
    TruncatedGaussianKernel,
    make_division_rate,
)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def point_params(gamma=1.0, theta0=0.5, c=1.0, v=1.0):
    B = make_division_rate("power", {"c": c, "gamma": gamma})
    return ModelParams(B, theta0, RateKernel(PointMassKernel(v), PointMassKernel(v), 0.5, 1.5))


def gaussian_params(gamma=1.0, theta0=0.5, sigma=0.2):
    B = make_division_rate("power", {"c": 1.0, "gamma": gamma})
    kernels = RateKernel(
        TruncatedGaussianKernel(sigma, 0.5, 1.5),
        TruncatedGaussianKernel(sigma, 0.5, 1.5, mean_a=0.3, mean_b=0.7),
        0.5,
        1.5,
    )
    return ModelParams(B, theta0, kernels)


@pytest.fixture
def unit_params():
    return point_params()


@pytest.fixture
def gauss_params():
    return gaussian_params()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def ln2():
    return math.log(2.0)


def rng(seed=0):
    return np.random.default_rng(seed)
