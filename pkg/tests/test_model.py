import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from conftest import gaussian_params, point_params
from polegrowth.model import (
    GridKernel,
    ModelParams,
    ParameterError,
    PointMassKernel,
    RateKernel,
    TruncatedGaussianKernel,
    cumulative_hazard,
    invert_hazard,
    make_division_rate,
    params_from_config,
    sample_rate_kernel,
)

TABLE = make_division_rate("table", {"knots": [(0.5, 0.2), (1.0, 1.0), (2.0, 1.5), (3.0, 4.0)]})
POWER = make_division_rate("power", {"c": 1.3, "gamma": 2.2})

sizes = st.floats(0.05, 6.0)
rates = st.floats(0.5, 1.5)
ages = st.floats(0.0, 3.0)


@settings(max_examples=60, deadline=None)
@given(x=sizes, v=rates, t=ages)
def test_closed_form_hazard_matches_quadrature(x, v, t):
    for B in (POWER, TABLE):
        exact = cumulative_hazard(B, x, v, t)
        quad = cumulative_hazard(B, x, v, t, method="quad")
        assert exact == pytest.approx(quad, rel=1e-8, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(x=sizes, v=rates, e=st.floats(1e-6, 20.0))
def test_invert_hazard_round_trip(x, v, e):
    for B in (POWER, TABLE):
        age = float(invert_hazard(B, x, v, e))
        if B.family == "table" and x < 0.5 and age == 0.0:
            continue  # B vanishes below the first knot only at x = 0
        assert float(cumulative_hazard(B, x, v, age)) == pytest.approx(e, rel=1e-9)


def test_log_integral_is_antiderivative_of_b_over_x():
    y = np.linspace(0.1, 5.0, 30)
    for B in (POWER, TABLE):
        ref = [integrate.quad(lambda s: float(B(s)) / s, 1e-12, yy, limit=200)[0] for yy in y]
        np.testing.assert_allclose(B.log_integral(y), ref, rtol=1e-8)


def test_table_gets_origin_knot_and_linear_tail():
    assert TABLE.knots_x[0] == 0.0
    slope = (4.0 - 1.5) / 1.0
    assert float(TABLE(5.0)) == pytest.approx(4.0 + 2 * slope)


@pytest.mark.parametrize(
    "knots",
    [
        [(1.0, 1.0)],
        [(1.0, 1.0), (0.5, 2.0)],
        [(0.0, 1.0), (1.0, 2.0)],
        [(0.5, 1.0), (1.0, -1.0)],
        [(0.5, 2.0), (1.0, 1.0)],  # flat or falling tail
    ],
)
def test_table_validation(knots):
    with pytest.raises(ParameterError):
        make_division_rate("table", {"knots": knots})


@pytest.mark.parametrize("c,gamma", [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0)])
def test_power_validation(c, gamma):
    with pytest.raises(ParameterError):
        make_division_rate("power", {"c": c, "gamma": gamma})


def test_theta_bounds():
    k = RateKernel(PointMassKernel(1.0), PointMassKernel(1.0), 0.5, 1.5)
    for bad in (0.0, -0.1, 1.01):
        with pytest.raises(ParameterError):
            ModelParams(POWER, bad, k)
    assert ModelParams(POWER, 1.0, k).theta1 == 0.0


def test_kernel_support_validation():
    with pytest.raises(ParameterError):
        RateKernel(PointMassKernel(2.0), PointMassKernel(1.0), 0.5, 1.5)
    with pytest.raises(ParameterError):
        RateKernel(TruncatedGaussianKernel(0.2, 0.4, 1.5), TruncatedGaussianKernel(0.2, 0.4, 1.5), 0.5, 1.5)
    with pytest.raises(ParameterError):
        GridKernel([0.5, 1.0], [[0.5, 0.4], [0.0, 1.0]])


@pytest.mark.parametrize("v", [0.5, 0.9, 1.5])
def test_gaussian_kernel_density_normalised(v):
    k = TruncatedGaussianKernel(0.2, 0.5, 1.5, mean_a=0.3, mean_b=0.7)
    total, _ = integrate.quad(lambda u: float(k.density(v, u)), 0.5, 1.5)
    assert total == pytest.approx(1.0, abs=1e-10)
    assert float(k.expect(np.asarray(v), np.ones_like)) == pytest.approx(1.0, abs=1e-12)
    mean_q, _ = integrate.quad(lambda u: u * float(k.density(v, u)), 0.5, 1.5)
    assert float(k.expect(np.asarray(v), lambda p: p)) == pytest.approx(mean_q, rel=1e-10)


def test_kernel_samples_stay_in_support():
    rng = np.random.default_rng(3)
    params = gaussian_params()
    for i in (0, 1):
        draws = params.kernels.sample(np.full(5000, i), rng.uniform(0.5, 1.5, 5000), rng)
        assert params.kernels.contains(draws)
    with pytest.raises(ValueError):
        sample_rate_kernel(params.kernels, 2, 1.0, rng)
    with pytest.raises(ValueError):
        sample_rate_kernel(params.kernels, 0, 1.6, rng)


def test_lumped_matrices_are_stochastic():
    nodes = np.linspace(0.5, 1.5, 7)
    g = TruncatedGaussianKernel(0.2, 0.5, 1.5).lumped(nodes)
    np.testing.assert_allclose(g.sum(axis=1), 1.0)
    p = PointMassKernel(1.0).lumped(np.array([0.5, 1.0, 1.5]))
    np.testing.assert_array_equal(p, [[0, 1, 0]] * 3)
    with pytest.raises(ParameterError):
        PointMassKernel(1.1).lumped(nodes)


def test_grid_kernel_sampling_frequencies():
    k = GridKernel([0.5, 1.0, 1.5], [[0.2, 0.3, 0.5], [1, 0, 0], [0, 0, 1]])
    rng = np.random.default_rng(0)
    draws = k.sample(np.full(200_000, 0.5), rng)
    freq = [np.mean(draws == v) for v in (0.5, 1.0, 1.5)]
    np.testing.assert_allclose(freq, [0.2, 0.3, 0.5], atol=0.005)


@pytest.mark.parametrize("params", [point_params(2.0, 0.4), gaussian_params(1.5, 0.3)])
def test_config_round_trip(params):
    back = params_from_config(params.to_config())
    assert back.to_config() == params.to_config()
    assert back.theta0 == params.theta0


def test_config_table_and_grid():
    section = {
        "b.family": "table", "b.knots": "0.5:0.1, 1:1, 2:3",
        "theta0": "0.5", "e_min": "0.5", "e_max": "1.5",
        "kernel.family": "grid", "kernel.matrix": "0.5 0.5; 0.25 0.75",
    }
    params = params_from_config(section)
    assert params.B.family == "table"
    np.testing.assert_array_equal(params.kernels.rho0.grid, [0.5, 1.5])
    assert params.symmetric
    with pytest.raises(ParameterError):
        params_from_config({"theta0": "0.5"})


def test_closed_form_power_hazard_value():
    # c x^g (e^{g v t} - 1) / (g v) at x = 1, v = 1, t = ln 2, g = 1
    B = make_division_rate("power", {"c": 1.0, "gamma": 1.0})
    assert float(cumulative_hazard(B, 1.0, 1.0, math.log(2))) == pytest.approx(1.0)
