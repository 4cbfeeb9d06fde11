import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gaussian_params, point_params
from polegrowth import pde
from polegrowth.model import ModelParams, PointMassKernel, RateKernel, make_division_rate
from polegrowth.simulator import RootLaw, simulate_population

ROOT = RootLaw(1.0, 1.0, 0, log_sigma=0.5)


def _grid(params, n_x=128, lo=1 / 64, hi=64.0):
    return pde.grid_for(params, ROOT, lo, hi, n_x)


@settings(max_examples=50, deadline=None)
@given(theta=st.floats(0.05, 0.95), n_x=st.integers(16, 300))
def test_remap_keeps_mass_and_first_moment(theta, n_x):
    grid = pde.GridSpec(0.01, 100.0, n_x, (1.0,))
    rm = pde._remap(grid, theta)
    assert 0.0 <= rm.w_lo <= 1.0
    x = grid.x_centers[n_x // 2]
    lo = math.exp(grid.z_centers[n_x // 2] + rm.shift * grid.dz)
    hi = lo * math.exp(grid.dz)
    assert rm.w_lo * lo + (1 - rm.w_lo) * hi == pytest.approx(theta * x, rel=1e-12)


def test_shift_add_reports_lost_mass():
    src = np.arange(1.0, 6.0)
    tgt = np.zeros(5)
    lost = pde._shift_add(tgt, src, -2)
    np.testing.assert_array_equal(tgt, [3, 4, 5, 0, 0])
    assert lost == 3.0
    tgt = np.zeros(5)
    assert pde._shift_add(tgt, src, 1) == 5.0


def test_pure_transport_with_vanishing_rate():
    # B = 0 below 1e3: mass is advected right by v t in log size; only the far tail leaves the grid
    B = make_division_rate("table", {"knots": [(1e3, 0.0), (2e3, 1.0)]})
    params = ModelParams(B, 0.5, RateKernel(PointMassKernel(1.0), PointMassKernel(1.0), 0.5, 1.5))
    grid = pde.grid_for(params, ROOT, 1 / 64, 64.0, 256)
    init = pde.initial_measure(grid, ROOT)
    tl = pde.solve_gf_equation(params, init, 1.0, record_times=[0.0, 1.0])
    end = tl.at(1.0)
    assert end.total + tl.outflow == pytest.approx(init.total, rel=1e-12)
    assert tl.outflow < 1e-8
    mean_z = lambda m: float((m.mass.sum(axis=(0, 1)) * grid.z_centers).sum() / m.total)  # noqa: E731
    assert mean_z(end) - mean_z(init) == pytest.approx(1.0, abs=1e-9)


def test_symmetric_unit_biomass_grows_exponentially():
    # B = x, v = 1, theta = 1/2: d/dt <n, x> = <n, x>, so biomass is e^t up to O(dz)
    params = point_params()
    grid = _grid(params, 512)
    init = pde.initial_measure(grid, ROOT)
    tl = pde.solve_gf_equation(params, init, 1.0)
    size = lambda x, v, q: x  # noqa: E731
    ratio = tl.at(1.0).pair(size) / init.pair(size)
    assert ratio == pytest.approx(math.e, rel=0.02)


def test_count_moment_first_order_in_time():
    params = point_params()
    grid = _grid(params, 128)
    res = []
    for f in (1, 2):
        tl = pde.solve_gf_equation(params, pde.initial_measure(grid, ROOT), 1.0,
                                   dt=grid.max_dt(1.0) / f, record_all=True)
        res.append(np.abs(pde.weak_residual(tl, params, pde.pde_battery()[:1]).row("one")).max())
    assert 0.8 <= math.log2(res[0] / res[1]) <= 1.2


def test_cfl_and_node_checks():
    params = point_params()
    grid = _grid(params)
    init = pde.initial_measure(grid, ROOT)
    with pytest.raises(ValueError, match="CFL"):
        pde.solve_gf_equation(params, init, 1.0, dt=1.01 * grid.max_dt(1.0))
    with pytest.raises(ValueError):
        pde.initial_measure(grid, RootLaw(1.0, 1.2))
    with pytest.raises(ValueError):
        pde.GridSpec(1.0, 0.5, 10, (1.0,))
    with pytest.raises(ValueError):
        pde.GridSpec(0.1, 1.0, 10, (1.0, 0.5))


def test_overflow_raises():
    params = point_params(1.0, 0.5, c=1e-3)  # barely divides, so mass runs off the top
    grid = pde.grid_for(params, ROOT, 0.1, 4.0, 64)
    with pytest.raises(pde.GridOverflowError):
        pde.solve_gf_equation(params, pde.initial_measure(grid, ROOT), 3.0)


def test_timeline_csv_and_lookup(tmp_path):
    params = gaussian_params()
    grid = pde.grid_for(params, ROOT, 1 / 16, 16.0, 32, n_v=3)
    tl = pde.solve_gf_equation(params, pde.initial_measure(grid, ROOT), 0.5, record_times=[0.25, 0.5])
    assert len(tl.measures) == 3
    with pytest.raises(KeyError):
        tl.at(0.3)
    text = tl.to_csv(tmp_path / "t.csv")
    assert text.splitlines()[0] == "t,type,v_node,log_x_bin,mass"
    assert (tmp_path / "t.csv").read_text() == text


def test_binning_mean_and_se():
    params = point_params()
    grid = _grid(params, 64)
    emp, ens = pde.empirical_mean_measure(params, ROOT, [0.0, 0.5], 4000, grid, 1)
    # at t = 0 every replicate has exactly one cell
    assert emp[0].total + emp[0].outside == pytest.approx(1.0)
    assert emp[1].total + emp[1].outside == pytest.approx(ens.counts(1).mean())
    assert np.all(emp[1].se >= 0)


def test_weak_residual_rejects_ensembles():
    with pytest.raises(TypeError):
        pde.weak_residual([], point_params(), pde.pde_battery())


def test_quadrature_times():
    t = pde.quadrature_times([0.0, 1.0], order=2)
    np.testing.assert_allclose(t, [0.0, 0.5 - 0.5 / math.sqrt(3), 0.5 + 0.5 / math.sqrt(3), 1.0])
    with pytest.raises(ValueError):
        pde.quadrature_times([0.0, 0.0])


def test_dual_rhs_of_count_is_mean_birth_rate():
    params = gaussian_params(1.0, 0.4)
    x = np.array([0.5, 1.0, 2.0])
    v = np.array([0.7, 1.0, 1.3])
    (r,) = pde.dual_rhs_values(params, pde.pde_battery()[:1], x, v, np.zeros(3, int))
    np.testing.assert_allclose(r, params.B(x))


def test_empirical_weak_residual_small_sample():
    params = gaussian_params(1.0, 0.4)
    t_grid = [0.0, 0.5, 1.0]
    roots = RootLaw(1.0, 1.0, 0, log_sigma=0.3)
    ens = simulate_population(params, roots, pde.quadrature_times(t_grid), 3000, 6)
    res = pde.empirical_weak_residual(ens, params, pde.pde_battery(), t_grid)
    assert np.abs(res.z).max() < 4.5


@pytest.mark.slow
def test_solver_matches_large_ensemble():
    # with 4e5 replicates the sampling floor sits well below the solver error budget
    params = point_params()
    t = 2 * math.log(2)
    grid = _grid(params, 256)
    solved = pde.solve_gf_equation(params, pde.initial_measure(grid, ROOT), t).at(t)
    emp, _ = pde.empirical_mean_measure(params, ROOT, [t], 400_000, grid, 17, threads=4)
    assert solved.l1_distance(emp[0]) / solved.total <= 0.05
