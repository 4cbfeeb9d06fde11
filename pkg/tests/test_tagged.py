import math

import numpy as np
import pytest

from conftest import gaussian_params, point_params
from polegrowth import tagged
from polegrowth.simulator import RootLaw
from polegrowth.tagged import CountingRow, Phi, counting_verdict, sample_tagged_path, tagged_states


def test_path_size_representation_exact():
    params = gaussian_params(1.0, 0.35)
    for seed in range(20):
        path = sample_tagged_path(params, 1.3, 1.0, 1, 4.0, seed)
        t = np.linspace(0, 4.0, 57)
        np.testing.assert_allclose(path.represented_chi(t, 0.35), path.chi(t), rtol=1e-12)
        c, old, new = path.counts(t)
        np.testing.assert_array_equal(c, old + new)


def test_path_is_cadlag_at_events():
    path = sample_tagged_path(point_params(), 1.0, 1.0, 0, 5.0, 3)
    assert len(path.event_times) > 0
    s = path.event_times[0]
    assert path.chi(s) == pytest.approx(0.5 * path.sizes[0] * math.exp(s))
    assert path.counts(s)[0] == 1
    with pytest.raises(ValueError):
        path.chi(5.1)


def test_path_csv_header():
    text = sample_tagged_path(point_params(), 1.0, 1.0, 0, 2.0, 1).to_csv()
    assert text.splitlines()[0] == "time,size,rate,type,accum,C,C_old,C_new"


def test_tagged_states_thread_invariant():
    params = gaussian_params()
    roots = RootLaw(1.0, 1.0)
    a = tagged_states(params, roots, [0.5, 1.0], 6000, 2, threads=1, batch_size=1000)
    b = tagged_states(params, roots, [0.5, 1.0], 6000, 2, threads=4, batch_size=1000)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.chi, y.chi)
        np.testing.assert_array_equal(x.count, y.count)


def test_event_types_follow_theta():
    # per division, not at a fixed time: short-lived new-pole segments are length-biased away
    params = point_params(1.0, 0.3)
    types = np.concatenate([sample_tagged_path(params, 1.0, 1.0, 0, 30.0, s).types[1:] for s in range(300)])
    assert len(types) > 5000
    assert abs(np.mean(types == 0) - 0.3) < 4 * np.sqrt(0.21 / len(types))


def test_phi_battery_shape():
    phis = tagged.phi_battery()
    assert len(phis) >= 6
    assert any(p.typed for p in phis)
    s = np.array([0.5, 1.0, 2.0])
    for p in phis:
        assert np.all(np.asarray(p(s, s, s, np.array([0, 1, 0]))) >= 0)


def test_many_to_one_small_sample():
    params = point_params(1.0, 0.4)
    rows = tagged.many_to_one_check(params, 1.0, 1.0, tagged.phi_battery(), 4000, 8, v0=1.0)
    assert max(abs(r.z_score) for r in rows) < 4.5
    one = next(r for r in rows if r.phi_id == "one")
    assert one.lhs == 1.0 and one.lhs_se == 0.0
    assert tagged.many_to_one_csv(rows).startswith("phi_id,t,lhs,lhs_se,rhs,rhs_se,z_score")


def test_many_to_one_unit_case_is_exact():
    # point kernel at v: weights x e^{-taubar}/x0 sum to 1 per replicate exactly
    params = point_params(2.0, 0.5)
    rows = tagged.many_to_one_check(params, 1.0, 1.0, [Phi("one", lambda s, v, a: np.ones_like(s))], 500, 1, v0=1.0)
    assert rows[0].rhs == pytest.approx(1.0, abs=1e-12)
    assert rows[0].rhs_se < 1e-12


def _row(h, p1, p2, mean_b=1.0, se=0.01):
    return CountingRow(h, p1, se, p2, se, mean_b, 0.0)


def test_counting_verdict_envelope_and_slope():
    hs = [0.2, 0.1, 0.05, 0.025]
    flat = [_row(h, 1.0 - 0.5 * h, 0.5) for h in hs]
    v = counting_verdict(flat)
    assert v.passed and abs(v.slope) < 1e-12
    growing = [_row(h, 1.0, 0.5 / h) for h in hs]
    assert counting_verdict(growing).slope == pytest.approx(1.0)
    assert not counting_verdict(growing).passed
    off = [_row(h, 1.5, 0.5) for h in hs]
    assert not any(counting_verdict(off).within_envelope)
    with pytest.raises(ValueError):
        counting_verdict([_row(h, 1.0, 0.0) for h in hs])


def test_division_counting_small():
    params = point_params()
    rows = tagged.division_counting_check(params, 1.0, 0.0, [0.2, 0.1], 50_000, 4, v0=1.0)
    assert [r.h for r in rows] == [0.2, 0.1]
    # B(chi_0) = 1 exactly; P1/h near B within O(h)
    for r in rows:
        assert r.mean_b == 1.0
        assert abs(r.p1_over_h - 1.0) < 4 * r.p1_se + r.h
