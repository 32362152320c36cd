import numpy as np
import pytest

from ftsos.poly import Polynomial
from ftsos.region import (RegionEstimate, boundary_points, check_region, containment_check,
                          estimate_region)
from ftsos.sysparse import parse_polynomial, parse_system

# phase line: x' < 0 on (0, 1) and x' > 0 beyond 1, so the basin is (-1, 1)
BASIN = parse_system('system "basin"\nvars x\nx\' = -sgnpow(x,1/3) + x^3\n')
LINEAR = parse_system('system "lin"\nvars x1 x2\nx1\' = -x1\nx2\' = -x2\n')


@pytest.fixture(scope="module")
def basin_estimate():
    return estimate_region(BASIN, degV=4, bisect_tol=1e-2, n_samples=20000)


def test_basin_beta_below_true_boundary(basin_estimate):
    est = basin_estimate
    assert isinstance(est, RegionEstimate)
    assert 0.25 <= est.beta < 1.0
    assert est.containment["violations"] == 0
    assert est.containment["samples"] > 1000


def test_basin_bisection_history_consistent(basin_estimate):
    hist = basin_estimate.history
    ok = [b for b, f in hist if f]
    bad = [b for b, f in hist if not f]
    assert basin_estimate.beta == max(ok)
    assert not bad or min(bad) > max(ok)


def test_basin_bisection_monotone_spot_checks(basin_estimate):
    assert len(basin_estimate.monotone) == 3
    assert all(ok and b < basin_estimate.beta for b, ok in basin_estimate.monotone)


def test_basin_boundary_trajectories_settle(basin_estimate):
    chk = check_region(basin_estimate, BASIN, n_traj=20)
    assert chk.ok, chk.failures
    assert chk.settled == 20


def test_inflated_beta_leaves_basin(basin_estimate):
    # x^2 = 1.5 beta is beyond the unstable equilibrium at 1
    chk = check_region(basin_estimate, BASIN, n_traj=4, beta=1.5 * basin_estimate.beta, t_max=5.0)
    assert not chk.ok
    assert chk.settled == 0


def test_globally_stable_reaches_bracket_top():
    est = estimate_region(LINEAR, degV=2, beta_bracket=(1e-2, 10.0), n_samples=5000)
    assert isinstance(est, RegionEstimate)
    assert est.beta == 10.0
    assert est.history[:2] == [(1e-2, True), (10.0, True)]


def test_containment_detects_oversized_level():
    est = RegionEstimate(parse_polynomial("x^2", ["x"]), parse_polynomial("x^2", ["x"]), 2.0, 0.1,
                         ["x"], 1, rs=None)
    from ftsos.recast import recast
    est.rs = recast(BASIN)
    est.V = est.rs.embed_original(est.V)
    out = containment_check(est, n_samples=2000)
    assert out["violations"] > 0 and out["max_V"] > 1


@pytest.mark.parametrize("beta", [0.5, 2.0])
def test_boundary_points_on_level_set(beta):
    p = parse_polynomial("x1^2 + 2*x2^2 + x1*x2", ["x1", "x2"])
    pts = boundary_points(p, beta, 16)
    assert np.allclose(p.evaluate_many(pts), beta, atol=1e-9)


def test_boundary_points_one_dimensional():
    pts = boundary_points(Polynomial(1, {(2,): 1.0}), 0.25, 4)
    assert sorted(pts[:, 0].round(9)) == [-0.5, -0.5, 0.5, 0.5]


@pytest.mark.parametrize("kwargs", [dict(c=0.0), dict(beta_bracket=(1.0, 0.5)),
                                    dict(p_shape=parse_polynomial("x1^2", ["x1", "x2"]))])
def test_argument_checks(kwargs):
    with pytest.raises(ValueError):
        estimate_region(BASIN, **kwargs)
