from fractions import Fraction

import numpy as np
import pytest

from ftsos.poly import Polynomial
from ftsos.recast import recast
from ftsos.sim import integrate, system_rhs
from ftsos.sysparse import BUNDLED, eval_rhs, eval_rhs_many, load_system, parse_polynomial, parse_system


def recast_rhs(rs):
    """Extended field ``num / den`` per coordinate, for simulation off the cleared form."""
    nf = [p.to_function() for p in rs.numerators]
    df = [p.to_function() for p in rs.denominators]
    return lambda z: np.array([n(*z) / d(*z) for n, d in zip(nf, df)])


def test_example2_relations():
    rs = recast(load_system("ex2"))
    assert rs.names == ["x1", "x2", "x3", "x4"]
    assert rs.var_map == {"x3": ("x1", Fraction(1, 8), "sgn"), "x4": ("x2", Fraction(1, 8), "abs")}
    N = ["x1", "x2", "x3", "x4"]
    g1 = {g.render(N) for g in rs.G1}
    assert {parse_polynomial(s, N) for s in g1} == {parse_polynomial("x3^16 - x1^2", N),
                                                    parse_polynomial("x4^16 - x2^2", N)}
    assert set(rs.G2) == {parse_polynomial("x3*x1", N), parse_polynomial("x4", N)}


def test_polynomial_system_identity_recast():
    sys = parse_system('system "p"\nvars x1 x2\nx1\' = -x1 + x2^2\nx2\' = -x2^3\n')
    rs = recast(sys)
    assert rs.nvars == 2 and not rs.slacks
    assert rs.G1 == [] and rs.G2 == []
    assert rs.D == Polynomial.constant(2, 1.0)
    for d in rs.denominators:
        assert d == Polynomial.constant(2, 1.0)


def test_supertwist_field():
    rs = recast(load_system("supertwist"))
    N = rs.names
    assert rs.nvars == 3
    assert rs.numerators[0] == parse_polynomial("-2*x3 - 5*x1 + 2*x2", N)
    assert rs.numerators[1] == parse_polynomial("-10*x3 - 5*x1", N)


def test_supertwist_slack_dynamics_chain_rule():
    # x3^2 = |x1| gives 2 x3 x3' = sign(x1) x1'
    sys = load_system("supertwist")
    rs = recast(sys)
    f = recast_rhs(rs)
    for x in np.random.default_rng(2).uniform(-2, 2, size=(50, 2)):
        z = rs.lift(x)
        dz = f(z)
        assert 2 * z[2] * dz[2] == pytest.approx(np.sign(x[0]) * dz[0], rel=1e-10, abs=1e-12)
        assert dz[:2] == pytest.approx(eval_rhs(sys, x), rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("name", BUNDLED)
def test_manifold_consistency(name):
    rs = recast(load_system(name))
    Z = rs.lift_many(np.random.default_rng(0).uniform(-2, 2, size=(100, rs.norig)))
    for g in rs.G1:
        assert np.max(np.abs(g.evaluate_many(Z))) <= 1e-9
    for g in rs.G2:
        assert np.min(g.evaluate_many(Z)) >= -1e-9


@pytest.mark.parametrize("name", BUNDLED)
def test_cleared_field_matches_original(name):
    sys = load_system(name)
    rs = recast(sys)
    X = np.random.default_rng(1).uniform(-2, 2, size=(100, rs.norig))
    Z = rs.lift_many(X)
    D = rs.D.evaluate_many(Z)
    assert np.all(D >= 0)
    F = eval_rhs_many(sys, X)
    for i in range(rs.norig):
        lhs = rs.field[i].evaluate_many(Z)
        rhs = D * F[:, i]
        assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * np.max(np.abs(rhs)))


@pytest.mark.parametrize("name", BUNDLED)
def test_slack_denominators_nonnegative(name):
    rs = recast(load_system(name))
    Z = rs.lift_many(np.random.default_rng(4).uniform(-2, 2, size=(200, rs.norig)))
    for d in rs.denominators:
        assert np.all(d.evaluate_many(Z) >= 0)


def test_lie_derivative_linear():
    rs = recast(parse_system('system "l"\nvars x1\nx1\' = -x1\n'))
    ld = rs.lie_derivative(Polynomial(1, {(2,): 1.0}))
    assert ld.numerator == Polynomial(1, {(2,): -2.0})
    assert ld.denominator == Polynomial.constant(1, 1.0)


def test_lie_derivative_cube_root():
    # V = z^6 = x^2 on the z^3 = x manifold; d/dt x^2 = -2 x^(4/3) = -2 z^4
    rs = recast(parse_system('system "c"\nvars x\nx\' = -sgnpow(x,1/3)\n'))
    V = Polynomial(2, {(0, 6): 1.0})
    ld = rs.lie_derivative(V)
    for x in np.random.default_rng(5).uniform(-3, 3, size=50):
        z = rs.lift([x])
        val = ld.numerator.evaluate(z) / ld.denominator.evaluate(z)
        assert val == pytest.approx(-2 * z[1] ** 4, rel=1e-10)
        assert val == pytest.approx(-2 * abs(x) ** (4 / 3), rel=1e-10)


def test_example1_quadratic_decreases_on_unit_sublevel():
    rs = recast(load_system("ex1"))
    V = rs.embed_original(parse_polynomial("4.945*x1^2 + 1.159*x1*x2 + 4.494*x2^2", ["x1", "x2"]))
    X = np.random.default_rng(6).uniform(-0.5, 0.5, size=(4000, 2))
    Z = rs.lift_many(X)
    keep = (V.evaluate_many(Z) <= 1.0) & (np.linalg.norm(X, axis=1) > 1e-6)
    ld = rs.lie_derivative(V)
    num = ld.numerator.evaluate_many(Z[keep])
    den = ld.denominator.evaluate_many(Z[keep])
    assert keep.sum() > 1000
    assert np.all(num / den <= 0)
    assert np.allclose(num / den, rs.vdot(V, X[keep]), rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("name", BUNDLED)
def test_vdot_matches_finite_difference(name):
    sys = load_system(name)
    rs = recast(sys)
    rng = np.random.default_rng(7)
    V = Polynomial(rs.nvars, {m: rng.uniform(0.5, 1.5) for m in
                              [tuple(2 if k == j else 0 for k in range(rs.nvars)) for j in range(rs.nvars)]})
    h = 1e-6
    for x in rng.uniform(0.2, 1.5, size=(20, rs.norig)) * rng.choice([-1, 1], size=(20, rs.norig)):
        f = eval_rhs(sys, x)
        fd = (V.evaluate(rs.lift(x + h * f)) - V.evaluate(rs.lift(x - h * f))) / (2 * h)
        assert rs.vdot(V, x[None, :])[0] == pytest.approx(fd, rel=1e-5, abs=1e-7)


@pytest.mark.parametrize("name", BUNDLED)
def test_recast_trajectories_track_original(name):
    # compared until a slack-carrying state comes within 0.1 of zero, where
    # the slack dynamics are singular and fixed-step RK4 cannot follow them
    sys = load_system(name)
    rs = recast(sys)
    rhs = recast_rhs(rs)
    watched = sorted({s.var for s in rs.slacks})
    compared = 0
    for x0 in np.random.default_rng(0).uniform(-2, 2, size=(20, rs.norig)):
        a = integrate(system_rhs(sys), x0, dt=1e-3, t_max=1.0, stop_on_settle=False)
        near = np.flatnonzero((np.abs(a.x[:, watched]) < 0.1).any(axis=1))
        horizon = a.t[near[0]] if len(near) else 1.0
        if horizon < 0.05:
            continue
        b = integrate(rhs, rs.lift(x0), dt=1e-3, t_max=horizon, stop_on_settle=False)
        k = len(b.t)
        assert np.max(np.abs(a.x[:k] - b.x[:, :rs.norig])) <= 1e-5
        for g in rs.G1:
            assert np.max(np.abs(g.evaluate_many(b.x))) <= 1e-6
        for g in rs.G2:
            assert np.min(g.evaluate_many(b.x)) >= -1e-6
        compared += 1
    assert compared >= 10


def test_shared_slack_per_root():
    sys = parse_system('system "s"\nvars x\nx\' = -sgnpow(x,1/3) - 2*sgnpow(x,1/3)*x^2 - abspow(x,2/3)*sgnpow(x,1/3)\n')
    rs = recast(sys)
    assert len(rs.slacks) == 1
