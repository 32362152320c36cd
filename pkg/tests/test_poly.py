import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftsos.poly import (LinPoly, Polynomial, add, basis_size, diff, evaluate, match_coefficients,
                        monomial_basis, mul, variables)

x1, x2 = variables(2)


def random_poly(rng, nvars=2, deg=4, density=0.6):
    terms = {m: rng.normal() for m in monomial_basis(nvars, deg) if rng.random() < density}
    return Polynomial(nvars, terms)


def naive_eval(p, z):
    total = 0.0
    for m, c in p.terms.items():
        v = c
        for zi, e in zip(z, m):
            v *= zi ** e
        total += v
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- construction and invariants ----------------------------------------

def test_drop_tolerance_applied_after_arithmetic():
    p = Polynomial(2, {(1, 0): 1.0, (0, 1): 1e-13})
    assert p.terms == {(1, 0): 1.0}
    q = (x1 + 1e-7 * x2) - (x1 + (1e-7 - 1e-14) * x2)
    assert q.is_zero()


def test_zero_polynomial_degree_is_zero():
    assert Polynomial.zero(3).degree == 0
    assert (x1 ** 3 * x2).degree == 4


@pytest.mark.parametrize("mono", [(-1, 0), (1, 2, 3)])
def test_invalid_monomials_rejected(mono):
    with pytest.raises(ValueError):
        Polynomial(2, {mono: 1.0})


# -- add -----------------------------------------------------------------

def test_add_cancellation():
    assert add(x1 ** 2, -(x1 ** 2)).is_zero()


def test_add_simple():
    assert add(x1 + x2, x1) == 2 * x1 + x2


def test_add_pointwise(rng):
    for _ in range(10):
        p, q = random_poly(rng), random_poly(rng)
        s = add(p, q)
        for z in rng.uniform(-2, 2, size=(10, 2)):
            assert evaluate(s, z) == pytest.approx(evaluate(p, z) + evaluate(q, z), rel=1e-12, abs=1e-12)


# -- mul -----------------------------------------------------------------

def test_mul_difference_of_squares():
    assert mul(x1 + x2, x1 - x2) == x1 ** 2 - x2 ** 2


def test_mul_by_zero():
    assert mul(x1 ** 2 + 3 * x2, Polynomial.zero(2)).is_zero()


def test_mul_pointwise(rng):
    p, q = random_poly(rng), random_poly(rng)
    r = mul(p, q)
    for z in rng.uniform(-2, 2, size=(100, 2)):
        assert evaluate(r, z) == pytest.approx(evaluate(p, z) * evaluate(q, z), rel=1e-10, abs=1e-10)


# -- diff ----------------------------------------------------------------

def test_diff_power():
    assert diff(x1 ** 3, 0) == 3 * x1 ** 2


def test_diff_other_variable():
    assert diff(x2 ** 2, 0).is_zero()


def test_diff_finite_difference(rng):
    p = random_poly(rng, deg=5, density=1.0)
    h = 1e-5
    for z in rng.uniform(-1, 1, size=(50, 2)):
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (evaluate(p, z + e) - evaluate(p, z - e)) / (2 * h)
            exact = evaluate(diff(p, i), z)
            assert abs(fd - exact) <= 1e-6 * max(1.0, abs(exact))


# -- evaluate ------------------------------------------------------------

@pytest.mark.parametrize("p, z, expected", [
    (x1 ** 2 + x2 ** 2, (0, 0), 0.0),
    (x1 * x2, (2, 3), 6.0),
])
def test_evaluate_examples(p, z, expected):
    assert evaluate(p, z) == expected


def test_evaluate_matches_naive_sum(rng):
    for _ in range(20):
        p = random_poly(rng, deg=6)
        z = rng.uniform(-1.5, 1.5, size=2)
        assert evaluate(p, z) == pytest.approx(naive_eval(p, z), abs=1e-12 * max(1, p.max_abs_coef() * 50))


def test_evaluate_many_and_to_function_agree(rng):
    p = random_poly(rng, nvars=3, deg=4)
    Z = rng.uniform(-1, 1, size=(30, 3))
    f = p.to_function()
    vals = p.evaluate_many(Z)
    for z, v in zip(Z, vals):
        assert v == pytest.approx(evaluate(p, z), abs=1e-12)
        assert f(*z) == pytest.approx(v, abs=1e-12)


# -- monomial basis --------------------------------------------------------

@pytest.mark.parametrize("nvars, max_deg, min_deg, expected", [
    (2, 1, 1, [(1, 0), (0, 1)]),
    (2, 2, 0, None),
])
def test_monomial_basis_examples(nvars, max_deg, min_deg, expected):
    basis = monomial_basis(nvars, max_deg, min_deg)
    if expected is not None:
        assert sorted(basis) == sorted(expected)
    else:
        assert set(basis) == {(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)}


def test_monomial_basis_count_three_vars():
    assert len(monomial_basis(3, 3, 1)) == 19


@pytest.mark.parametrize("nvars, max_deg", list(itertools.product(range(1, 6), range(0, 9))))
def test_basis_counts_match_binomial_sums(nvars, max_deg):
    for min_deg in (0, 1, 2):
        expected = sum(comb(nvars + d - 1, d) for d in range(min_deg, max_deg + 1))
        assert len(monomial_basis(nvars, max_deg, min_deg)) == expected
        assert basis_size(nvars, max_deg, min_deg) == expected


def test_monomial_basis_is_graded():
    degs = [sum(m) for m in monomial_basis(3, 4)]
    assert degs == sorted(degs)


# -- match_coefficients ------------------------------------------------------

def test_match_simple():
    lhs = LinPoly.combination(2, [("a", x1 ** 2), ("b", x1)])
    sol = match_coefficients(lhs, 3 * x1 ** 2).solve()
    assert sol["a"] == pytest.approx(3.0)
    assert sol["b"] == pytest.approx(0.0, abs=1e-14)


def test_match_square_three_rows():
    lhs = LinPoly.combination(2, [("a", (x1 + x2) ** 2)])
    system = match_coefficients(lhs, x1 ** 2 + 2 * x1 * x2 + x2 ** 2)
    assert system.A.shape == (3, 1)
    sol = system.solve()
    assert sol["a"] == pytest.approx(1.0)
    assert system.residual(sol) < 1e-12


def test_match_round_trip(rng):
    polys = [random_poly(rng, deg=3, density=1.0) for _ in range(4)]
    coefs = rng.normal(size=4)
    target = Polynomial.zero(2)
    for c, p in zip(coefs, polys):
        target = target + c * p
    lhs = LinPoly.combination(2, [(f"u{k}", p) for k, p in enumerate(polys)])
    sol = match_coefficients(lhs, target).solve()
    assert np.allclose([sol[f"u{k}"] for k in range(4)], coefs, atol=1e-9)


# -- algebraic properties ----------------------------------------------------

coef = st.floats(-3, 3, allow_nan=False)
poly_strategy = st.dictionaries(
    st.tuples(st.integers(0, 3), st.integers(0, 3)), coef, max_size=6
).map(lambda d: Polynomial(2, d))
point = st.tuples(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))


@settings(max_examples=200, deadline=None)
@given(poly_strategy, poly_strategy, poly_strategy, point)
def test_distributivity_pointwise(p, q, r, z):
    lhs = evaluate((p + q) * r, z)
    rhs = evaluate(p * r + q * r, z)
    assert lhs == pytest.approx(rhs, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(poly_strategy, poly_strategy, point, st.integers(0, 1))
def test_product_rule_pointwise(p, q, z, i):
    lhs = evaluate(diff(p * q, i), z)
    rhs = evaluate(diff(p, i) * q + p * diff(q, i), z)
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_render_round_trip():
    from ftsos.sysparse import parse_polynomial
    p = 4.945 * x1 ** 2 + 1.159 * x1 * x2 - 4.494 * x2 ** 2 + 0.5
    back = parse_polynomial(p.render(["x1", "x2"]), ["x1", "x2"])
    assert back.almost_equal(p, 1e-15)
