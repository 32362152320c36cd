import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftsos.sysparse import (BUNDLED, ParseError, eval_rhs, eval_rhs_many, load_system, parse_polynomial,
                            parse_system, render_system, structurally_equal)

EX1 = """system "ex1"
vars x1 x2
x1' = -sgnpow(x1,1/3) - x1^3 + x2*sgnpow(x1,1/3)
x2' = -sgnpow(x2,1/3) - x2^3 - x1
"""


def test_example1_shape():
    sys = parse_system(EX1)
    assert sys.nstates == 2 and sys.ninputs == 0
    assert sys.vars == ("x1", "x2")


def test_linear_system():
    sys = parse_system('system "lin"\nvars x1\nx1\' = -x1\n')
    assert sys.nstates == 1
    assert eval_rhs(sys, [2.5])[0] == -2.5


def test_example2_input_column():
    sys = load_system("ex2")
    assert sys.nstates == 2 and sys.ninputs == 1
    for x2 in (0.3, -5.0, 1.0):
        G = sys.eval_input_matrix([0.7, x2])
        assert G[0, 0] == 0.0
        assert G[1, 0] == pytest.approx(abs(x2) ** 0.125, rel=1e-14)


def test_example1_equilibrium():
    sys = parse_system(EX1)
    assert np.array_equal(eval_rhs(sys, [0.0, 0.0]), [0.0, 0.0])


def test_sgnpow_odd_root():
    sys = parse_system('system "s"\nvars x\nx\' = sgnpow(x,1/3)\n')
    assert eval_rhs(sys, [-8.0])[0] == pytest.approx(-2.0, rel=1e-14)


def test_example1_hand_evaluation():
    assert np.allclose(eval_rhs(parse_system(EX1), [1.0, 1.0]), [-1.0, -3.0], atol=1e-14)


def test_sign_of_zero_is_zero():
    sys = parse_system('system "s"\nvars x y\nx\' = sgnpow(x,1/2)*y\ny\' = -abspow(x,1/2)\n')
    assert np.array_equal(eval_rhs(sys, [0.0, 3.0]), [0.0, 0.0])


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_round_trip(name):
    sys = load_system(name)
    again = parse_system(render_system(sys))
    assert structurally_equal(sys, again)


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_origin_is_equilibrium(name):
    sys = load_system(name)
    assert np.all(np.abs(eval_rhs(sys, np.zeros(sys.nstates))) <= 1e-9)


def test_example1_symmetry_split():
    # every term is odd except x2*sgnpow(x1,1/3), which is even
    sys = parse_system(EX1)
    X = np.random.default_rng(0).uniform(-2, 2, size=(100, 2))
    for x in X:
        f, g = eval_rhs(sys, x), eval_rhs(sys, -x)
        assert g[1] == pytest.approx(-f[1], abs=1e-12)
        assert f[0] + g[0] == pytest.approx(2 * x[1] * np.cbrt(x[0]), abs=1e-12)


def test_odd_system_is_odd():
    sys = parse_system('system "o"\nvars x1 x2\nx1\' = -sgnpow(x1,1/3) - x1^3 + x2\nx2\' = -sgnpow(x2,1/3) - x1\n')
    for x in np.random.default_rng(1).uniform(-2, 2, size=(100, 2)):
        assert np.allclose(eval_rhs(sys, -x), -eval_rhs(sys, x), atol=1e-12)


def test_vectorized_evaluation_matches():
    sys = load_system("ex2")
    rng = np.random.default_rng(3)
    X = rng.uniform(-2, 2, size=(50, 2))
    U = rng.uniform(-1, 1, size=(50, 1))
    many = eval_rhs_many(sys, X, U)
    for x, u, row in zip(X, U, many):
        assert np.allclose(eval_rhs(sys, x, u), row, rtol=1e-13, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(-5, 5), st.integers(1, 7), st.floats(-4, 4, allow_nan=False))
def test_sgnpow_matches_numpy(num, den, x):
    from fractions import Fraction
    r = Fraction(num, den)
    if r <= 0:
        return
    sys = parse_system(f'system "s"\nvars x\nx\' = sgnpow(x,{r.numerator}/{r.denominator})\n')
    expected = np.sign(x) * abs(x) ** float(r)
    assert eval_rhs(sys, [x])[0] == pytest.approx(expected, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("text, line", [
    ('vars x\nx\' = -x\n', 1),
    ('system "a"\nvars x\nx\' = -x +\n', 3),
    ('system "a"\nvars x\nx\' = -y\n', 3),
    ('system "a"\nvars x\ninputs u\nx\' = -x + u*u\n', 4),
    ('system "a"\nvars x\nx\' = 1 - x\n', 3),
    ('system "a"\nvars x y\nx\' = -x\n', 3),
    ('system "a"\nvars x\nx\' = -x\nx\' = -x\n', 4),
    ('system "a"\nvars x\nfoo bar\n', 3),
])
def test_parse_errors_report_location(text, line):
    with pytest.raises(ParseError) as info:
        parse_system(text)
    assert info.value.line == line


def test_parse_polynomial_rejects_rational_powers():
    with pytest.raises(ParseError):
        parse_polynomial("abspow(x1,1/2)", ["x1"])


def test_load_system_unknown_name(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_system(str(tmp_path / "missing.sys"))
    path = tmp_path / "mine.sys"
    path.write_text(EX1)
    assert structurally_equal(load_system(str(path)), load_system("ex1"))
